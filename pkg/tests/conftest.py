import numpy as np
import pytest

from setvec.corpus import SyntheticSpec, gen_synthetic
from setvec.encoder import EncoderConfig
from setvec.trainer import TrainConfig


def tiny_spec(**overrides) -> SyntheticSpec:
    base = dict(
        n_styles=2, n_items_per_category_per_style=5, categories=("top", "bottom"),
        image_shape=(3, 8, 8), n_sets=50, set_size_distribution=(1.0, 0.0, 0.0),
        n_labeled_sets=40, seed=3,
    )
    base.update(overrides)
    return SyntheticSpec(**base)


TINY_ENCODER = EncoderConfig(input_shape=(3, 8, 8), conv_stages=((4, 1), (8, 1)), embedding_dim=16)


@pytest.fixture(scope="session")
def tiny(tmp_path_factory):
    """20 items, 2 categories, 50 pair sets of 8x8 images."""
    return gen_synthetic(tiny_spec(), tmp_path_factory.mktemp("tiny"))


@pytest.fixture(scope="session")
def small(tmp_path_factory):
    """4 categories, 4 styles, sets of size 2 to 4, 8x8 images."""
    spec = tiny_spec(
        n_styles=4, categories=("top", "bottom", "shoes", "outer"), n_items_per_category_per_style=4,
        n_sets=60, set_size_distribution=(0.3, 0.4, 0.3), n_labeled_sets=80,
    )
    return gen_synthetic(spec, tmp_path_factory.mktemp("small"))


@pytest.fixture
def tiny_train_config():
    return TrainConfig(epochs=2, batch_size=8, k=3, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# acceptance criteria report one line each at the end of the run
ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
