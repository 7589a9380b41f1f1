import filecmp
import itertools
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from setvec.corpus import (
    Corpus,
    CorpusError,
    Item,
    ManifestError,
    StyleSet,
    SyntheticSpec,
    dominant_color,
    gen_synthetic,
    load_corpus,
    load_corpus_dir,
    pairwise_transform,
    read_image,
    read_sidecar,
)
from setvec.tensor import save_itf

from conftest import tiny_spec


def _write_manifests(tmp_path, sets_lines, n_items=10):
    cats = ["top", "bottom", "shoes", "outer"]
    img = np.zeros((3, 8, 8), dtype=np.float32)
    lines = []
    for n in range(n_items):
        save_itf(tmp_path / f"x{n}.itf", img)
        lines.append(f"x{n}\t{cats[n % 4]}\tx{n}.itf")
    (tmp_path / "items.tsv").write_text("\n".join(lines) + "\n")
    (tmp_path / "sets.tsv").write_text("\n".join(sets_lines) + "\n")
    return tmp_path / "items.tsv", tmp_path / "sets.tsv"


def test_manifest_parse(tmp_path):
    paths = _write_manifests(tmp_path, ["A\tx0,x1", "B\tx0,x1,x2", "C\tx4,x5,x6,x7"])
    c = load_corpus(*paths)
    assert len(c.items) == 10 and len(c.sets) == 3
    assert c.sets[2].item_ids == ("x4", "x5", "x6", "x7")
    assert c.load_image("x3").shape == (3, 8, 8)


def test_manifest_rejects_five_item_set(tmp_path):
    paths = _write_manifests(tmp_path, ["big\tx0,x1,x2,x3,x4"])
    with pytest.raises(CorpusError, match="big"):
        load_corpus(*paths)


def test_manifest_rejects_dangling_reference(tmp_path):
    paths = _write_manifests(tmp_path, ["A\tx0,x9"], n_items=5)
    with pytest.raises(CorpusError, match="x9"):
        load_corpus(*paths)


def test_manifest_rejects_repeated_category_and_duplicate(tmp_path):
    with pytest.raises(CorpusError, match="category"):
        load_corpus(*_write_manifests(tmp_path, ["A\tx0,x4"]))
    with pytest.raises(CorpusError, match="repeats"):
        load_corpus(*_write_manifests(tmp_path, ["A\tx0,x0"]))


def test_manifest_malformed_line_reports_line_number(tmp_path):
    items, sets = _write_manifests(tmp_path, ["A\tx0,x1", "broken-line"])
    with pytest.raises(ManifestError) as info:
        load_corpus(items, sets)
    assert info.value.lineno == 2


def test_undeclared_category_rejected():
    with pytest.raises(CorpusError):
        Corpus([Item("a", "hat", "a.itf")], [], category_set=["top"])


def test_duplicate_item_rejected():
    with pytest.raises(CorpusError):
        Corpus([Item("a", "top", "p"), Item("a", "bottom", "q")], [])


def test_png_images_load(tmp_path):
    from PIL import Image

    arr = np.zeros((4, 5, 3), dtype=np.uint8)
    arr[..., 0] = 255
    Image.fromarray(arr).save(tmp_path / "r.png")
    img = read_image(tmp_path / "r.png")
    assert img.shape == (3, 4, 5) and img.dtype == np.float32
    assert img[0].min() == 1.0 and img[1].max() == 0.0


# pairwise transform

def _abstract_corpus(sets):
    cats = ["top", "bottom", "shoes", "outer"]
    items = [Item(f"{s}{n}", cats[n], "unused") for s in "abcdefgh" for n in range(4)]
    return Corpus(items, [StyleSet(f"S{k}", ids) for k, ids in enumerate(sets)])


def test_pairwise_three_to_three():
    p = pairwise_transform(_abstract_corpus([("a0", "a1", "a2")]))
    assert [s.item_ids for s in p.sets] == [("a0", "a1"), ("a0", "a2"), ("a1", "a2")]


def test_pairwise_pair_is_fixed_point():
    c = _abstract_corpus([("a0", "a1")])
    assert [s.item_ids for s in pairwise_transform(c).sets] == [("a0", "a1")]


def test_pairwise_counts():
    c = _abstract_corpus([("a0", "a1", "a2", "a3"), ("b0", "b1", "b2")])
    assert len(pairwise_transform(c).sets) == 9


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(2, 4), min_size=0, max_size=8))
def test_pairwise_count_property(sizes):
    sets = [tuple(f"{'abcdefgh'[k]}{n}" for n in range(size)) for k, size in enumerate(sizes)]
    p = pairwise_transform(_abstract_corpus(sets))
    assert len(p.sets) == sum(comb(s, 2) for s in sizes)
    assert all(len(s) == 2 for s in p.sets)


# synthetic generator

def test_default_corpus_counts_and_determinism(tmp_path):
    spec = SyntheticSpec(seed=7)
    a = gen_synthetic(spec, tmp_path / "a")
    gen_synthetic(SyntheticSpec(seed=7), tmp_path / "b")
    assert len(a.corpus.items) == 240 and len(a.corpus.sets) == 500
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for name in ("items.tsv", "sets.tsv", "factors.tsv", "labeled_sets.tsv", "spec.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    imgs = sorted((tmp_path / "a" / "images").iterdir())
    assert len(imgs) == 240
    assert all(f.read_bytes() == (tmp_path / "b" / "images" / f.name).read_bytes() for f in imgs)


def test_sets_are_style_coherent(small):
    c, fac = small.corpus, small.factors
    for s in c.sets:
        cats = [c.category_of(i) for i in s.item_ids]
        assert len(set(cats)) == len(cats)
        assert len({fac[i].style for i in s.item_ids}) == 1
    assert {len(s) for s in c.sets} == {2, 3, 4}


def test_labeled_sets_are_balanced(small):
    labels = small.labels
    counts = {lab: labels.count(lab) for lab in set(labels)}
    assert len(counts) == 4 and max(counts.values()) - min(counts.values()) <= 1
    for s, lab in zip(small.labeled_sets, labels):
        assert all(small.factors[i].style == lab for i in s.item_ids)


def test_zero_sets(tmp_path):
    out = gen_synthetic(tiny_spec(n_sets=0), tmp_path)
    assert out.corpus.sets == () and len(out.corpus.items) == 20


def test_round_trip_from_disk(tiny, tmp_path_factory):
    c = load_corpus_dir(tiny.corpus.items[0].image_ref.rsplit("/images/", 1)[0])
    assert c.item_ids == tiny.corpus.item_ids
    assert [s.item_ids for s in c.sets] == [s.item_ids for s in tiny.corpus.sets]
    np.testing.assert_array_equal(c.load_image("i00003"), tiny.corpus.load_image("i00003"))


def test_sidecar_matches_rendered_colour(tmp_path):
    # at the default 32x32 size the primary tone dominates every foreground
    out = gen_synthetic(tiny_spec(n_styles=6, categories=("top", "bottom", "shoes", "outer", "dress"),
                                  image_shape=(3, 32, 32), n_sets=0, n_labeled_sets=0), tmp_path)
    for iid in out.corpus.item_ids:
        assert dominant_color(out.corpus.load_image(iid)) == out.factors[iid].color


def test_sidecar_file(tiny, tmp_path):
    root = tiny.corpus.items[0].image_ref.rsplit("/images/", 1)[0]
    assert read_sidecar(f"{root}/factors.tsv") == tiny.factors


def test_styles_use_disjoint_colours(small):
    by_style = {}
    for f in small.factors.values():
        by_style.setdefault(f.style, set()).add(f.color)
    for a, b in itertools.combinations(by_style.values(), 2):
        assert not a & b


@pytest.mark.parametrize("bad", [
    dict(n_items_per_category_per_style=100),
    dict(categories=("top",)),
    dict(image_shape=(3, 4, 4)),
    dict(n_styles=7),
    dict(set_size_distribution=(0.0, 0.0, 1.0), categories=("top", "bottom", "shoes")),
    dict(n_sets=-1),
])
def test_spec_validation(bad, tmp_path):
    with pytest.raises(ValueError):
        gen_synthetic(tiny_spec(**bad), tmp_path)


def test_popularity_skews_reuse(tmp_path):
    flat = gen_synthetic(tiny_spec(n_sets=400), tmp_path / "f").corpus
    skew = gen_synthetic(tiny_spec(n_sets=400, popularity_exponent=2.0), tmp_path / "s").corpus

    def top_share(c):
        counts = {}
        for s in c.sets:
            for i in s.item_ids:
                counts[i] = counts.get(i, 0) + 1
        return max(counts.values()) / sum(counts.values())

    assert top_share(skew) > 2 * top_share(flat)
