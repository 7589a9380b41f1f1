"""VGG-style image encoders.

Two networks share one architecture but never parameters: the input network
maps an item image to its embedding, the context network maps images to the
weight vectors used only inside the training objective.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

INPUT_ROLE = "input"
CONTEXT_ROLE = "context"
ROLES = (INPUT_ROLE, CONTEXT_ROLE)


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture of one encoder.

    Each stage is ``(out_channels, conv_count)`` of 3x3 same-padded
    convolutions, each followed by batch norm (optional) and relu, then a
    2x2 pool. A global average pool and an affine projection to
    ``embedding_dim`` close the network.
    """

    input_shape: tuple[int, int, int] = (3, 32, 32)
    conv_stages: tuple[tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2))
    pools: tuple[str, ...] | None = None
    embedding_dim: int = 64
    batch_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(x) for x in self.input_shape))
        object.__setattr__(self, "conv_stages", tuple((int(c), int(n)) for c, n in self.conv_stages))
        if self.pools is None:
            object.__setattr__(self, "pools", ("max",) * len(self.conv_stages))
        else:
            object.__setattr__(self, "pools", tuple(self.pools))

    def validate(self) -> None:
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ValueError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.embedding_dim < 2:
            raise ValueError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if not self.conv_stages:
            raise ValueError("at least one conv stage is required")
        if len(self.pools) != len(self.conv_stages):
            raise ValueError("pools must list one pool kind per stage")
        for kind in self.pools:
            if kind not in ("max", "avg"):
                raise ValueError(f"unknown pool kind {kind!r}")
        h, w = self.input_shape[1:]
        for out_c, count in self.conv_stages:
            if out_c < 1 or count < 1:
                raise ValueError(f"bad conv stage {(out_c, count)}")
            if h % 2 or w % 2:
                raise ValueError(f"spatial size {h}x{w} is not divisible by the 2x2 pool")
            h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ValueError("spatial size vanishes after pooling")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["conv_stages"] = [list(s) for s in self.conv_stages]
        d["pools"] = list(self.pools)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "EncoderConfig":
        return cls(**{**d, "conv_stages": tuple(tuple(s) for s in d["conv_stages"])})


@dataclass
class EncoderParams:
    """Named tensors of one encoder plus its role tag."""

    config: EncoderConfig
    role: str
    tensors: dict[str, Tensor]

    def trainable_names(self) -> list[str]:
        return [n for n in self.tensors if not n.endswith(("running_mean", "running_var"))]

    def replace(self, updates: Mapping[str, Tensor]) -> "EncoderParams":
        return EncoderParams(self.config, self.role, {**self.tensors, **updates})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.config, self.role, {k: Tensor(v.data, dtype=dtype) for k, v in self.tensors.items()})


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: EncoderConfig, seed: int, role: str = INPUT_ROLE, dtype=np.float32) -> EncoderParams:
    """Fan-in scaled uniform weights, zero biases, unit batch-norm scale.

    The stream depends on ``(seed, role)`` so the two networks draw
    independent values from a single seed.
    """
    config.validate()
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}, got {role!r}")
    rng = np.random.default_rng([int(seed), ROLES.index(role)])
    tensors: dict[str, np.ndarray] = {}
    in_c = config.input_shape[0]
    for si, (out_c, count) in enumerate(config.conv_stages):
        for ci in range(count):
            p = f"stage{si}.conv{ci}"
            # sqrt(6) scaling keeps relu activations from shrinking with depth
            tensors[f"{p}.weight"] = _uniform(rng, (out_c, in_c, 3, 3), in_c * 9) * np.sqrt(6.0)
            tensors[f"{p}.bias"] = np.zeros(out_c)
            if config.batch_norm:
                tensors[f"{p}.bn.gamma"] = np.ones(out_c)
                tensors[f"{p}.bn.beta"] = np.zeros(out_c)
                tensors[f"{p}.bn.running_mean"] = np.zeros(out_c)
                tensors[f"{p}.bn.running_var"] = np.ones(out_c)
            in_c = out_c
    tensors["proj.weight"] = _uniform(rng, (in_c, config.embedding_dim), in_c) * np.sqrt(3.0)
    tensors["proj.bias"] = np.zeros(config.embedding_dim)
    return EncoderParams(config, role, {k: Tensor(v, dtype=dtype) for k, v in tensors.items()})


def encode(
    params: EncoderParams,
    images,
    train_mode: bool = False,
    stats_out: dict[str, Tensor] | None = None,
) -> Tensor:
    """Map an (N, C, H, W) image batch to (N, d) embeddings.

    In ``train_mode`` batch norm uses batch statistics; the advanced running
    statistics are written into ``stats_out`` when given. Otherwise the
    running statistics are used and every row is independent of the rest of
    the batch.
    """
    cfg = params.config
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images), dtype=params.tensors["proj.weight"].dtype)
    if x.ndim != 4 or x.shape[1:] != cfg.input_shape:
        raise T.ShapeError(f"encode: expected (N, {', '.join(map(str, cfg.input_shape))}), got {x.shape}")
    if x.shape[0] < 1:
        raise T.ShapeError("encode: empty batch")
    p = params.tensors
    for si, (_, count) in enumerate(cfg.conv_stages):
        for ci in range(count):
            name = f"stage{si}.conv{ci}"
            x = T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=1, padding=1)
            if cfg.batch_norm:
                bn = f"{name}.bn"
                rm, rv = p[f"{bn}.running_mean"], p[f"{bn}.running_var"]
                if train_mode and stats_out is not None:
                    mu, var = T.batch_moments(x.data)
                    m = x.size // x.shape[1]
                    unbiased = var * (m / max(m - 1, 1))
                    stats_out[f"{bn}.running_mean"] = Tensor._wrap(T.update_running(rm.data, mu))
                    stats_out[f"{bn}.running_var"] = Tensor._wrap(T.update_running(rv.data, unbiased))
                x = T.batch_norm(x, p[f"{bn}.gamma"], p[f"{bn}.beta"], rm, rv, train=train_mode)
            x = T.relu(x)
        x = T.max_pool2d(x, 2) if cfg.pools[si] == "max" else T.avg_pool2d(x, 2)
    x = T.avg_pool2d(x)
    x = T.reshape(x, (x.shape[0], x.shape[1]))
    return T.affine(x, p["proj.weight"], p["proj.bias"])
