"""Set-wise skip-gram objectives.

Within a style set every member in turn is the input item and the other
members are its context. ``softmax_set_loss`` normalizes over the whole item
pool and serves as a small-scale reference; ``negsample_loss`` and
``set_loss_negsampled`` replace the normalizer with ``k`` sampled non-members
and are what training minimizes. All losses are negated objectives.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .corpus import StyleSet
from .tensor import Tensor


class InsufficientPoolError(ValueError):
    """Not enough non-member items to draw the requested negatives."""


def set_pairs(s: StyleSet | Sequence[str]) -> list[tuple[str, str]]:
    """All ordered (input, context) pairs of distinct members, sorted."""
    ids = sorted(s.item_ids if isinstance(s, StyleSet) else s)
    if len(ids) < 2:
        raise ValueError(f"a style set needs at least 2 items, got {len(ids)}")
    return [(i, c) for i in ids for c in ids if i != c]


def sample_negatives(pool: Sequence[str], s: StyleSet | Sequence[str], k: int, rng: np.random.Generator) -> list[str]:
    """Draw ``k`` distinct ids uniformly without replacement from ``pool`` minus ``s``."""
    members = set(s.item_ids if isinstance(s, StyleSet) else s)
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    candidates = [x for x in pool if x not in members]
    if len(candidates) < k:
        raise InsufficientPoolError(
            f"insufficient negative pool: need {k} negatives but only {len(candidates)} items lie outside the set"
        )
    if k == 0:
        return []
    picks = rng.choice(len(candidates), size=k, replace=False)
    return [candidates[int(j)] for j in picks]


def _vec(x, dtype=np.float64) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def softmax_set_loss(u: Mapping[str, Tensor], v: Mapping[str, Tensor], s: StyleSet | Sequence[str]) -> Tensor:
    """Exact set loss normalized over every item in ``v``.

    ``-(1/|S|) * sum_i sum_{c != i} log softmax_F(u_i . v)[c]``
    """
    ids = list(s.item_ids if isinstance(s, StyleSet) else s)
    missing = [i for i in ids if i not in u] + [i for i in ids if i not in v]
    if missing:
        raise KeyError(f"missing vectors for {sorted(set(missing))}")
    pool = list(v)
    col = {iid: n for n, iid in enumerate(pool)}
    U = T.stack([_vec(u[i]) for i in ids])
    V = T.stack([_vec(v[j]) for j in pool])
    logits = T.matmul(U, T.transpose(V))
    lse = T.logsumexp(logits, axis=1)
    pairs = [(a, b) for a in range(len(ids)) for b in range(len(ids)) if a != b]
    rows = np.array([a for a, _ in pairs], dtype=np.intp)
    cols = np.array([col[ids[b]] for _, b in pairs], dtype=np.intp)
    flat = T.reshape(logits, (logits.size,))
    picked = T.take(flat, rows * len(pool) + cols)
    per_pair = T.subtract(picked, T.take(lse, rows))
    return T.scale(T.sum(per_pair), -1.0 / len(ids))


def negsample_loss(u_i, v_c, v_negs) -> Tensor:
    """``-[log sigma(u_i . v_c) + sum_j log sigma(-u_i . v_j)]``."""
    u_i, v_c = _vec(u_i), _vec(v_c)
    if u_i.ndim != 1 or u_i.shape != v_c.shape:
        raise T.ShapeError(f"negsample_loss: dimension mismatch {u_i.shape} vs {v_c.shape}")
    loss = T.log_sigmoid(T.dot(u_i, v_c))
    if isinstance(v_negs, Tensor):
        negs = v_negs
    elif len(v_negs):
        negs = T.stack([_vec(x) for x in v_negs])
    else:
        negs = None
    if negs is not None and negs.size:
        if negs.ndim != 2 or negs.shape[1] != u_i.shape[0]:
            raise T.ShapeError(f"negsample_loss: negatives {negs.shape} vs dimension {u_i.shape[0]}")
        scores = T.matmul(negs, T.reshape(u_i, (u_i.shape[0], 1)))
        loss = T.add(loss, T.sum(T.log_sigmoid(T.scale(scores, -1.0))))
    return T.scale(loss, -1.0)


@dataclass
class PairBatch:
    """Ordered (input, context, set) triples with their negative lists."""

    inputs: list[str] = field(default_factory=list)
    contexts: list[str] = field(default_factory=list)
    set_ids: list[str] = field(default_factory=list)
    negatives: list[list[str]] = field(default_factory=list)
    set_sizes: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def k(self) -> int:
        return len(self.negatives[0]) if self.negatives else 0

    def validate(self, sets: Mapping[str, StyleSet]) -> None:
        for i, c, sid, negs in zip(self.inputs, self.contexts, self.set_ids, self.negatives):
            members = set(sets[sid].item_ids)
            if i == c or i not in members or c not in members:
                raise ValueError(f"pair ({i}, {c}) is not a pair of distinct members of set {sid!r}")
            if members & set(negs) or len(set(negs)) != len(negs):
                raise ValueError(f"negatives for ({i}, {c}) in {sid!r} overlap the set or repeat")

    def add_set(self, s: StyleSet, pool: Sequence[str], k: int, rng: np.random.Generator) -> None:
        """Append every pair of ``s``, drawing a fresh negative list per pair."""
        self.set_sizes[s.set_id] = len(s.item_ids)
        for i, c in set_pairs(s):
            self.inputs.append(i)
            self.contexts.append(c)
            self.set_ids.append(s.set_id)
            self.negatives.append(sample_negatives(pool, s, k, rng))


def build_pair_batch(sets: Sequence[StyleSet], pool: Sequence[str], k: int, rng: np.random.Generator) -> PairBatch:
    batch = PairBatch()
    for s in sets:
        batch.add_set(s, pool, k, rng)
    return batch


@dataclass
class Encoded:
    """Rows of an encoded batch addressed by item id."""

    ids: list[str]
    vectors: Tensor

    def __post_init__(self):
        self.row = {iid: n for n, iid in enumerate(self.ids)}
        if len(self.row) != len(self.ids) or self.vectors.shape[0] != len(self.ids):
            raise ValueError("Encoded: ids must be unique and match the vector rows")

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        try:
            return np.fromiter((self.row[i] for i in ids), dtype=np.intp, count=len(ids))
        except KeyError as exc:
            raise KeyError(f"no encoded vector for item {exc.args[0]!r}") from None


def set_loss_negsampled(u: Encoded, v: Encoded, batch: PairBatch) -> Tensor:
    """Negative-sampling loss summed over sets, each pair weighted by ``1/|S|``.

    Vectorized over every pair in ``batch``; equal to the weighted sum of
    :func:`negsample_loss` over the same pairs.
    """
    n = len(batch)
    if n == 0:
        raise ValueError("empty pair batch")
    k = batch.k
    if any(len(negs) != k for negs in batch.negatives):
        raise ValueError("every pair needs the same number of negatives")
    if u.vectors.shape[1] != v.vectors.shape[1]:
        raise T.ShapeError(f"set_loss_negsampled: dimension mismatch {u.vectors.shape} vs {v.vectors.shape}")
    dtype = u.vectors.dtype
    weights = np.array([1.0 / batch.set_sizes[sid] for sid in batch.set_ids], dtype=dtype)
    in_rows = u.rows(batch.inputs)
    ui = T.take(u.vectors, in_rows)
    vc = T.take(v.vectors, v.rows(batch.contexts))
    pos = T.log_sigmoid(T.dot(ui, vc))
    total = T.dot(pos, Tensor(weights, dtype=dtype))
    if k:
        neg_ids = [j for negs in batch.negatives for j in negs]
        ui_rep = T.take(u.vectors, np.repeat(in_rows, k))
        vn = T.take(v.vectors, v.rows(neg_ids))
        neg = T.log_sigmoid(T.scale(T.dot(ui_rep, vn), -1.0))
        total = T.add(total, T.dot(neg, Tensor(np.repeat(weights, k), dtype=dtype)))
    return T.scale(total, -1.0)
