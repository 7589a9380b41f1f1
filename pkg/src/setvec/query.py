"""Embedding extraction and read-only queries over the learned space."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import Corpus
from .encoder import EncoderParams, encode

METRICS = ("cosine", "dot", "euclidean")


class EmptyCandidatesError(ValueError):
    """No candidate rows remain after exclusion and category filtering."""


@dataclass(frozen=True)
class EmbeddingMatrix:
    """One embedding row per item, in ``ids`` order."""

    ids: tuple[str, ...]
    vectors: np.ndarray
    categories: tuple[str, ...]
    metric: str = "cosine"

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "categories", tuple(self.categories))
        if vec.ndim != 2 or vec.shape[0] != len(self.ids) or len(self.categories) != len(self.ids):
            raise ValueError(f"matrix shape {vec.shape} does not match {len(self.ids)} ids/categories")
        if not np.all(np.isfinite(vec)):
            raise ValueError("embedding matrix contains non-finite values")
        if self.metric not in METRICS:
            raise ValueError(f"metric must be one of {METRICS}, got {self.metric!r}")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("duplicate item ids in embedding matrix")
        vec.flags.writeable = False
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "_row", {iid: n for n, iid in enumerate(self.ids)})

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, item_id: str) -> bool:
        return item_id in self._row

    def row(self, item_id: str) -> int:
        try:
            return self._row[item_id]
        except KeyError:
            raise KeyError(f"item {item_id!r} is not in the embedding matrix") from None

    def vector(self, item_id: str) -> np.ndarray:
        return self.vectors[self.row(item_id)]

    def category(self, item_id: str) -> str:
        return self.categories[self.row(item_id)]

    def with_metric(self, metric: str) -> "EmbeddingMatrix":
        return EmbeddingMatrix(self.ids, self.vectors, self.categories, metric)


def extract_all(input_params: EncoderParams, corpus: Corpus, batch_size: int = 64, metric: str = "cosine") -> EmbeddingMatrix:
    """Embed every corpus item with the input network in inference mode."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    ids = corpus.item_ids
    dtype = input_params.tensors["proj.weight"].dtype
    rows = []
    for start in range(0, len(ids), batch_size):
        chunk = ids[start:start + batch_size]
        rows.append(encode(input_params, corpus.images(chunk, dtype=dtype), train_mode=False).data)
    vecs = np.concatenate(rows) if rows else np.zeros((0, input_params.config.embedding_dim))
    return EmbeddingMatrix(ids, vecs, [corpus.category_of(i) for i in ids], metric)


def scores(query_vector, matrix: EmbeddingMatrix) -> np.ndarray:
    """Similarity (cosine, dot) or distance (euclidean) of each row to the query."""
    q = np.asarray(query_vector, dtype=np.float64)
    if q.shape != (matrix.dim,):
        raise ValueError(f"query has shape {q.shape}, expected ({matrix.dim},)")
    M = matrix.vectors
    if matrix.metric == "dot":
        return M @ q
    if matrix.metric == "euclidean":
        return np.sqrt(np.sum((M - q) ** 2, axis=1))
    norms = np.linalg.norm(M, axis=1) * np.linalg.norm(q)
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = (M @ q) / norms
    return np.where(norms > 0, sim, 0.0)


def nearest(
    query_vector,
    matrix: EmbeddingMatrix,
    top_n: int = 10,
    exclude: Iterable[str] = (),
    category_filter: str | None = None,
) -> list[tuple[str, float]]:
    """Best ``top_n`` rows for the query, ties broken by ascending item id."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    s = scores(query_vector, matrix)
    excluded = set(exclude)
    keep = np.array([
        iid not in excluded and (category_filter is None or cat == category_filter)
        for iid, cat in zip(matrix.ids, matrix.categories)
    ], dtype=bool)
    if not keep.any():
        raise EmptyCandidatesError("no candidates left after exclusion/filtering")
    cand = np.flatnonzero(keep)
    key = s[cand] if matrix.metric == "euclidean" else -s[cand]
    ids = np.array(matrix.ids, dtype=object)[cand]
    order = sorted(range(len(cand)), key=lambda n: (key[n], ids[n]))[:top_n]
    return [(str(ids[n]), float(s[cand[n]])) for n in order]


@dataclass(frozen=True)
class AnalogyQuestion:
    """"x is to y as z is to ?" with x, y in different categories and z sharing x's."""

    x: str
    y: str
    z: str
    expected_category: str
    expected: tuple[tuple[str, str], ...] = ()

    def expected_factors(self) -> dict[str, str]:
        return dict(self.expected)


@dataclass(frozen=True)
class AnalogyResult:
    answer: str
    answer_category: str
    ranking: list[tuple[str, str, float]]


def analogy(
    question: AnalogyQuestion,
    matrix: EmbeddingMatrix,
    top_n: int = 10,
    category_filter: bool = False,
) -> AnalogyResult:
    """Answer with the item nearest to ``u_y - u_x + u_z``.

    The three query items are never candidates. With ``category_filter`` the
    candidates are restricted to y's category; otherwise the caller decides
    what a cross-category answer means.
    """
    for iid in (question.x, question.y, question.z):
        if iid not in matrix:
            raise KeyError(f"analogy item {iid!r} is not in the embedding matrix")
    target = matrix.vector(question.y) - matrix.vector(question.x) + matrix.vector(question.z)
    ranked = nearest(
        target, matrix, top_n, exclude={question.x, question.y, question.z},
        category_filter=matrix.category(question.y) if category_filter else None,
    )
    ranking = [(iid, matrix.category(iid), sc) for iid, sc in ranked]
    return AnalogyResult(ranking[0][0], ranking[0][1], ranking)


def project_2d(matrix: EmbeddingMatrix | np.ndarray) -> np.ndarray:
    """Mean-centred projection onto the top two principal directions.

    Each direction's sign is fixed so that its largest-magnitude loading is
    positive.
    """
    X = matrix.vectors if isinstance(matrix, EmbeddingMatrix) else np.asarray(matrix, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3:
        raise ValueError(f"need at least 3 rows to project, got shape {X.shape}")
    components, _ = principal_axes(X, 2)
    return (X - X.mean(axis=0)) @ components.T


def principal_axes(X: np.ndarray, n_components: int) -> tuple[np.ndarray, np.ndarray]:
    """Top principal directions (rows) and their variances, sign-normalized."""
    Xc = X - X.mean(axis=0)
    _, sv, vt = np.linalg.svd(Xc, full_matrices=False)
    tol = max(Xc.shape) * np.finfo(float).eps * (sv[0] if sv.size else 0.0)
    rank = int(np.sum(sv > tol))
    if rank < n_components:
        raise ValueError(f"matrix has rank {rank} after centring; need at least {n_components}")
    comps = vt[:n_components].copy()
    for k in range(n_components):
        if comps[k, np.argmax(np.abs(comps[k]))] < 0:
            comps[k] = -comps[k]
    return comps, sv[:n_components] ** 2 / max(X.shape[0] - 1, 1)


# --------------------------------------------------------------------------
# TSV exports


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        head = ["item_id", "category"] + [f"v{j}" for j in range(matrix.dim)]
        fh.write("\t".join(head) + "\n")
        for iid, cat, row in zip(matrix.ids, matrix.categories, matrix.vectors):
            fh.write("\t".join([iid, cat] + [repr(float(x)) for x in row]) + "\n")


def read_embeddings(path, metric: str = "cosine") -> EmbeddingMatrix:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["item_id", "category"]:
            raise ValueError(f"{path}: header must start with item_id<TAB>category")
        ids, cats, rows = [], [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(parts)}")
            ids.append(parts[0])
            cats.append(parts[1])
            rows.append([float(x) for x in parts[2:]])
    vecs = np.array(rows, dtype=np.float64).reshape(len(rows), len(header) - 2)
    return EmbeddingMatrix(ids, vecs, cats, metric)


def write_projection(ids: Sequence[str], coords: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("item_id\tx\ty\n")
        for iid, (x, y) in zip(ids, coords):
            fh.write(f"{iid}\t{float(x)!r}\t{float(y)!r}\n")
