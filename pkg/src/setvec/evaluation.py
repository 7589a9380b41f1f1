"""Scoring the learned space: analogy suites, clustering margin and style classification."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .corpus import Corpus, Factors, StyleSet, pairwise_transform
from .encoder import EncoderConfig
from .estimators import MLPStyleClassifier
from .query import AnalogyQuestion, EmbeddingMatrix, analogy, extract_all
from .trainer import TrainConfig, train

FACTOR_MODE = "factor"
CATEGORY_MODE = "category"


# --------------------------------------------------------------------------
# analogy suites


@dataclass
class AnalogySuite:
    questions: list[AnalogyQuestion]
    mode: str = FACTOR_MODE

    def __post_init__(self):
        if self.mode not in (FACTOR_MODE, CATEGORY_MODE):
            raise ValueError(f"mode must be {FACTOR_MODE!r} or {CATEGORY_MODE!r}, got {self.mode!r}")

    def __len__(self) -> int:
        return len(self.questions)


def generate_analogy_suite(
    corpus: Corpus,
    factors: Mapping[str, Factors],
    n_questions: int,
    seed: int = 0,
    factor: str = "style",
    max_tries: int = 100_000,
) -> AnalogySuite:
    """Build factor-transfer questions from the corpus' style sets.

    x and y come from one set, lie in different categories and share the
    value of ``factor``; z is drawn from x's category with a different value.
    Under additive structure the target ``u_y - u_x + u_z`` keeps y's
    category and takes z's value of ``factor``, which is what a correct
    answer must show.
    """
    rng = np.random.default_rng(seed)
    by_category: dict[str, list[str]] = {}
    for it in corpus.items:
        by_category.setdefault(it.category, []).append(it.id)
    questions: list[AnalogyQuestion] = []
    tries = 0
    while len(questions) < n_questions:
        tries += 1
        if tries > max_tries or not corpus.sets:
            raise ValueError(f"could only build {len(questions)} of {n_questions} questions")
        s = corpus.sets[int(rng.integers(len(corpus.sets)))]
        a, b = rng.choice(len(s.item_ids), size=2, replace=False)
        x, y = s.item_ids[int(a)], s.item_ids[int(b)]
        fx = factors[x].get(factor)
        if factors[y].get(factor) != fx:
            continue
        cat_x, cat_y = corpus.category_of(x), corpus.category_of(y)
        pool = [i for i in by_category[cat_x] if factors[i].get(factor) != fx]
        if not pool:
            continue
        z = pool[int(rng.integers(len(pool)))]
        want = factors[z].get(factor)
        reachable = any(
            factors[i].get(factor) == want and i not in (x, y, z) for i in by_category[cat_y]
        )
        if not reachable:
            continue
        questions.append(AnalogyQuestion(x, y, z, cat_y, ((factor, want),)))
    return AnalogySuite(questions, FACTOR_MODE)


def write_suite(suite: AnalogySuite, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# mode={suite.mode}\n")
        fh.write("x\ty\tz\texpected_category\texpected\n")
        for q in suite.questions:
            exp = ";".join(f"{k}={v}" for k, v in q.expected)
            fh.write(f"{q.x}\t{q.y}\t{q.z}\t{q.expected_category}\t{exp}\n")


def read_suite(path) -> AnalogySuite:
    mode = FACTOR_MODE
    questions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("# mode="):
                mode = line[len("# mode="):].strip()
                continue
            if line.startswith("x\ty\t"):
                continue
            parts = line.split("\t")
            if len(parts) not in (4, 5):
                raise ValueError(f"{path}:{lineno}: expected x<TAB>y<TAB>z<TAB>expected_category[<TAB>expected]")
            exp = ()
            if len(parts) == 5 and parts[4]:
                exp = tuple(tuple(kv.split("=", 1)) for kv in parts[4].split(";"))
            questions.append(AnalogyQuestion(parts[0], parts[1], parts[2], parts[3], exp))
    return AnalogySuite(questions, mode)


@dataclass
class AnalogyReport:
    n_questions: int
    n_accepted: int
    n_failed_category: int
    per_question: list[dict] = field(default_factory=list)

    @property
    def accuracy(self) -> float | None:
        return self.n_accepted / self.n_questions if self.n_questions else None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "n_questions": self.n_questions,
            "n_accepted": self.n_accepted,
            "n_failed_category": self.n_failed_category,
            "per_question": self.per_question,
        }


def run_analogy_suite(
    suite: AnalogySuite,
    matrix: EmbeddingMatrix,
    factors: Mapping[str, Factors] | None = None,
    category_filter: bool = False,
) -> AnalogyReport:
    """Answer every question; a cross-category answer always fails.

    In factor mode the answer must also match each expected sidecar factor.
    """
    if suite.mode == FACTOR_MODE and factors is None and suite.questions:
        raise ValueError("factor-mode scoring needs the sidecar factors")
    accepted = failed_cat = 0
    rows = []
    for n, q in enumerate(suite.questions):
        res = analogy(q, matrix, top_n=5, category_filter=category_filter)
        outcome, reason = "accepted", ""
        if res.answer_category != q.expected_category:
            outcome, reason = "failed", "category"
            failed_cat += 1
        elif suite.mode == FACTOR_MODE:
            got = factors[res.answer]
            wrong = [k for k, v in q.expected if got.get(k) != v]
            if wrong:
                outcome, reason = "rejected", "factor:" + ",".join(wrong)
        if outcome == "accepted":
            accepted += 1
        rows.append({
            "index": n, "x": q.x, "y": q.y, "z": q.z, "answer": res.answer,
            "answer_category": res.answer_category, "score": res.ranking[0][2],
            "outcome": outcome, "reason": reason,
        })
    return AnalogyReport(len(suite.questions), accepted, failed_cat, rows)


def onehot_factor_matrix(corpus: Corpus, factors: Mapping[str, Factors], fields: Sequence[str] = ("style",)) -> EmbeddingMatrix:
    """Oracle embeddings: one-hot category concatenated with one-hot factor values."""
    blocks = [[corpus.category_of(i) for i in corpus.item_ids]]
    for f in fields:
        blocks.append([factors[i].get(f) for i in corpus.item_ids])
    cols = []
    for values in blocks:
        levels = sorted(set(values))
        onehot = np.zeros((len(values), len(levels)))
        onehot[np.arange(len(values)), [levels.index(v) for v in values]] = 1.0
        cols.append(onehot)
    return EmbeddingMatrix(corpus.item_ids, np.hstack(cols), blocks[0])


# --------------------------------------------------------------------------
# clustering


def style_margin(matrix: EmbeddingMatrix, factors: Mapping[str, Factors], factor: str = "style") -> tuple[float, float]:
    """Mean cosine similarity over same-style and different-style item pairs."""
    X = matrix.vectors
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    Xn = X / np.where(norms > 0, norms, 1.0)
    sim = Xn @ Xn.T
    labels = np.array([factors[i].get(factor) for i in matrix.ids])
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    return float(sim[same & off].mean()), float(sim[~same].mean())


# --------------------------------------------------------------------------
# style classification


def set_feature(s: StyleSet | Sequence[str], matrix: EmbeddingMatrix) -> np.ndarray:
    """Mean of the member items' embeddings."""
    ids = s.item_ids if isinstance(s, StyleSet) else s
    if not ids:
        raise ValueError("empty set")
    return np.mean([matrix.vector(i) for i in ids], axis=0)


@dataclass
class LabeledSetDataset:
    sets: list[StyleSet]
    labels: list[str]
    train_fraction: float = 0.9

    def __post_init__(self):
        if len(self.sets) != len(self.labels):
            raise ValueError("sets and labels differ in length")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must lie in (0, 1)")

    def features(self, matrix: EmbeddingMatrix) -> np.ndarray:
        return np.stack([set_feature(s, matrix) for s in self.sets])


def stratified_split(labels: Sequence[str], train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded per-class split; each class keeps ``round(fraction * n_class)`` rows for training."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(len(idx))]
        n_train = min(max(int(round(train_fraction * len(idx))), 1), len(idx))
        train_idx.append(idx[:n_train])
        test_idx.append(idx[n_train:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


class ClassMissingError(ValueError):
    pass


def train_classifier(
    dataset: LabeledSetDataset,
    matrix: EmbeddingMatrix,
    mlp_config: Mapping | None = None,
    seed: int = 0,
    shuffle_labels: bool = False,
) -> tuple[MLPStyleClassifier, float]:
    """Fit the MLP on set features of the training split and score the rest.

    With ``shuffle_labels`` the labels are permuted (seeded) before splitting,
    which gives a chance-level reference.
    """
    labels = np.asarray(dataset.labels)
    if shuffle_labels:
        labels = labels[np.random.default_rng([seed, 7]).permutation(len(labels))]
    classes = sorted(set(labels.tolist()))
    if len(classes) < 2:
        raise ClassMissingError("need at least two classes")
    tr, te = stratified_split(labels, dataset.train_fraction, seed)
    missing = set(classes) - set(labels[tr].tolist())
    if missing:
        raise ClassMissingError(f"classes absent from the training split: {sorted(missing)}")
    X = dataset.features(matrix)
    clf = MLPStyleClassifier(**{"seed": seed, **dict(mlp_config or {})})
    clf.fit(X[tr], labels[tr])
    acc = float(np.mean(clf.predict(X[te]) == labels[te])) if len(te) else float("nan")
    return clf, acc


@dataclass
class AblationReport:
    set_acc: float
    pair_acc: float

    @property
    def delta(self) -> float:
        return self.set_acc - self.pair_acc

    def to_dict(self) -> dict:
        return {"set_acc": self.set_acc, "pair_acc": self.pair_acc, "delta": self.delta}


def compare_set_vs_pairwise(
    corpus: Corpus,
    dataset: LabeledSetDataset,
    train_config: TrainConfig | None = None,
    encoder_config: EncoderConfig | None = None,
    mlp_config: Mapping | None = None,
    seed: int = 0,
) -> AblationReport:
    """Train on the sets and on their pairwise expansion with identical settings, then classify."""
    accs = []
    for c in (corpus, pairwise_transform(corpus)):
        ckpt = train(c, train_config, encoder_config).checkpoint
        matrix = extract_all(ckpt.input_params, c)
        accs.append(train_classifier(dataset, matrix, mlp_config, seed)[1])
    return AblationReport(*accs)


def write_report(report, path) -> None:
    data = report.to_dict() if hasattr(report, "to_dict") else dict(report)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")
