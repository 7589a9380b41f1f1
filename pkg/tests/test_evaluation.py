import json

import numpy as np
import pytest

from setvec.corpus import Factors, StyleSet, gen_synthetic
from setvec.encoder import EncoderConfig
from setvec.estimators import MLPStyleClassifier
from setvec.evaluation import (
    AnalogySuite,
    ClassMissingError,
    LabeledSetDataset,
    compare_set_vs_pairwise,
    generate_analogy_suite,
    onehot_factor_matrix,
    read_suite,
    run_analogy_suite,
    set_feature,
    stratified_split,
    style_margin,
    train_classifier,
    write_report,
    write_suite,
)
from setvec.query import AnalogyQuestion, EmbeddingMatrix
from setvec.trainer import TrainConfig

from conftest import tiny_spec


@pytest.fixture(scope="module")
def labeled(tmp_path_factory):
    spec = tiny_spec(n_styles=4, categories=("top", "bottom", "shoes"), n_sets=100, n_labeled_sets=1000,
                     set_size_distribution=(0.4, 0.6, 0.0))
    return gen_synthetic(spec, tmp_path_factory.mktemp("labeled"))


# analogy suites

def test_empty_suite_reports_zero_questions():
    rep = run_analogy_suite(AnalogySuite([]), EmbeddingMatrix(["a"], np.ones((1, 2)), ["t"]))
    assert rep.n_questions == 0 and rep.accuracy is None
    assert rep.to_dict()["accuracy"] is None


@pytest.mark.parametrize("factor", ["style", "color", "pattern"])
def test_onehot_oracle_scores_perfectly(small, factor):
    suite = generate_analogy_suite(small.corpus, small.factors, 50, seed=1, factor=factor)
    assert len(suite) == 50
    oracle = onehot_factor_matrix(small.corpus, small.factors, (factor,))
    rep = run_analogy_suite(suite, oracle, small.factors)
    assert rep.accuracy == 1.0 and rep.n_failed_category == 0


def test_forced_answer_harness():
    # y's category holds exactly one item with the transferred value
    ids = ["x", "y", "z", "ans", "other"]
    cats = ["top", "bottom", "top", "bottom", "bottom"]
    fac = {"x": Factors("s0", "red", "solid"), "y": Factors("s0", "red", "solid"),
           "z": Factors("s1", "blue", "solid"), "ans": Factors("s1", "blue", "dot"),
           "other": Factors("s0", "red", "dot")}

    class _C:
        item_ids = ids

        def category_of(self, i):
            return cats[ids.index(i)]

    M = onehot_factor_matrix(_C(), fac, ("style",))
    suite = AnalogySuite([AnalogyQuestion("x", "y", "z", "bottom", (("style", "s1"),))])
    rep = run_analogy_suite(suite, M, fac)
    assert rep.accuracy == 1.0 and rep.per_question[0]["answer"] == "ans"


def test_suite_questions_follow_construction(small):
    suite = generate_analogy_suite(small.corpus, small.factors, 30, seed=2)
    set_members = [set(s.item_ids) for s in small.corpus.sets]
    for q in suite.questions:
        assert any({q.x, q.y} <= m for m in set_members)
        c = small.corpus.category_of
        assert c(q.x) != c(q.y) and c(q.z) == c(q.x) and q.expected_category == c(q.y)
        assert small.factors[q.x].style == small.factors[q.y].style != small.factors[q.z].style
        assert dict(q.expected)["style"] == small.factors[q.z].style


def test_category_failures_are_counted(small):
    suite = generate_analogy_suite(small.corpus, small.factors, 20, seed=3)
    # a space that only encodes style ignores category entirely
    M = onehot_factor_matrix(small.corpus, small.factors, ("style",))
    style_only = EmbeddingMatrix(M.ids, M.vectors[:, len(small.corpus.category_set):], M.categories)
    rep = run_analogy_suite(suite, style_only, small.factors)
    assert rep.n_failed_category > 0
    assert rep.n_accepted + rep.n_failed_category <= rep.n_questions
    filtered = run_analogy_suite(suite, style_only, small.factors, category_filter=True)
    assert filtered.n_failed_category == 0


def test_category_mode_and_missing_factors(small):
    suite = generate_analogy_suite(small.corpus, small.factors, 10, seed=4)
    M = onehot_factor_matrix(small.corpus, small.factors)
    with pytest.raises(ValueError):
        run_analogy_suite(suite, M)
    suite.mode = "category"
    assert run_analogy_suite(suite, M).accuracy == 1.0
    with pytest.raises(ValueError):
        AnalogySuite([], mode="human")


def test_scoring_is_reproducible(small):
    suite = generate_analogy_suite(small.corpus, small.factors, 25, seed=5)
    M = onehot_factor_matrix(small.corpus, small.factors, ("color",))
    a = run_analogy_suite(suite, M, small.factors).to_dict()
    b = run_analogy_suite(suite, M, small.factors).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_suite_file_round_trip(small, tmp_path):
    suite = generate_analogy_suite(small.corpus, small.factors, 12, seed=6, factor="color")
    write_suite(suite, tmp_path / "s.tsv")
    back = read_suite(tmp_path / "s.tsv")
    assert back.questions == suite.questions and back.mode == suite.mode


def test_report_keys(small, tmp_path):
    suite = generate_analogy_suite(small.corpus, small.factors, 5, seed=7)
    rep = run_analogy_suite(suite, onehot_factor_matrix(small.corpus, small.factors), small.factors)
    write_report(rep, tmp_path / "r.json")
    data = json.loads((tmp_path / "r.json").read_text())
    assert {"accuracy", "n_questions", "n_failed_category", "per_question"} <= set(data)
    assert len(data["per_question"]) == 5


def test_style_margin_on_oracle(small):
    intra, inter = style_margin(onehot_factor_matrix(small.corpus, small.factors), small.factors)
    assert intra > inter


# set features and classification

def _mat(rows):
    return EmbeddingMatrix([f"r{n}" for n in range(len(rows))], np.asarray(rows, dtype=float), ["t"] * len(rows))


def test_set_feature_examples(rng):
    M = _mat([[1.0, 2.0], [1.0, 2.0], [1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(set_feature(["r0", "r1"], M), [1.0, 2.0])
    np.testing.assert_array_equal(set_feature(StyleSet("s", ("r2", "r3")), M), [0.5, 0.5])
    R = _mat(rng.standard_normal((4, 6)))
    ids = ["r0", "r1", "r2", "r3"]
    want = (R.vectors[0] + R.vectors[1] + R.vectors[2] + R.vectors[3]) / 4
    np.testing.assert_allclose(set_feature(ids, R), want, atol=1e-12)
    np.testing.assert_allclose(set_feature(ids[::-1], R), set_feature(ids, R), atol=1e-15)


def test_separable_features_classified_perfectly():
    rng = np.random.default_rng(0)
    n = 200
    labels = ["pos" if k % 2 else "neg" for k in range(n)]
    # disjoint half-spaces with margin >= 1 along the first axis
    rows = [[(1.0 + rng.uniform(0, 2)) * (1 if lab == "pos" else -1), rng.standard_normal()] for lab in labels]
    M = EmbeddingMatrix([f"r{n}" for n in range(n)], np.array(rows), ["t"] * n)
    ds = LabeledSetDataset([StyleSet(f"S{k}", (f"r{k}",)) for k in range(n)], labels)
    _, acc = train_classifier(ds, M, seed=0)
    assert acc == 1.0


def test_shuffled_labels_near_chance(labeled):
    M = onehot_factor_matrix(labeled.corpus, labeled.factors, ("style", "color", "pattern"))
    ds = LabeledSetDataset(labeled.labeled_sets, labeled.labels)
    for seed in range(10):
        _, acc = train_classifier(ds, M, seed=seed, shuffle_labels=True)
        assert 0.15 <= acc <= 0.35, (seed, acc)


def test_true_labels_learned(labeled):
    M = onehot_factor_matrix(labeled.corpus, labeled.factors, ("color",))
    _, acc = train_classifier(LabeledSetDataset(labeled.labeled_sets, labeled.labels), M, seed=0)
    assert acc >= 0.95


def test_stratified_split_proportions():
    labels = ["a"] * 37 + ["b"] * 50 + ["c"] * 13
    tr, te = stratified_split(labels, 0.9, seed=3)
    assert sorted(np.concatenate([tr, te]).tolist()) == list(range(100))
    assert not set(tr) & set(te)
    lab = np.array(labels)
    for cls, n in (("a", 37), ("b", 50), ("c", 13)):
        assert abs(np.sum(lab[tr] == cls) - 0.9 * n) <= 1


def test_classifier_errors():
    M = _mat(np.eye(3))
    sets = [StyleSet(f"S{k}", (f"r{k}",)) for k in range(3)]
    with pytest.raises(ClassMissingError):
        train_classifier(LabeledSetDataset(sets, ["a", "a", "a"]), M)
    with pytest.raises(ValueError):
        LabeledSetDataset(sets, ["a"])
    with pytest.raises(ValueError):
        LabeledSetDataset(sets, ["a", "b", "a"], train_fraction=1.0)


def test_mlp_probabilities_sum_to_one(rng):
    X = rng.standard_normal((60, 5))
    y = np.array(["a", "b", "c"] * 20)
    clf = MLPStyleClassifier(epochs=20).fit(X, y)
    P = clf.predict_proba(rng.standard_normal((30, 5)) * 10)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-9)
    assert set(clf.predict(X)) <= {"a", "b", "c"}


# ablation

def test_ablation_on_pair_only_corpus_has_zero_delta(tmp_path):
    out = gen_synthetic(tiny_spec(n_styles=4, n_sets=30, n_labeled_sets=80), tmp_path)
    ds = LabeledSetDataset(out.labeled_sets, out.labels)
    enc = EncoderConfig(input_shape=(3, 8, 8), conv_stages=((4, 1),), embedding_dim=8)
    rep = compare_set_vs_pairwise(out.corpus, ds, TrainConfig(epochs=1, batch_size=8, k=3), enc,
                                  {"epochs": 50}, seed=0)
    assert rep.set_acc == rep.pair_acc and rep.delta == 0.0
    assert set(rep.to_dict()) == {"set_acc", "pair_acc", "delta"}
