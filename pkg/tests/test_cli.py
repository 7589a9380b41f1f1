import filecmp
import json
import subprocess
import sys

import pytest

from setvec.cli import main

GEN = ["gen-corpus", "--styles", "4", "--items-per-cell", "5", "--sets", "40", "--labeled-sets", "80",
       "--image-size", "16"]
TRAIN_FLAGS = ["--epochs", "1", "--stages", "4x1,8x1", "--dim", "8", "--batch-size", "8", "--k", "3"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "7", *GEN, "--out", str(d / "corpus")]) == 0
    assert main(["--seed", "1", "train", "--corpus", str(d / "corpus"), "--out", str(d / "run"), *TRAIN_FLAGS]) == 0
    return d


def test_gen_corpus_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["--seed", "7", *GEN, "--out", str(tmp_path / name)]) == 0
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    # the manifests differ only in the recorded output path
    assert cmp.diff_files == ["run_manifest.json"] and not cmp.left_only and not cmp.right_only
    for sub in cmp.subdirs.values():
        assert not sub.diff_files


def test_default_generator_flags(tmp_path):
    assert main(["--seed", "7", "gen-corpus", "--styles", "4", "--sets", "500", "--out", str(tmp_path / "d")]) == 0
    assert len((tmp_path / "d" / "items.tsv").read_text().splitlines()) == 240
    assert len((tmp_path / "d" / "sets.tsv").read_text().splitlines()) == 500


def test_usage_errors(capsys):
    assert main(["gen-corpus"]) == 2
    assert main([]) == 2
    assert main(["no-such-command"]) == 2
    assert main(["train", "--corpus", "x", "--out", "y", "-e", "3"]) == 2


def test_zero_sets(tmp_path):
    assert main([*GEN[:-6], "--sets", "0", "--out", str(tmp_path / "z")]) == 0
    assert (tmp_path / "z" / "sets.tsv").read_text() == ""


def test_train_outputs(workdir):
    run = workdir / "run"
    assert (run / "final.sv2c").exists()
    lines = (run / "loss.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,loss" and len(lines) == 1 + 5
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["subcommand"] == "train" and manifest["seed"] == 1
    assert manifest["config"]["epochs"] == 1 and manifest["config"]["lr"] == 1e-3
    assert "version" in manifest


def test_train_zero_epochs(workdir, tmp_path):
    assert main(["train", "--corpus", str(workdir / "corpus"), "--out", str(tmp_path), "--epochs", "0",
                 "--stages", "4x1", "--dim", "4"]) == 0
    assert (tmp_path / "loss.csv").read_text() == "step,epoch,loss\n"


def test_train_insufficient_pool(workdir, tmp_path, capsys):
    code = main(["train", "--corpus", str(workdir / "corpus"), "--out", str(tmp_path), "--k", "500"])
    assert code == 2
    assert "insufficient" in capsys.readouterr().err


def test_missing_checkpoint_is_runtime_failure(workdir, tmp_path):
    assert main(["embed", "--corpus", str(workdir / "corpus"), "--checkpoint", str(tmp_path / "none.sv2c"),
                 "--out", str(tmp_path / "m.tsv")]) == 3


def test_embed_query_project(workdir, tmp_path, capsys):
    m = tmp_path / "m.tsv"
    assert main(["embed", "--corpus", str(workdir / "corpus"), "--checkpoint", str(workdir / "run" / "final.sv2c"),
                 "--out", str(m)]) == 0
    assert (tmp_path / "m.tsv.manifest.json").exists()
    capsys.readouterr()
    assert main(["query", "--matrix", str(m), "--item", "i00007", "--top", "5"]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0] == "rank\titem_id\tcategory\tscore" and len(rows) == 6
    assert rows[1].split("\t")[:2] == ["1", "i00007"]
    assert main(["project", "--matrix", str(m), "--out", str(tmp_path / "p.tsv")]) == 0
    assert len((tmp_path / "p.tsv").read_text().splitlines()) == 61


def test_analogy_oracle_harness(workdir, tmp_path):
    oracle = tmp_path / "oh.tsv"
    assert main(["embed", "--corpus", str(workdir / "corpus"), "--onehot-oracle", "--out", str(oracle)]) == 0
    gen_report = tmp_path / "gen.json"
    assert main(["analogy", "--matrix", str(oracle), "--corpus", str(workdir / "corpus"), "--report", str(gen_report)]) == 0
    suite = tmp_path / "gen.json.suite.tsv"
    report = tmp_path / "r.json"
    assert main(["analogy", "--suite", str(suite), "--matrix", str(oracle), "--report", str(report),
                 "--factors", str(workdir / "corpus" / "factors.tsv")]) == 0
    data = json.loads(report.read_text())
    assert data["accuracy"] == 1.0 and data["n_questions"] == 50


def test_classify(workdir, tmp_path):
    oracle = tmp_path / "oh.tsv"
    main(["embed", "--corpus", str(workdir / "corpus"), "--onehot-oracle", "--out", str(oracle)])
    assert main(["classify", "--matrix", str(oracle), "--labeled", str(workdir / "corpus" / "labeled_sets.tsv"),
                 "--report", str(tmp_path / "c.json")]) == 0
    assert json.loads((tmp_path / "c.json").read_text())["accuracy"] == 1.0


def test_ablate_pair_only_corpus(tmp_path):
    assert main(["--seed", "3", *GEN[:-6], "--sets", "30", "--set-sizes", "1,0,0", "--labeled-sets", "80",
                 "--image-size", "16", "--out", str(tmp_path / "pc")]) == 0
    assert main(["ablate", "--corpus", str(tmp_path / "pc"), "--report", str(tmp_path / "ab.json"),
                 "--epochs", "1", "--stages", "4x1", "--dim", "8", "--k", "3"]) == 0
    data = json.loads((tmp_path / "ab.json").read_text())
    assert data["delta"] == 0.0 and data["set_acc"] == data["pair_acc"]


def test_replay_reproduces_outputs(workdir, tmp_path):
    out = tmp_path / "r1"
    args = ["--seed", "4", "train", "--corpus", str(workdir / "corpus"), "--out", str(out), *TRAIN_FLAGS]
    assert main(args) == 0
    first = (out / "final.sv2c").read_bytes(), (out / "loss.csv").read_bytes()
    (out / "final.sv2c").unlink()
    assert main(["--replay", str(out / "run_manifest.json")]) == 0
    assert ((out / "final.sv2c").read_bytes(), (out / "loss.csv").read_bytes()) == first


def test_threads_env_default(monkeypatch):
    from setvec.cli import build_parser

    monkeypatch.setenv("SETVEC_THREADS", "3")
    assert build_parser().parse_args(["project", "--matrix", "a", "--out", "b"]).threads == 3


def test_console_script():
    proc = subprocess.run([sys.executable, "-m", "setvec.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("setvec ")
