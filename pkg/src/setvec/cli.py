"""Command-line entry point: ``setvec <subcommand> [--flags]``.

Exit codes: 0 success, 2 validation or usage error, 3 runtime failure.
Every subcommand writes a run manifest next to its output;
``setvec --replay MANIFEST`` re-executes the recorded invocation.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .corpus import (
    SyntheticSpec,
    gen_synthetic,
    load_corpus_dir,
    read_labeled_sets,
    read_sidecar,
)
from .encoder import EncoderConfig
from .evaluation import (
    LabeledSetDataset,
    compare_set_vs_pairwise,
    generate_analogy_suite,
    onehot_factor_matrix,
    read_suite,
    run_analogy_suite,
    train_classifier,
    write_report,
    write_suite,
)
from .query import extract_all, nearest, project_2d, read_embeddings, write_embeddings, write_projection
from .trainer import TrainConfig, load_checkpoint, save_checkpoint, train, write_loss_log

logger = logging.getLogger("setvec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class UsageError(ValueError):
    pass


def _parse_stages(text: str) -> tuple[tuple[int, int], ...]:
    try:
        stages = []
        for part in text.split(","):
            ch, _, count = part.strip().partition("x")
            stages.append((int(ch), int(count or 1)))
        return tuple(stages)
    except ValueError:
        raise argparse.ArgumentTypeError(f"stages must look like 16x2,32x2,64x2, got {text!r}") from None


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d, e = TrainConfig(), EncoderConfig()
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="style sets per batch")
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--beta1", type=float, default=d.beta1)
    p.add_argument("--beta2", type=float, default=d.beta2)
    p.add_argument("--adam-eps", type=float, default=d.eps)
    p.add_argument("--k", type=int, default=d.k, help="negatives per (input, context) pair")
    p.add_argument("--dim", type=int, default=e.embedding_dim)
    p.add_argument("--stages", type=_parse_stages, default=e.conv_stages, help="e.g. 16x2,32x2,64x2")
    p.add_argument("--no-batch-norm", action="store_true")
    p.add_argument("--dtype", choices=("float32", "float64"), default=d.dtype)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setvec", description=__doc__.splitlines()[0], allow_abbrev=False)
    parser.add_argument("--version", action="version", version=f"setvec {__version__}")
    parser.add_argument("--replay", metavar="MANIFEST", help="re-run the invocation recorded in a run manifest")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=int(os.environ.get("SETVEC_THREADS", "1")))
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-corpus", help="render a synthetic style-set corpus")
    s = SyntheticSpec()
    p.add_argument("--out", required=True)
    p.add_argument("--styles", type=int, default=s.n_styles)
    p.add_argument("--categories", default=",".join(s.categories))
    p.add_argument("--items-per-cell", type=int, default=s.n_items_per_category_per_style,
                   help="items per (style, category)")
    p.add_argument("--sets", type=int, default=s.n_sets)
    p.add_argument("--labeled-sets", type=int, default=s.n_labeled_sets)
    p.add_argument("--image-size", type=int, default=s.image_shape[1])
    p.add_argument("--set-sizes", type=_floats, default=s.set_size_distribution,
                   help="weights for set sizes 2,3,4")
    p.add_argument("--popularity", type=float, default=s.popularity_exponent,
                   help="item reuse skew within a style/category cell (0 = uniform)")

    p = sub.add_parser("train", help="train the input and context encoders")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--checkpoint-interval", type=int, default=0)
    _add_train_flags(p)

    p = sub.add_parser("embed", help="export item embeddings as TSV")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--onehot-oracle", action="store_true",
                     help="one-hot (category, style) vectors from the corpus sidecar")
    p.add_argument("--batch-size", type=int, default=64)

    p = sub.add_parser("query", help="nearest neighbours of an item or vector")
    p.add_argument("--matrix", required=True)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--item")
    target.add_argument("--vector", type=_floats)
    p.add_argument("--top", type=int, default=5)
    p.add_argument("--metric", choices=("cosine", "dot", "euclidean"), default="cosine")
    p.add_argument("--category")
    p.add_argument("--exclude", default="", help="comma-separated item ids")
    p.add_argument("--out", help="TSV output (stdout when omitted)")

    p = sub.add_parser("analogy", help="score an analogy suite")
    p.add_argument("--matrix", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--suite", help="suite TSV; generated from --corpus when omitted")
    p.add_argument("--corpus")
    p.add_argument("--factors", help="sidecar TSV (default: <corpus>/factors.tsv)")
    p.add_argument("--questions", type=int, default=50)
    p.add_argument("--factor", choices=("style", "color", "pattern"), default="style")
    p.add_argument("--mode", choices=("factor", "category"), default=None)
    p.add_argument("--metric", choices=("cosine", "dot", "euclidean"), default="cosine")
    p.add_argument("--category-filter", action="store_true", help="restrict candidates to y's category")

    p = sub.add_parser("classify", help="style classification from averaged set vectors")
    p.add_argument("--matrix", required=True)
    p.add_argument("--labeled", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--train-fraction", type=float, default=0.9)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--mlp-epochs", type=int, default=300)
    p.add_argument("--shuffle-labels", action="store_true")

    p = sub.add_parser("ablate", help="set-trained vs pairwise-trained classification accuracy")
    p.add_argument("--corpus", required=True)
    p.add_argument("--labeled", help="default: <corpus>/labeled_sets.tsv")
    p.add_argument("--report", required=True)
    p.add_argument("--train-fraction", type=float, default=0.9)
    _add_train_flags(p)

    p = sub.add_parser("project", help="2-D principal-component coordinates")
    p.add_argument("--matrix", required=True)
    p.add_argument("--out", required=True)
    return parser


def _train_config(args, **extra) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, beta1=args.beta1,
        beta2=args.beta2, eps=args.adam_eps, k=args.k, seed=args.seed, dtype=args.dtype,
        deterministic=args.threads == 1, **extra,
    )


def _encoder_config(args, corpus) -> EncoderConfig:
    shape = corpus.load_image(corpus.items[0].id).shape if corpus.items else (3, 32, 32)
    return EncoderConfig(input_shape=shape, conv_stages=args.stages, embedding_dim=args.dim,
                         batch_norm=not args.no_batch_norm)


def _factors_path(args) -> Path:
    if getattr(args, "factors", None):
        return Path(args.factors)
    if getattr(args, "corpus", None):
        return Path(args.corpus) / "factors.tsv"
    raise UsageError("factor scoring needs --factors or --corpus")


def write_manifest(path: Path, args, argv, outputs) -> None:
    config = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items()) if k != "replay"}
    manifest = {
        "subcommand": args.command,
        "config": json.loads(json.dumps(config, default=list)),
        "argv": list(argv),
        "outputs": [str(o) for o in outputs],
        "seed": args.seed,
        "version": __version__,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest_for_file(out) -> Path:
    return Path(str(out) + ".manifest.json")


def cmd_gen_corpus(args, argv):
    spec = SyntheticSpec(
        n_styles=args.styles, n_items_per_category_per_style=args.items_per_cell,
        categories=tuple(c for c in args.categories.split(",") if c),
        image_shape=(3, args.image_size, args.image_size), n_sets=args.sets,
        n_labeled_sets=args.labeled_sets, set_size_distribution=args.set_sizes,
        popularity_exponent=args.popularity, seed=args.seed,
    )
    result = gen_synthetic(spec, args.out)
    write_manifest(Path(args.out) / "run_manifest.json", args, argv, [args.out])
    print(f"{len(result.corpus.items)} items, {len(result.corpus.sets)} sets -> {args.out}")


def cmd_train(args, argv):
    corpus = load_corpus_dir(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    tcfg = _train_config(args, checkpoint_interval=args.checkpoint_interval)
    ecfg = resume.encoder_config if resume else _encoder_config(args, corpus)
    result = train(corpus, tcfg, ecfg, resume=resume, checkpoint_dir=out)
    save_checkpoint(result.checkpoint, out / "final.sv2c")
    write_loss_log(result.loss_log, out / "loss.csv")
    write_manifest(out / "run_manifest.json", args, argv, [out / "final.sv2c", out / "loss.csv"])
    print(f"trained {result.checkpoint.epoch} epochs, {result.checkpoint.step} steps -> {out / 'final.sv2c'}")


def cmd_embed(args, argv):
    corpus = load_corpus_dir(args.corpus)
    if args.onehot_oracle:
        matrix = onehot_factor_matrix(corpus, read_sidecar(Path(args.corpus) / "factors.tsv"))
    else:
        matrix = extract_all(load_checkpoint(args.checkpoint).input_params, corpus, args.batch_size)
    write_embeddings(matrix, args.out)
    write_manifest(_manifest_for_file(args.out), args, argv, [args.out])


def cmd_query(args, argv):
    matrix = read_embeddings(args.matrix, args.metric)
    vec = matrix.vector(args.item) if args.item else np.asarray(args.vector)
    exclude = [x for x in args.exclude.split(",") if x]
    ranked = nearest(vec, matrix, args.top, exclude, args.category)
    lines = ["rank\titem_id\tcategory\tscore"]
    lines += [f"{n}\t{iid}\t{matrix.category(iid)}\t{score!r}" for n, (iid, score) in enumerate(ranked, start=1)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        write_manifest(_manifest_for_file(args.out), args, argv, [args.out])
    else:
        sys.stdout.write(text)


def cmd_analogy(args, argv):
    matrix = read_embeddings(args.matrix, args.metric)
    outputs = [args.report]
    if args.suite:
        suite = read_suite(args.suite)
    else:
        if not args.corpus:
            raise UsageError("analogy needs --suite or --corpus to generate one")
        corpus = load_corpus_dir(args.corpus)
        suite = generate_analogy_suite(corpus, read_sidecar(_factors_path(args)), args.questions, args.seed, args.factor)
        suite_path = str(args.report) + ".suite.tsv"
        write_suite(suite, suite_path)
        outputs.append(suite_path)
    if args.mode:
        suite.mode = args.mode
    factors = read_sidecar(_factors_path(args)) if suite.mode == "factor" and suite.questions else None
    report = run_analogy_suite(suite, matrix, factors, category_filter=args.category_filter)
    write_report(report, args.report)
    write_manifest(_manifest_for_file(args.report), args, argv, outputs)
    acc = report.accuracy
    print(f"{report.n_accepted}/{report.n_questions} accepted" + (f" ({acc:.1%})" if acc is not None else ""))


def cmd_classify(args, argv):
    matrix = read_embeddings(args.matrix)
    sets, labels = read_labeled_sets(args.labeled)
    ds = LabeledSetDataset(sets, labels, args.train_fraction)
    _, acc = train_classifier(ds, matrix, {"hidden_sizes": (args.hidden,), "epochs": args.mlp_epochs},
                              args.seed, shuffle_labels=args.shuffle_labels)
    write_report({"accuracy": acc, "n_sets": len(sets), "train_fraction": args.train_fraction}, args.report)
    write_manifest(_manifest_for_file(args.report), args, argv, [args.report])
    print(f"held-out accuracy {acc:.4f}")


def cmd_ablate(args, argv):
    corpus = load_corpus_dir(args.corpus)
    sets, labels = read_labeled_sets(args.labeled or Path(args.corpus) / "labeled_sets.tsv")
    ds = LabeledSetDataset(sets, labels, args.train_fraction)
    report = compare_set_vs_pairwise(corpus, ds, _train_config(args), _encoder_config(args, corpus), seed=args.seed)
    write_report(report, args.report)
    write_manifest(_manifest_for_file(args.report), args, argv, [args.report])
    print(json.dumps(report.to_dict()))


def cmd_project(args, argv):
    matrix = read_embeddings(args.matrix)
    write_projection(matrix.ids, project_2d(matrix), args.out)
    write_manifest(_manifest_for_file(args.out), args, argv, [args.out])


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "train": cmd_train,
    "embed": cmd_embed,
    "query": cmd_query,
    "analogy": cmd_analogy,
    "classify": cmd_classify,
    "ablate": cmd_ablate,
    "project": cmd_project,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.replay:
        with open(args.replay, encoding="utf-8") as fh:
            return main(json.load(fh)["argv"])
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=max(1, args.threads)):
            COMMANDS[args.command](args, argv)
    except (ValueError, KeyError, LookupError) as exc:
        print(f"setvec {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001
        logger.debug("runtime failure", exc_info=True)
        print(f"setvec {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
