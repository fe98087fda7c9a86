"""
Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data / format error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import shutil
import sys
from typing import List, Optional, Sequence

from .corpus import load_candidates, parse_dialogs, serialize_dialogs
from .errors import (
    ContractError,
    DegenerateNormError,
    DimensionError,
    FormatError,
    RangeError,
    TrainingDivergedError,
    UnknownCandidateError,
    VocabMismatchError,
)

log = logging.getLogger("dialogmem")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DATA_ERRORS = (FormatError, VocabMismatchError, DimensionError, UnknownCandidateError, OSError)
NUMERIC_ERRORS = (TrainingDivergedError, FloatingPointError, DegenerateNormError)
USAGE_ERRORS = (RangeError, ContractError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        self.exit(EXIT_USAGE, f"\n{self.prog}: error: {message}\n")


def _floats(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def load_config(args):
    from .training import TrainConfig

    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = list(args.set or [])
    if getattr(args, "corpus", None):
        overrides.append(f"corpus={args.corpus}")
    return _override(config, overrides)


def _override(config, overrides):
    try:
        config = config.with_overrides(overrides)
    except FormatError as exc:
        raise UsageError(str(exc)) from None
    log.info("config hash %s seed %d", config.hash, config.seed)
    return config


def _add_config_args(p):
    p.add_argument("--config", help="flat key=value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--corpus", help="shortcut for --set corpus=...")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_parse_check(args) -> int:
    for path in args.files:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        if args.candidates:
            cands = load_candidates(text)
            print(f"{path}: {len(cands)} candidates")
        else:
            dialogues = parse_dialogs(text, path)
            turns = sum(1 for d in dialogues for line in d.lines if hasattr(line, "system"))
            print(f"{path}: {len(dialogues)} dialogues, {turns} system turns")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    from .synthetic import candidate_texts, pos_lexicon_text, split_sizes, synthetic_dialogues

    dialogues = synthetic_dialogues(args.dialogues, args.seed)
    n_train, n_valid, _ = split_sizes(args.dialogues, (0.6, 0.2, 0.2))
    parts = {
        "trn": dialogues[:n_train],
        "dev": dialogues[n_train:n_train + n_valid],
        "tst": dialogues[n_train + n_valid:],
    }
    os.makedirs(args.out, exist_ok=True)
    for tag, ds in parts.items():
        _write(os.path.join(args.out, f"synth-dialog-{tag}.txt"), serialize_dialogs(ds))
    _write(os.path.join(args.out, "synth-dialog-candidates.txt"),
           "".join(f"1 {c}\n" for c in candidate_texts()))
    _write(os.path.join(args.out, "synth-pos.tsv"), pos_lexicon_text())
    print(f"wrote {args.dialogues} dialogues to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .training import resolve_corpus, rows_to_csv, train

    config = load_config(args)
    corpus = resolve_corpus(config)
    result = train(corpus, config, eval_train=args.eval_train)
    rep = result.report
    print(f"model={config.model} seed={config.seed} config={config.hash} best_epoch={rep.best_epoch} "
          f"valid={rep.best_valid_acc:.4f} test={rep.test_acc:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write(os.path.join(args.out, "config.cfg"), config.to_text())
        _write(os.path.join(args.out, "report.csv"), rows_to_csv(rep.rows()))
        result.model.save(os.path.join(args.out, "model.npz"), {"text": config.to_text()}, corpus.vocab.hash)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .encoder import Featurizer
    from .entnet import load_checkpoint
    from .training import TrainConfig, evaluate, resolve_corpus

    model, meta = load_checkpoint(args.checkpoint)
    config = TrainConfig.from_text(meta["config"].get("text", ""))
    overrides = list(args.set or []) + ([f"corpus={args.corpus}"] if args.corpus else [])
    config = _override(config, overrides)
    corpus = resolve_corpus(config)
    if meta["vocab_hash"] != corpus.vocab.hash:
        raise VocabMismatchError(f"checkpoint vocab {meta['vocab_hash']} != corpus vocab {corpus.vocab.hash}")
    featurizer = Featurizer(corpus.vocab, model.dims.max_len, corpus.pos_vocab if model.use_pos else None)
    res = evaluate(model, featurizer, corpus.split(args.split))
    print(f"{args.split}: {res.correct}/{res.total} = {res.accuracy:.4f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    from .training import resolve_corpus, sweep_fraction

    config = load_config(args)
    corpus = resolve_corpus(config)
    table = sweep_fraction(corpus, args.fractions, args.seeds, config)
    for f, mean, std, n in table.summary():
        print(f"fraction={f:g} mean={mean:.4f} std={std:.4f} n={n}")
    if args.out:
        _write(args.out, table.to_csv())
    return EXIT_OK


def cmd_experiment(args) -> int:
    from .experiments import run_experiment
    from .training import resolve_corpus

    out = args.out or f"experiment-{args.kind}"
    if os.path.isdir(out) and os.listdir(out) and not (args.force or args.resume):
        raise UsageError(f"output directory {out} is not empty; use --force to overwrite or --resume")
    if args.force and not args.resume and os.path.isdir(out):
        shutil.rmtree(out)
    config = load_config(args)
    corpus = resolve_corpus(config)
    bundle = run_experiment(args.kind, corpus, config, seeds=args.seeds, fractions=args.fractions,
                            strategies=args.strategies, out_dir=out, resume=args.resume)
    sys.stdout.write(bundle.report())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .diagnostics import check_model_gradients
    from .training import MODELS

    report = check_model_gradients(MODELS[args.model], d=args.d, m=args.m, eps=args.eps, tol=args.tol,
                                   l2=args.l2, seed=args.seed, use_pos=args.pos)
    for name, err in report.max_rel_error.items():
        print(f"  {name:<10} {err:.3e}")
    print(f"max relative error {report.worst:.3e} over {report.n_checked} entries "
          f"(tol {args.tol:g}): {'ok' if report.passed else 'FAILED'}")
    return EXIT_OK if report.passed else EXIT_NUMERIC


def cmd_oracle_embed(args) -> int:
    from .training import oracle_embedding_protocol, resolve_corpus

    config = load_config(args)
    corpus = resolve_corpus(config)
    snap = oracle_embedding_protocol(corpus, config, args.out)
    print(f"wrote {args.out}: {snap.E.shape[0]} x {snap.E.shape[1]} embeddings, vocab {snap.vocab_hash}")
    return EXIT_OK


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    from .training import MODELS, config_help

    parser = _Parser(
        prog="dialogmem",
        description="Entity-network memories for dialogue response selection.",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = argparse.RawDescriptionHelpFormatter

    p = sub.add_parser("parse-check", help="validate dialogue or candidate files")
    p.add_argument("files", nargs="+")
    p.add_argument("--candidates", action="store_true", help="files are candidate lists")
    p.set_defaults(func=cmd_parse_check)

    p = sub.add_parser("gen-synth", help="write the synthetic corpus as text files")
    p.add_argument("out")
    p.add_argument("--dialogues", type=int, default=500)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train one model", epilog=config_help(), formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--out", help="directory for config, report CSV and checkpoint")
    p.add_argument("--eval-train", action="store_true", help="also log train accuracy per epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--corpus")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="data-fraction sweep", epilog=config_help(), formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--fractions", type=_floats, default=[0.1, 0.5, 1.0])
    p.add_argument("--seeds", type=_ints, default=[1, 2, 3])
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("experiment", help="run E1, E2, E3 or E4", epilog=config_help(), formatter_class=fmt)
    p.add_argument("kind", type=str.upper, choices=["E1", "E2", "E3", "E4"])
    _add_config_args(p)
    p.add_argument("--seeds", type=_ints)
    p.add_argument("--fractions", type=_floats)
    p.add_argument("--strategies", type=lambda s: [x for x in s.split(",") if x])
    p.add_argument("--out", help="output directory (default experiment-<KIND>)")
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.add_argument("--resume", action="store_true", help="reuse per-run CSVs already in the output directory")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("gradcheck", help="finite-difference check on a toy model")
    p.add_argument("--model", default="sentnet", choices=sorted(MODELS))
    p.add_argument("--d", type=int, default=4)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--pos", action="store_true", help="include POS embeddings")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("oracle-embed", help="train with random embeddings and snapshot them",
                       epilog=config_help(), formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--out", required=True, help="snapshot path (.npz)")
    p.set_defaults(func=cmd_oracle_embed)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NUMERIC_ERRORS as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        for k, v in getattr(exc, "diagnostics", {}).items():
            print(f"  {k}: {v}", file=sys.stderr)
        return EXIT_NUMERIC
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
