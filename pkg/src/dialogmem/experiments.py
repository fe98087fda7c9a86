"""
Experiment orchestration.

E1  baselines and memory models over many seeds (best / mean, paired tests
    against the strongest baseline)
E2  embedding strategy x data fraction (mean +- std)
E3  model x data fraction (mean +- std)
E4  {entnet, sentnet} x {with, without POS embeddings}

Every run writes its own CSV as soon as it finishes, so an interrupted
experiment can be resumed; the summary is derived from the run records only.
"""
from __future__ import annotations

import csv
import hashlib
import io
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .baselines import baseline_predictions, build_tfidf, q2a_train
from .corpus import Corpus
from .encoder import load_pretrained_vectors
from .errors import ContractError, FormatError
from .evaluation import mean_std, paired_ttest, turn_accuracy
from .training import TrainConfig, csv_to_rows, rows_to_csv, train

log = logging.getLogger(__name__)

KINDS = ("E1", "E2", "E3", "E4")
BASELINES = ("tfidf", "q2a")
MEMORY_MODELS = ("entnet", "sentnet")
DEFAULT_SEEDS = {"E1": tuple(range(1, 11))}
DEFAULT_FRACTIONS = tuple(round(0.1 * i, 1) for i in range(1, 11))
SUMMARY_HEADER = ("experiment", "model", "strategy", "pos", "fraction", "n_runs",
                  "mean", "std", "best", "t", "p", "significant")


@dataclass(frozen=True)
class RunSpec:
    model: str
    seed: int
    fraction: float = 1.0
    strategy: str = "random"
    pos: bool = False

    @property
    def name(self) -> str:
        return f"{self.model}_{self.strategy}_pos{int(self.pos)}_f{self.fraction:g}_s{self.seed}"

    @property
    def group(self) -> Tuple[str, str, bool, float]:
        return self.model, self.strategy, self.pos, self.fraction


@dataclass
class RunRecord:
    spec: RunSpec
    test_acc: float
    rows: List[tuple]
    config_text: str = ""


@dataclass(frozen=True)
class SummaryRow:
    experiment: str
    model: str
    strategy: str
    pos: bool
    fraction: float
    n_runs: int
    mean: float
    std: float
    best: float
    t: float = math.nan
    p: float = math.nan
    significant: bool = False


@dataclass
class ExperimentBundle:
    kind: str
    runs: List[RunRecord] = field(default_factory=list)
    summary: List[SummaryRow] = field(default_factory=list)

    def summary_csv(self) -> str:
        return summary_to_csv(self.summary)

    def report(self) -> str:
        lines = [f"experiment {self.kind}: {len(self.runs)} runs"]
        for r in self.summary:
            label = r.model + (f"+{r.strategy}" if self.kind == "E2" else "") + ("+POS" if r.pos else "")
            line = (f"  {label:<20} fraction={r.fraction:<4g} n={r.n_runs:<3d} "
                    f"mean={r.mean:.4f} std={r.std:.4f} best={r.best:.4f}")
            if not math.isnan(r.p):
                line += f" t={r.t:.3f} p={r.p:.4g}" + (" *" if r.significant else "")
            lines.append(line)
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# CSV helpers
# ---------------------------------------------------------------------------

def _num(x: float) -> str:
    return repr(float(x))


def summary_to_csv(rows: Iterable[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for r in rows:
        w.writerow([r.experiment, r.model, r.strategy, int(r.pos), _num(r.fraction), r.n_runs,
                    _num(r.mean), _num(r.std), _num(r.best), _num(r.t), _num(r.p), int(r.significant)])
    return buf.getvalue()


def summary_from_csv(text: str) -> List[SummaryRow]:
    reader = csv.reader(io.StringIO(text))
    if tuple(next(reader)) != SUMMARY_HEADER:
        raise FormatError("unexpected summary header")
    out = []
    for e, m, s, pos, f, n, mean, std, best, t, p, sig in reader:
        out.append(SummaryRow(e, m, s, bool(int(pos)), float(f), int(n), float(mean), float(std),
                              float(best), float(t), float(p), bool(int(sig))))
    return out


def curve_csv(rows: Sequence[SummaryRow]) -> str:
    """Pivot a fraction grid: one mean row and one std row per series, one column per fraction."""
    fractions = sorted({r.fraction for r in rows})
    series: Dict[str, Dict[float, SummaryRow]] = {}
    for r in rows:
        label = f"{r.model}+{r.strategy}" if r.experiment == "E2" else r.model
        series.setdefault(label, {})[r.fraction] = r
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "metric"] + [f"{f:g}" for f in fractions])
    for label, cells in series.items():
        for metric in ("mean", "std"):
            w.writerow([label, metric] + [_num(getattr(cells[f], metric)) if f in cells else "" for f in fractions])
    return buf.getvalue()


def _test_accuracy(rows: Sequence[tuple]) -> float:
    for r in rows:
        if r[4] == "test" and r[5] == "accuracy":
            return r[6]
    raise FormatError("run CSV has no test accuracy row")


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

def plan(kind: str, config: TrainConfig, seeds: Sequence[int], fractions: Sequence[float],
         strategies: Sequence[str]) -> List[RunSpec]:
    if kind == "E1":
        return [RunSpec(m, s) for m in BASELINES + MEMORY_MODELS for s in seeds]
    if kind == "E2":
        return [RunSpec(config.model, s, f, st) for st in strategies for f in fractions for s in seeds]
    if kind == "E3":
        return [RunSpec(m, s, f) for m in MEMORY_MODELS for f in fractions for s in seeds]
    if kind == "E4":
        return [RunSpec(m, s, pos=p) for m in MEMORY_MODELS for p in (False, True) for s in seeds]
    raise ContractError(f"unknown experiment {kind!r}; choose from {KINDS}")


class _Runner:
    """Executes run specs, reusing per-run CSVs already on disk when resuming."""

    def __init__(self, corpus: Corpus, config: TrainConfig, out_dir: Optional[str], resume: bool):
        self.corpus = corpus
        self.config = config
        self.out_dir = out_dir
        self.resume = resume
        self._baselines = {}
        self._sources = {}

    def path(self, spec: RunSpec) -> Optional[str]:
        return os.path.join(self.out_dir, "runs", spec.name + ".csv") if self.out_dir else None

    def source(self, strategy: str):
        if strategy not in self._sources:
            if strategy == "oracle":
                self._sources[strategy] = self.oracle_snapshot()
            elif strategy == "pretrained":
                if not self.config.pretrained_path:
                    raise ContractError("pretrained strategy needs pretrained_path")
                with open(self.config.pretrained_path, encoding="utf-8") as fh:
                    self._sources[strategy] = load_pretrained_vectors(fh, self.corpus.vocab, self.config.d)
            else:
                self._sources[strategy] = None
        return self._sources[strategy]

    def oracle_snapshot(self):
        from .training import oracle_embedding_protocol

        path = os.path.join(self.out_dir, "oracle_embeddings.npz") if self.out_dir else None
        return oracle_embedding_protocol(self.corpus, self.config, path)

    def baseline(self, name: str):
        if name not in self._baselines:
            train_set = self.corpus.train
            model = build_tfidf(train_set, self.corpus.candidates) if name == "tfidf" else q2a_train(train_set)
            preds = baseline_predictions(model, self.corpus.test)
            self._baselines[name] = turn_accuracy(preds, [ex.label for ex in self.corpus.test]).accuracy
        return self._baselines[name]

    def run(self, spec: RunSpec) -> RunRecord:
        path = self.path(spec)
        if self.resume and path and os.path.exists(path):
            with open(path, encoding="utf-8") as fh:
                rows = csv_to_rows(fh.read())
            log.info("resume %s", spec.name)
            return RunRecord(spec, _test_accuracy(rows), rows)
        if spec.model in BASELINES:
            # deterministic methods: every seed yields the same accuracy
            acc = self.baseline(spec.model)
            rec = RunRecord(spec, acc, [(spec.model, 1.0, spec.seed, 0, "test", "accuracy", acc)])
        else:
            cfg = self.config.replace(model=spec.model, seed=spec.seed, data_fraction=spec.fraction,
                                      embedding_strategy=spec.strategy, use_pos=spec.pos)
            result = train(self.corpus, cfg, source=self.source(spec.strategy))
            if spec.strategy == "fixed" and not result.report.embeddings_frozen:
                raise ContractError(f"{spec.name}: fixed embeddings were not verified frozen")
            rec = RunRecord(spec, result.report.test_acc, result.report.rows(), cfg.to_text())
        if path:
            _write(path, rows_to_csv(rec.rows))
            if rec.config_text:
                _write(os.path.join(self.out_dir, "configs", spec.name + ".cfg"), rec.config_text)
        return rec


def summarize(kind: str, runs: Sequence[RunRecord]) -> List[SummaryRow]:
    groups: Dict[tuple, List[RunRecord]] = {}
    for rec in runs:
        groups.setdefault(rec.spec.group, []).append(rec)
    rows = []
    for (model, strategy, pos, fraction), recs in groups.items():
        accs = [r.test_acc for r in recs]
        mean, std = mean_std(accs)
        rows.append(SummaryRow(kind, model, strategy, pos, fraction, len(accs), mean, std, max(accs)))
    if kind == "E1":
        rows = _with_significance(rows, groups)
    return rows


def _with_significance(rows: List[SummaryRow], groups) -> List[SummaryRow]:
    """Pair each memory model with the strongest baseline over matched seeds."""
    base = [r for r in rows if r.model in BASELINES]
    if not base:
        return rows
    strongest = max(base, key=lambda r: (r.mean, -BASELINES.index(r.model)))
    ref = {rec.spec.seed: rec.test_acc for rec in groups[(strongest.model, "random", False, 1.0)]}
    out = []
    for r in rows:
        recs = groups[(r.model, r.strategy, r.pos, r.fraction)]
        pairs = [(rec.test_acc, ref[rec.spec.seed]) for rec in recs if rec.spec.seed in ref]
        if r.model in MEMORY_MODELS and len(pairs) >= 2:
            cmp = paired_ttest(pairs)
            r = SummaryRow(**{**r.__dict__, "t": cmp.t, "p": cmp.p,
                              "significant": cmp.significant and cmp.mean_difference > 0})
        out.append(r)
    return out


def run_experiment(
    kind: str,
    corpus: Corpus,
    config: TrainConfig,
    seeds: Optional[Sequence[int]] = None,
    fractions: Optional[Sequence[float]] = None,
    strategies: Optional[Sequence[str]] = None,
    out_dir: Optional[str] = None,
    resume: bool = False,
) -> ExperimentBundle:
    """Run one experiment grid; with ``out_dir`` every artifact is also written to disk."""
    kind = kind.upper()
    seeds = tuple(seeds) if seeds else DEFAULT_SEEDS.get(kind, (1, 2, 3))
    fractions = tuple(fractions) if fractions else DEFAULT_FRACTIONS
    if strategies is None:
        strategies = ("random", "fixed", "oracle") + (("pretrained",) if config.pretrained_path else ())
    specs = plan(kind, config, seeds, fractions, strategies)
    runner = _Runner(corpus, config, out_dir, resume)
    log.info("experiment %s: %d runs, base config %s", kind, len(specs), config.hash)
    bundle = ExperimentBundle(kind)
    for spec in specs:
        bundle.runs.append(runner.run(spec))
    bundle.summary = summarize(kind, bundle.runs)
    if out_dir:
        _write(os.path.join(out_dir, "base.cfg"), config.to_text())
        _write(os.path.join(out_dir, "summary.csv"), bundle.summary_csv())
        _write(os.path.join(out_dir, "report.txt"), bundle.report())
        if kind in ("E2", "E3"):
            _write(os.path.join(out_dir, "curve.csv"), curve_csv(bundle.summary))
        write_manifest(out_dir)
    return bundle


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def _write(path: str, text: str) -> None:
    os.makedirs(os.path.dirname(path), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: str) -> str:
    """List every file under ``out_dir`` with its sha256; returns the manifest path."""
    entries = []
    for root, _, files in os.walk(out_dir):
        for name in files:
            rel = os.path.relpath(os.path.join(root, name), out_dir).replace(os.sep, "/")
            if rel != "MANIFEST":
                entries.append((rel, file_sha256(os.path.join(root, name))))
    path = os.path.join(out_dir, "MANIFEST")
    _write(path, "".join(f"{digest}  {rel}\n" for rel, digest in sorted(entries)))
    return path


def read_manifest(out_dir: str) -> Dict[str, str]:
    with open(os.path.join(out_dir, "MANIFEST"), encoding="utf-8") as fh:
        return {rel: digest for digest, rel in (line.rstrip("\n").split("  ", 1) for line in fh if line.strip())}
