"""
Training loop: cross-entropy + l2, Adam with step decay, global-norm clipping,
inverted dropout, validation-based model selection, and data-fraction sweeps.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import math
import os
import time
from dataclasses import dataclass, field, fields
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .corpus import Corpus, DialogueExample, load_corpus, subsample
from .diffmath import AdamState, adam_step, clip_gradients, global_norm
from .encoder import (
    STRATEGIES,
    EmbeddingSnapshot,
    Featurizer,
    init_embeddings,
    load_pretrained_vectors,
    load_snapshot,
    max_utterance_length,
)
from .entnet import NLL_FLOOR, Dims, DropoutSource, EntNet, MemoryModel
from .errors import ContractError, FormatError, RangeError, TrainingDivergedError
from .evaluation import AccuracyResult, mean_std, turn_accuracy
from .sentnet import SEntNet

log = logging.getLogger(__name__)

MODELS = {"entnet": EntNet, "sentnet": SEntNet}
EVAL_BATCH = 256
BUCKET_POOL = 16  # batches per length-sorted pool


def _opt(default, help):
    return field(default=default, metadata={"help": help})


@dataclass(frozen=True)
class TrainConfig:
    model: str = _opt("sentnet", "model kind: entnet or sentnet")
    corpus: str = _opt("synth", "'synth' or a directory with *trn/*dev/*tst and *candidates* files")
    synth_dialogues: int = _opt(500, "number of generated dialogues when corpus=synth")
    synth_seed: int = _opt(7, "generator seed when corpus=synth")
    d: int = _opt(50, "embedding / memory dimension (reference setting 50)")
    m: int = _opt(5, "memory blocks per memory (reference setting 5)")
    max_epochs: int = _opt(50, "training epochs (reference setting 50)")
    lr: float = _opt(0.01, "Adam learning rate (reference setting 0.01)")
    decay_every: int = _opt(10, "epochs between learning-rate decays (reference decay frequency 10)")
    decay_factor: float = _opt(0.5, "multiplier applied at each decay (not given in the reference setup)")
    clip_norm: float = _opt(40.0, "global L2 gradient-norm cap (reference cap 40)")
    l2: float = _opt(0.001, "l2 penalty on all trainable weights (reference setting 0.001)")
    dropout: float = _opt(0.5, "dropout rate on utterance encodings and memory readout (reference 0.5)")
    batch_size: int = _opt(32, "examples per mini-batch")
    seed: int = _opt(1, "run seed: init, shuffling, dropout and subsampling")
    embedding_strategy: str = _opt("random", "random | fixed | oracle | pretrained")
    use_pos: bool = _opt(False, "add POS-tag embeddings to word embeddings")
    data_fraction: float = _opt(1.0, "fraction of training dialogues used, in (0, 1]")
    pos_lexicon: str = _opt("", "token<TAB>tag lexicon file (synthetic corpus ships its own)")
    pretrained_path: str = _opt("", "word-vector text file for embedding_strategy=pretrained")
    oracle_snapshot: str = _opt("", "embedding snapshot for embedding_strategy=oracle")
    max_len: int = _opt(0, "positional-mask length; 0 = 95th percentile of train lengths, capped at 30")

    def __post_init__(self):
        positive = ("d", "m", "max_epochs", "lr", "decay_every", "decay_factor", "clip_norm",
                    "batch_size", "synth_dialogues")
        for name in positive:
            if not getattr(self, name) > 0:
                raise RangeError(f"{name} must be positive, got {getattr(self, name)}")
        if self.l2 < 0:
            raise RangeError("l2 must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise RangeError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 < self.data_fraction <= 1.0:
            raise RangeError(f"data_fraction must be in (0, 1], got {self.data_fraction}")
        if self.model not in MODELS:
            raise RangeError(f"model must be one of {sorted(MODELS)}, got {self.model!r}")
        if self.embedding_strategy not in STRATEGIES:
            raise RangeError(f"embedding_strategy must be one of {STRATEGIES}")
        if self.max_len < 0:
            raise RangeError("max_len must be >= 0")

    # -- flat key=value format ----------------------------------------------
    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def keys(cls) -> List[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse_pairs(cls, pairs: Iterable[Tuple[str, str, Optional[int]]], path=None) -> Dict[str, object]:
        types = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, raw, line in pairs:
            if key not in types:
                raise FormatError(f"unknown config key {key!r}", line, path)
            try:
                out[key] = _coerce(types[key], raw)
            except ValueError:
                raise FormatError(f"bad value for {key}: {raw!r}", line, path) from None
        return out

    @classmethod
    def from_text(cls, text: str, path=None) -> "TrainConfig":
        return cls(**cls.parse_pairs(_kv_lines(text, path), path))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), path)

    def with_overrides(self, overrides: Iterable[str]) -> "TrainConfig":
        pairs = []
        for item in overrides:
            if "=" not in item:
                raise FormatError(f"override must be key=value, got {item!r}")
            k, v = item.split("=", 1)
            pairs.append((k.strip(), v.strip(), None))
        return dataclasses.replace(self, **self.parse_pairs(pairs))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _coerce(typ, raw: str):
    typ = typ if isinstance(typ, str) else typ.__name__
    if typ == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(raw)
    if typ == "int":
        return int(raw)
    if typ == "float":
        return float(raw)
    return raw


def _kv_lines(text, path=None):
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise FormatError("expected key=value", lineno, path)
        k, v = stripped.split("=", 1)
        yield k.strip(), v.strip(), lineno


def config_help() -> str:
    width = max(len(f.name) for f in fields(TrainConfig))
    rows = [f"  {f.name:<{width}}  {f.metadata['help']} [default: {_fmt(f.default)}]"
            for f in fields(TrainConfig)]
    return "config keys:\n" + "\n".join(rows)


# ---------------------------------------------------------------------------
# corpus resolution
# ---------------------------------------------------------------------------

def resolve_corpus(config: TrainConfig) -> Corpus:
    from .synthetic import gen_synthetic

    if config.corpus == "synth":
        corpus = gen_synthetic(config.synth_dialogues, config.synth_seed)
        if config.pos_lexicon:
            log.warning("pos_lexicon ignored: the synthetic corpus ships its own lexicon")
        return corpus
    directory = config.corpus
    if not os.path.isdir(directory) and os.environ.get("SENTNET_DATA_DIR"):
        directory = os.path.join(os.environ["SENTNET_DATA_DIR"], config.corpus)
    return load_corpus(directory, config.pos_lexicon or None)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    valid_acc: float
    train_acc: float = math.nan


@dataclass
class RunReport:
    model: str
    seed: int
    fraction: float
    config_hash: str
    epochs: List[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_acc: float = math.nan
    test_acc: float = math.nan
    n_train_examples: int = 0
    embeddings_frozen: bool = False  # set after a bitwise check of a fixed table
    wall_clock: float = 0.0

    def rows(self) -> List[tuple]:
        """Long-format rows: (model, fraction, seed, epoch, split, metric, value)."""
        out = []
        for r in self.epochs:
            out.append((self.model, self.fraction, self.seed, r.epoch, "train", "loss", r.train_loss))
            if not math.isnan(r.train_acc):
                out.append((self.model, self.fraction, self.seed, r.epoch, "train", "accuracy", r.train_acc))
            if not math.isnan(r.valid_acc):
                out.append((self.model, self.fraction, self.seed, r.epoch, "valid", "accuracy", r.valid_acc))
        if self.embeddings_frozen:
            out.append((self.model, self.fraction, self.seed, self.best_epoch, "train", "embeddings_frozen", 1.0))
        out.append((self.model, self.fraction, self.seed, self.best_epoch, "test", "accuracy", self.test_acc))
        return out


CSV_HEADER = ("model", "fraction", "seed", "epoch", "split", "metric", "value")


def rows_to_csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow([_fmt(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def csv_to_rows(text: str) -> List[tuple]:
    reader = csv.reader(io.StringIO(text))
    header = tuple(next(reader))
    if header != CSV_HEADER:
        raise FormatError(f"unexpected CSV header {header}")
    out = []
    for model, fraction, seed, epoch, split, metric, value in reader:
        out.append((model, float(fraction), int(seed), int(epoch), split, metric, float(value)))
    return out


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def loss(y, labels, params: Optional[Dict[str, np.ndarray]] = None, l2: float = 0.0) -> float:
    """Mean negative log-likelihood of ``labels`` under rows of ``y``, plus ``l2 * sum(theta^2)``."""
    y = np.asarray(y, dtype=float)
    labels = np.asarray(labels, dtype=int)
    picked = y[np.arange(len(labels)), labels]
    if np.any(picked < NLL_FLOOR):
        log.warning("predicted gold probability below %g clamped", NLL_FLOOR)
    value = float(-np.mean(np.log(np.maximum(picked, NLL_FLOOR))))
    if l2 and params:
        value += l2 * sum(float(np.sum(v ** 2)) for v in params.values())
    return value


@dataclass
class TrainResult:
    report: RunReport
    model: MemoryModel
    featurizer: Featurizer


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Learning rate for a 1-based epoch under step decay."""
    return config.lr * config.decay_factor ** ((epoch - 1) // config.decay_every)


def make_batches(examples: Sequence[DialogueExample], batch_size: int, rng: np.random.Generator):
    """Shuffle, sort pools of ``BUCKET_POOL`` batches by history length, shuffle batch order."""
    order = rng.permutation(len(examples))
    pool = batch_size * BUCKET_POOL
    batches = []
    for start in range(0, len(order), pool):
        chunk = sorted(order[start:start + pool], key=lambda i: len(examples[i].history))
        batches += [chunk[i:i + batch_size] for i in range(0, len(chunk), batch_size)]
    perm = rng.permutation(len(batches))
    return [[examples[i] for i in batches[j]] for j in perm]


def evaluate(model: MemoryModel, featurizer: Featurizer, examples: Sequence[DialogueExample]) -> AccuracyResult:
    # sorted by length so padding stays small; accuracy is order-independent
    ordered = sorted(examples, key=lambda ex: len(ex.history))
    preds, labels = [], []
    for i in range(0, len(ordered), EVAL_BATCH):
        chunk = ordered[i:i + EVAL_BATCH]
        batch = featurizer.batch(chunk)
        preds.append(np.argmax(model.predict_proba(batch), axis=-1))
        labels.append(batch.labels)
    return turn_accuracy(np.concatenate(preds), np.concatenate(labels))


def build_model(corpus: Corpus, config: TrainConfig, rng: np.random.Generator,
                source=None) -> Tuple[MemoryModel, Featurizer]:
    if config.use_pos and corpus.pos_vocab is None:
        raise ContractError("use_pos=true but the corpus has no POS lexicon")
    pos_vocab = corpus.pos_vocab if config.use_pos else None
    max_len = config.max_len or max_utterance_length(corpus.train)
    if source is None:
        if config.embedding_strategy == "oracle":
            if not config.oracle_snapshot:
                raise ContractError("embedding_strategy=oracle needs oracle_snapshot")
            source = load_snapshot(config.oracle_snapshot)
        elif config.embedding_strategy == "pretrained":
            if not config.pretrained_path:
                raise ContractError("embedding_strategy=pretrained needs pretrained_path")
            with open(config.pretrained_path, encoding="utf-8") as fh:
                source = load_pretrained_vectors(fh, corpus.vocab, config.d)
            log.info("pretrained coverage %.3f", source.coverage)
    table = init_embeddings(config.embedding_strategy, corpus.vocab, config.d, rng, pos_vocab, source)
    dims = Dims(len(corpus.vocab), corpus.n_candidates, config.d, config.m, max_len,
                len(pos_vocab) if pos_vocab is not None else 0)
    model = MODELS[config.model].create(dims, rng, table, use_pos=config.use_pos)
    return model, Featurizer(corpus.vocab, max_len, pos_vocab)


def train(
    corpus: Corpus,
    config: TrainConfig,
    source=None,
    eval_train: bool = False,
    stop_when: Optional[Callable[[EpochRecord], bool]] = None,
) -> TrainResult:
    """Train ``config.model`` on ``corpus``; returns the best-validation model."""
    t0 = time.perf_counter()
    init_ss, shuffle_ss, dropout_ss = np.random.SeedSequence(config.seed).spawn(3)
    init_rng = np.random.default_rng(init_ss)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    dropout = DropoutSource(config.dropout, np.random.default_rng(dropout_ss))

    train_set = subsample(corpus.train, config.data_fraction, config.seed)
    if not train_set:
        raise ContractError("empty training split")
    model, featurizer = build_model(corpus, config, init_rng, source)
    report = RunReport(config.model, config.seed, config.data_fraction, config.hash,
                       n_train_examples=len(train_set))
    log.info("train %s seed=%d config=%s examples=%d", config.model, config.seed, config.hash, len(train_set))

    E0 = model.params["E"].copy() if "E" in model.frozen else None
    state = AdamState()
    best_params = None
    for epoch in range(1, config.max_epochs + 1):
        lr = lr_at(config, epoch)
        losses = []
        for b, examples in enumerate(make_batches(train_set, config.batch_size, shuffle_rng)):
            batch = featurizer.batch(examples)
            try:
                loss, grads, _ = model.loss_and_grads(batch, config.l2, dropout)
            except FloatingPointError as err:
                raise TrainingDivergedError(str(err), {
                    "epoch": epoch, "batch": b,
                    **{f"param_norm[{k}]": float(np.linalg.norm(v)) for k, v in model.params.items()},
                }) from err
            norm = global_norm(grads)
            if not (math.isfinite(loss) and math.isfinite(norm)):
                raise TrainingDivergedError("non-finite loss or gradient", {
                    "epoch": epoch, "batch": b, "loss": loss, "grad_norm": norm,
                    **{f"norm[{k}]": float(np.linalg.norm(v)) for k, v in grads.items()},
                })
            adam_step(model.params, clip_gradients(grads, config.clip_norm), state, lr)
            losses.append(loss * len(examples))
        record = EpochRecord(epoch, lr, sum(losses) / len(train_set), math.nan)
        if corpus.valid:
            record.valid_acc = evaluate(model, featurizer, corpus.valid).accuracy
        if eval_train:
            record.train_acc = evaluate(model, featurizer, train_set).accuracy
        report.epochs.append(record)
        log.debug("epoch %d lr=%g loss=%.4f valid=%.4f", epoch, lr, record.train_loss, record.valid_acc)

        improved = not corpus.valid or best_params is None or record.valid_acc > report.best_valid_acc
        if improved:
            report.best_epoch, report.best_valid_acc = epoch, record.valid_acc
            best_params = {k: v.copy() for k, v in model.params.items()}
        if stop_when is not None and stop_when(record):
            break

    model.params = best_params
    if E0 is not None:
        if not np.array_equal(E0, model.params["E"]):
            raise ContractError("frozen embedding table changed during training")
        report.embeddings_frozen = True
    if corpus.test:
        report.test_acc = evaluate(model, featurizer, corpus.test).accuracy
    report.wall_clock = time.perf_counter() - t0
    log.info("done %s seed=%d best_epoch=%d valid=%.4f test=%.4f (%.1fs)", config.model, config.seed,
             report.best_epoch, report.best_valid_acc, report.test_acc, report.wall_clock)
    return TrainResult(report, model, featurizer)


# ---------------------------------------------------------------------------
# sweeps and the oracle protocol
# ---------------------------------------------------------------------------

@dataclass
class SweepTable:
    model: str
    cells: Dict[Tuple[float, int], float]  # (fraction, seed) -> test accuracy
    reports: List[RunReport] = field(default_factory=list)

    def summary(self) -> List[Tuple[float, float, float, int]]:
        """(fraction, mean, std, n_runs) per fraction, ascending."""
        out = []
        for f in sorted({f for f, _ in self.cells}):
            accs = [a for (ff, _), a in sorted(self.cells.items()) if ff == f]
            mean, std = mean_std(accs)
            out.append((f, mean, std, len(accs)))
        return out

    def to_csv(self) -> str:
        rows = [(self.model, f, s, 0, "test", "accuracy", a) for (f, s), a in sorted(self.cells.items())]
        return rows_to_csv(rows)


def sweep_fraction(corpus: Corpus, fractions: Sequence[float], seeds: Sequence[int],
                   config: TrainConfig, source=None) -> SweepTable:
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise RangeError(f"fraction {f} outside (0, 1]")
    table = SweepTable(config.model, {})
    for f in fractions:
        for s in seeds:
            res = train(corpus, config.replace(seed=s, data_fraction=f), source=source)
            table.cells[(f, s)] = res.report.test_acc
            table.reports.append(res.report)
    return table


def oracle_embedding_protocol(corpus: Corpus, config: TrainConfig, path=None) -> EmbeddingSnapshot:
    """Train with random embeddings on the full train split and snapshot the learned table."""
    from .encoder import save_snapshot

    cfg = config.replace(embedding_strategy="random", data_fraction=1.0, oracle_snapshot="")
    result = train(corpus, cfg)
    table = result.model.table()
    snap = EmbeddingSnapshot(table.E, list(corpus.vocab.itos), corpus.vocab.hash, table.Epos)
    if path is not None:
        save_snapshot(path, table, corpus.vocab)
    return snap
