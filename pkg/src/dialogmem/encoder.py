"""
Input module: embedding tables, the learnable positional mask, utterance
encoding ``e = sum_x f_x * (w_x + l_x)`` and the embedding initialisation
strategies (random, fixed, oracle, pretrained).
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .corpus import DialogueExample, SourceTag, Utterance, Vocab
from .diffmath import Graph, Node
from .errors import ContractError, DimensionError, FormatError, VocabMismatchError

INIT_STD = 0.1
MAX_LEN_CAP = 30
STRATEGIES = ("random", "fixed", "oracle", "pretrained")
SNAPSHOT_FORMAT = "dialogmem-embeddings"
SNAPSHOT_VERSION = 1


@dataclass
class EmbeddingTable:
    E: np.ndarray
    trainable: bool = True
    Epos: Optional[np.ndarray] = None

    def __post_init__(self):
        self.E[0] = 0.0
        if self.Epos is not None:
            self.Epos[0] = 0.0

    @property
    def d(self) -> int:
        return self.E.shape[1]


@dataclass
class PositionalMask:
    F: np.ndarray

    @property
    def max_len(self) -> int:
        return self.F.shape[0]


def gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.normal(0.0, INIT_STD, size=shape)


def init_mask(max_len: int, d: int, rng: np.random.Generator) -> PositionalMask:
    return PositionalMask(gaussian(rng, (max_len, d)))


def max_utterance_length(examples: Iterable[DialogueExample], cap: int = MAX_LEN_CAP, pct: float = 95.0) -> int:
    """95th-percentile utterance length over the examples, capped."""
    seen = {}
    for ex in examples:
        for u in ex.history:
            seen[(ex.dialogue_id, u.global_turn)] = len(u.tokens)
    if not seen:
        return 1
    p = float(np.percentile(np.fromiter(seen.values(), dtype=float), pct))
    return int(max(1, min(cap, math.ceil(p))))


def encode_utterance(
    token_ids: Sequence[int],
    table: EmbeddingTable,
    mask: PositionalMask,
    pos_ids: Optional[Sequence[int]] = None,
    use_pos: bool = False,
) -> np.ndarray:
    """Encode one utterance; tokens beyond the mask length are dropped."""
    if len(token_ids) == 0:
        raise ContractError("cannot encode an empty utterance")
    if use_pos and (pos_ids is None or table.Epos is None):
        raise ContractError("use_pos requires POS tags and a POS embedding table")
    n = min(len(token_ids), mask.max_len)
    w = table.E[np.asarray(token_ids[:n])]
    if use_pos:
        w = w + table.Epos[np.asarray(pos_ids[:n])]
    return np.sum(mask.F[:n] * w, axis=0)


def encode_graph(g: Graph, E: Node, F: Node, ids: np.ndarray, Epos: Optional[Node] = None, pos=None) -> Node:
    """Batched encoder on the tape: ids (..., L) -> (..., d)."""
    w = g.embed(E, ids)
    if Epos is not None:
        w = g.add(w, g.embed(Epos, pos))
    return g.sum(g.mul(w, F), axis=-2)


# ---------------------------------------------------------------------------
# initialisation strategies
# ---------------------------------------------------------------------------

@dataclass
class PretrainedVectors:
    rows: Dict[str, np.ndarray]
    coverage: float
    dim: int


def load_pretrained_vectors(
    stream: Union[str, Iterable[str]], vocab: Vocab, d: int
) -> PretrainedVectors:
    """Read ``token v1 ... vd`` lines (GloVe / Paragram / NumberBatch text format)."""
    lines = stream.splitlines() if isinstance(stream, str) else stream
    rows: Dict[str, np.ndarray] = {}
    dim = None
    for lineno, line in enumerate(lines, start=1):
        parts = line.rstrip("\r\n").split(" ")
        if not line.strip():
            continue
        token, values = parts[0], parts[1:]
        if dim is None:
            dim = len(values)
            if dim != d:
                raise DimensionError(f"vector file has dimension {dim}, table has {d}")
        if len(values) != dim:
            raise FormatError(f"expected {dim} values, found {len(values)}", lineno)
        if token in vocab and token not in rows:
            try:
                rows[token] = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise FormatError("non-numeric vector entry", lineno) from None
    content = len(vocab) - 2
    coverage = len(rows) / content if content > 0 else 0.0
    return PretrainedVectors(rows, coverage, d)


@dataclass
class EmbeddingSnapshot:
    E: np.ndarray
    tokens: List[str]
    vocab_hash: str
    Epos: Optional[np.ndarray] = None
    version: int = SNAPSHOT_VERSION


def write_npz(path, arrays: Mapping[str, np.ndarray]) -> None:
    """Like ``np.savez`` but with fixed zip timestamps, so equal arrays give equal bytes."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def save_snapshot(path, table: EmbeddingTable, vocab: Vocab) -> None:
    header = json.dumps({"format": SNAPSHOT_FORMAT, "version": SNAPSHOT_VERSION, "vocab_hash": vocab.hash})
    arrays = {"header": np.array(header), "E": table.E, "tokens": np.array(vocab.itos)}
    if table.Epos is not None:
        arrays["Epos"] = table.Epos
    write_npz(path, arrays)


def load_snapshot(path) -> EmbeddingSnapshot:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != SNAPSHOT_FORMAT:
            raise FormatError(f"not an embedding snapshot: {path}")
        if header.get("version") != SNAPSHOT_VERSION:
            raise FormatError(f"unsupported snapshot version {header.get('version')}")
        return EmbeddingSnapshot(
            E=z["E"].copy(),
            tokens=[str(t) for t in z["tokens"]],
            vocab_hash=header["vocab_hash"],
            Epos=z["Epos"].copy() if "Epos" in z else None,
        )


def init_embeddings(
    strategy: str,
    vocab: Vocab,
    d: int,
    rng: np.random.Generator,
    pos_vocab: Optional[Vocab] = None,
    source: Union[None, EmbeddingSnapshot, PretrainedVectors] = None,
) -> EmbeddingTable:
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown embedding strategy {strategy!r}; choose from {STRATEGIES}")
    E = gaussian(rng, (len(vocab), d))
    Epos = gaussian(rng, (len(pos_vocab), d)) if pos_vocab is not None else None

    if strategy == "fixed":
        return EmbeddingTable(E, trainable=False, Epos=Epos)
    if strategy == "oracle":
        if not isinstance(source, EmbeddingSnapshot):
            raise ContractError("oracle strategy needs an EmbeddingSnapshot")
        if source.vocab_hash != vocab.hash or source.tokens != vocab.itos:
            raise VocabMismatchError(
                f"snapshot vocab {source.vocab_hash} does not match corpus vocab {vocab.hash}"
            )
        if source.E.shape[1] != d:
            raise DimensionError(f"snapshot dimension {source.E.shape[1]} != {d}")
        E = source.E.copy()
        if Epos is not None and source.Epos is not None and source.Epos.shape == Epos.shape:
            Epos = source.Epos.copy()
    elif strategy == "pretrained":
        if not isinstance(source, PretrainedVectors):
            raise ContractError("pretrained strategy needs PretrainedVectors")
        if source.dim != d:
            raise DimensionError(f"pretrained dimension {source.dim} != {d}")
        for token, vec in source.rows.items():
            E[vocab.stoi[token]] = vec
    return EmbeddingTable(E, trainable=True, Epos=Epos)


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------

HISTORY_KEYS = ("all", SourceTag.USER, SourceTag.SYSTEM, SourceTag.KB)


@dataclass
class HistoryBlock:
    ids: np.ndarray   # (B, T, L) int
    pos: np.ndarray   # (B, T, L) int
    mask: np.ndarray  # (B, T) float, 1 where a real utterance sits

    @property
    def steps(self) -> int:
        return self.ids.shape[1]


@dataclass
class Batch:
    labels: np.ndarray
    query_ids: np.ndarray
    query_pos: np.ndarray
    history: Dict[object, HistoryBlock]

    def __len__(self):
        return len(self.labels)


class Featurizer:
    """Turns examples into padded index arrays for a fixed vocabulary and length."""

    def __init__(self, vocab: Vocab, max_len: int, pos_vocab: Optional[Vocab] = None):
        self.vocab = vocab
        self.pos_vocab = pos_vocab
        self.max_len = max_len
        self._cache: Dict[tuple, Tuple[np.ndarray, np.ndarray]] = {}

    def utterance(self, utt: Utterance, key=None) -> Tuple[np.ndarray, np.ndarray]:
        if key is not None and key in self._cache:
            return self._cache[key]
        L = self.max_len
        ids = np.zeros(L, dtype=np.int64)
        pos = np.zeros(L, dtype=np.int64)
        toks = utt.tokens[:L]
        ids[: len(toks)] = self.vocab.encode(toks)
        if self.pos_vocab is not None and utt.pos_tags is not None:
            pos[: len(toks)] = self.pos_vocab.encode(utt.pos_tags[:L])
        elif self.pos_vocab is not None:
            pos[: len(toks)] = 1
        if key is not None:
            self._cache[key] = (ids, pos)
        return ids, pos

    def batch(self, examples: Sequence[DialogueExample]) -> Batch:
        B, L = len(examples), self.max_len
        labels = np.array([ex.label for ex in examples], dtype=np.int64)
        q_ids = np.zeros((B, L), dtype=np.int64)
        q_pos = np.zeros((B, L), dtype=np.int64)
        per_key = {k: [] for k in HISTORY_KEYS}
        for b, ex in enumerate(examples):
            q = ex.query
            q_ids[b], q_pos[b] = self.utterance(q, (ex.dialogue_id, q.global_turn))
            rows = {k: [] for k in HISTORY_KEYS}
            for u in ex.history:
                arrs = self.utterance(u, (ex.dialogue_id, u.global_turn))
                rows["all"].append(arrs)
                rows[u.source].append(arrs)
            for k in HISTORY_KEYS:
                per_key[k].append(rows[k])
        history = {}
        for k in HISTORY_KEYS:
            T = max((len(r) for r in per_key[k]), default=0)
            ids = np.zeros((B, T, L), dtype=np.int64)
            pos = np.zeros((B, T, L), dtype=np.int64)
            mask = np.zeros((B, T))
            for b, r in enumerate(per_key[k]):
                for t, (i, p) in enumerate(r):
                    ids[b, t], pos[b, t] = i, p
                mask[b, : len(r)] = 1.0
            history[k] = HistoryBlock(ids, pos, mask)
        return Batch(labels, q_ids, q_pos, history)
