"""
Dialog-bAbI style corpora: parsing, per-turn examples, vocabularies, POS lexicon.

File format (one dialogue per block, blocks separated by a blank line)::

    1 hello<TAB>hello what can i help you with today
    2 <SILENCE><TAB>api_call italian rome four cheap
    3 resto_a R_cuisine italian
    4 <SILENCE><TAB>what do you think of this option: resto_a

A line with a tab is a user/system exchange; a line without one is a KB result
triple. This module treats *every* tab-less line as a KB line, which also
covers mDSTC2 exports that follow the same convention.
"""
from __future__ import annotations

import enum
import glob
import hashlib
import logging
import math
import os
import re
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import FormatError, RangeError, UnknownCandidateError

log = logging.getLogger(__name__)

PAD = "<pad>"
UNK = "<unk>"
PAD_TAG = "<pad_tag>"
UNK_TAG = "<unk_tag>"

_TRAILING_PUNCT = ".,!?;:"


class SourceTag(enum.IntEnum):
    USER = 0
    SYSTEM = 1
    KB = 2


def tokenize(text: str) -> List[str]:
    """Lowercase, split on whitespace, split trailing punctuation into tokens."""
    out = []
    for raw in text.lower().split():
        tail = []
        while len(raw) > 1 and raw[-1] in _TRAILING_PUNCT:
            tail.append(raw[-1])
            raw = raw[:-1]
        out.append(raw)
        out.extend(reversed(tail))
    return out


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


# ---------------------------------------------------------------------------
# raw dialogues
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Exchange:
    user: str
    system: str


@dataclass(frozen=True)
class KBLine:
    text: str


RawLine = Union[Exchange, KBLine]


@dataclass(frozen=True)
class RawDialogue:
    lines: Tuple[RawLine, ...]
    start_line: int = 0  # 1-based file line of the first entry, 0 if unknown

    def __eq__(self, other):
        return isinstance(other, RawDialogue) and self.lines == other.lines

    def __hash__(self):
        return hash(self.lines)


_LINE_RE = re.compile(r"^(\d+) ?(.*)$", re.DOTALL)


def parse_dialogs(text: str, path: Optional[str] = None) -> List[RawDialogue]:
    dialogues: List[RawDialogue] = []
    current: List[RawLine] = []
    expected = 1
    start = 0

    def flush():
        nonlocal current, expected
        if current:
            dialogues.append(RawDialogue(tuple(current), start))
        current = []
        expected = 1

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        m = _LINE_RE.match(line.lstrip())
        if m is None:
            raise FormatError("line does not start with a line number", lineno, path)
        number = int(m.group(1))
        if number != expected:
            raise FormatError(
                f"non-monotonic line number {number}, expected {expected}", lineno, path
            )
        if not current:
            start = lineno
        expected += 1
        body = m.group(2)
        if "\t" in body:
            user, system = body.split("\t", 1)
            user, system = user.strip(), system.strip()
            if not user:
                raise FormatError("empty user side of an exchange", lineno, path)
            if not system:
                raise FormatError("empty system side of an exchange", lineno, path)
            current.append(Exchange(user, system))
        else:
            body = body.strip()
            if not body:
                raise FormatError("empty line body", lineno, path)
            current.append(KBLine(body))
    flush()
    return dialogues


def serialize_dialogs(dialogues: Iterable[RawDialogue]) -> str:
    blocks = []
    for d in dialogues:
        rows = []
        for i, line in enumerate(d.lines, start=1):
            if isinstance(line, Exchange):
                rows.append(f"{i} {line.user}\t{line.system}")
            else:
                rows.append(f"{i} {line.text}")
        blocks.append("\n".join(rows))
    return "\n\n".join(blocks) + ("\n" if blocks else "")


# ---------------------------------------------------------------------------
# candidates
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Candidate:
    text: str
    tokens: Tuple[str, ...]


class CandidateSet:
    """Ordered, duplicate-free response list; index lookup by normalized text."""

    def __init__(self, texts: Iterable[str]):
        self.items: List[Candidate] = []
        self._index: Dict[str, int] = {}
        for text in texts:
            text = text.strip()
            if not text:
                continue
            key = normalize(text)
            if key in self._index:
                log.warning("duplicate candidate %r ignored", text)
                continue
            self._index[key] = len(self.items)
            self.items.append(Candidate(text, tuple(tokenize(text))))

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, i) -> Candidate:
        return self.items[i]

    def __contains__(self, text):
        return normalize(text) in self._index

    def index(self, text: str) -> int:
        try:
            return self._index[normalize(text)]
        except KeyError:
            raise UnknownCandidateError(text) from None

    @property
    def texts(self) -> List[str]:
        return [c.text for c in self.items]


_NUMBERED = re.compile(r"^\d+ \S")


def load_candidates(text: str, numbered: Optional[bool] = None) -> CandidateSet:
    """One response per line. The dialog-bAbI release prefixes each line with
    ``"1 "``; that prefix is stripped when every line carries it (or when
    ``numbered`` is true)."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if numbered is None:
        numbered = bool(lines) and all(_NUMBERED.match(ln) for ln in lines)
    if numbered:
        lines = [ln.split(" ", 1)[1] for ln in lines]
    return CandidateSet(lines)


def candidates_from_dialogues(dialogues: Iterable[RawDialogue]) -> CandidateSet:
    return CandidateSet(
        line.system for d in dialogues for line in d.lines if isinstance(line, Exchange)
    )


# ---------------------------------------------------------------------------
# examples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Utterance:
    source: SourceTag
    tokens: Tuple[str, ...]
    global_turn: int
    source_turn: int
    pos_tags: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if not self.tokens:
            raise FormatError("utterance has no tokens")
        if self.pos_tags is not None and len(self.pos_tags) != len(self.tokens):
            raise FormatError("pos_tags not aligned with tokens")


@dataclass(frozen=True)
class DialogueExample:
    dialogue_id: int
    turn: int
    history: Tuple[Utterance, ...]
    label: int

    @property
    def query(self) -> Utterance:
        return self.history[self.query_position]

    @property
    def query_position(self) -> int:
        for i in range(len(self.history) - 1, -1, -1):
            if self.history[i].source is SourceTag.USER:
                return i
        raise ValueError("history has no user utterance")

    def by_source(self) -> Dict[SourceTag, List[Utterance]]:
        return split_history(self.history)


def split_history(history: Sequence[Utterance]) -> Dict[SourceTag, List[Utterance]]:
    """Stable partition by source; every tag is present (possibly empty)."""
    parts: Dict[SourceTag, List[Utterance]] = {tag: [] for tag in SourceTag}
    for utt in history:
        parts[utt.source].append(utt)
    return parts


def annotate(tokens: Sequence[str], lexicon: Mapping[str, str]) -> Tuple[str, ...]:
    return tuple(lexicon.get(t, UNK_TAG) for t in tokens)


def build_examples(
    dialogues: Sequence[RawDialogue],
    candidates: CandidateSet,
    first_dialogue_id: int = 0,
    pos_lexicon: Optional[Mapping[str, str]] = None,
) -> List[DialogueExample]:
    """One example per system turn; history holds everything said before it."""
    examples = []
    for offset, dialogue in enumerate(dialogues):
        did = first_dialogue_id + offset
        history: List[Utterance] = []
        counters = {tag: 0 for tag in SourceTag}
        turn = 0

        def utter(source, text):
            counters[source] += 1
            toks = tuple(tokenize(text))
            tags = annotate(toks, pos_lexicon) if pos_lexicon is not None else None
            return Utterance(source, toks, len(history) + 1, counters[source], tags)

        for line in dialogue.lines:
            if isinstance(line, KBLine):
                history.append(utter(SourceTag.KB, line.text))
                continue
            turn += 1
            history.append(utter(SourceTag.USER, line.user))
            label = candidates.index(line.system)
            examples.append(DialogueExample(did, turn, tuple(history), label))
            history.append(utter(SourceTag.SYSTEM, line.system))
    return examples


# ---------------------------------------------------------------------------
# vocabularies
# ---------------------------------------------------------------------------

class Vocab:
    """Token <-> index map with reserved padding (0) and unknown (1) entries."""

    def __init__(self, tokens: Iterable[str] = (), pad: str = PAD, unk: str = UNK):
        self.pad, self.unk = pad, unk
        self.itos: List[str] = [pad, unk]
        self.stoi: Dict[str, int] = {pad: 0, unk: 1}
        for t in tokens:
            self.add(t)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __getitem__(self, token) -> int:
        return self.stoi.get(token, 1)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def encode(self, tokens: Iterable[str]) -> List[int]:
        return [self.stoi.get(t, 1) for t in tokens]

    def as_dict(self) -> Dict[str, int]:
        return dict(self.stoi)

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]


def build_vocab(
    examples: Iterable[DialogueExample], candidates: Iterable[Candidate] = (), min_count: int = 1
) -> Vocab:
    """PAD=0, UNK=1, then tokens in first-occurrence order (history, then candidates)."""
    order: Dict[str, int] = {}

    def see(tokens):
        for t in tokens:
            order[t] = order.get(t, 0) + 1

    seen_utts = set()
    for ex in examples:
        for utt in ex.history:
            # examples of one dialogue share history prefixes; count each utterance once
            key = (ex.dialogue_id, utt.global_turn)
            if key in seen_utts:
                continue
            seen_utts.add(key)
            see(utt.tokens)
    for cand in candidates:
        see(cand.tokens)
    return Vocab(t for t, n in order.items() if n >= min_count)


def load_pos_lexicon(text: str, path: Optional[str] = None) -> Dict[str, str]:
    lexicon: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rstrip("\r\n").split("\t")
        if len(parts) != 2 or not parts[0].strip() or not parts[1].strip():
            raise FormatError("expected 'token<TAB>tag'", lineno, path)
        token, tag = parts[0].strip().lower(), parts[1].strip()
        lexicon.setdefault(token, tag)
    return lexicon


def build_pos_vocab(lexicon: Mapping[str, str]) -> Vocab:
    return Vocab(dict.fromkeys(lexicon.values()), pad=PAD_TAG, unk=UNK_TAG)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Corpus:
    train: Tuple[DialogueExample, ...]
    valid: Tuple[DialogueExample, ...]
    test: Tuple[DialogueExample, ...]
    candidates: CandidateSet
    vocab: Vocab
    pos_lexicon: Optional[Dict[str, str]] = None
    pos_vocab: Optional[Vocab] = None
    name: str = "corpus"

    def split(self, name: str) -> Tuple[DialogueExample, ...]:
        if name not in ("train", "valid", "test"):
            raise KeyError(name)
        return getattr(self, name)

    @property
    def n_candidates(self) -> int:
        return len(self.candidates)


def make_corpus(
    train: Sequence[RawDialogue],
    valid: Sequence[RawDialogue],
    test: Sequence[RawDialogue],
    candidates: Optional[CandidateSet] = None,
    pos_lexicon: Optional[Mapping[str, str]] = None,
    min_count: int = 1,
    name: str = "corpus",
) -> Corpus:
    if candidates is None:
        candidates = candidates_from_dialogues(list(train) + list(valid) + list(test))
    lex = dict(pos_lexicon) if pos_lexicon is not None else None
    tr = build_examples(train, candidates, 0, lex)
    va = build_examples(valid, candidates, len(train), lex)
    te = build_examples(test, candidates, len(train) + len(valid), lex)
    vocab = build_vocab(tr, candidates, min_count)
    return Corpus(
        tuple(tr), tuple(va), tuple(te), candidates, vocab,
        lex, build_pos_vocab(lex) if lex is not None else None, name,
    )


def _read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


_SPLIT_PATTERNS = {
    "train": ("*trn*.txt", "*train*.txt"),
    "valid": ("*dev*.txt", "*valid*.txt"),
    "test": ("*tst*.txt", "*test*.txt"),
}


def find_corpus_files(directory: str) -> Dict[str, str]:
    """Locate train/valid/test dialogue files and the candidates file in a directory."""
    found = {}
    for split, patterns in _SPLIT_PATTERNS.items():
        hits = sorted(
            {p for pat in patterns for p in glob.glob(os.path.join(directory, pat))
             if "oov" not in os.path.basename(p).lower()
             and "candidates" not in os.path.basename(p).lower()}
        )
        if len(hits) != 1:
            raise FormatError(
                f"expected exactly one {split} file in {directory}, found {len(hits)}: {hits}"
            )
        found[split] = hits[0]
    cands = sorted(glob.glob(os.path.join(directory, "*candidates*.txt")))
    if len(cands) > 1:
        raise FormatError(f"several candidate files in {directory}: {cands}")
    if cands:
        found["candidates"] = cands[0]
    lex = sorted(glob.glob(os.path.join(directory, "*pos*.tsv")))
    if len(lex) == 1:
        found["pos_lexicon"] = lex[0]
    return found


def load_corpus(directory: str, pos_lexicon_path: Optional[str] = None, min_count: int = 1) -> Corpus:
    files = find_corpus_files(directory)
    splits = {s: parse_dialogs(_read(files[s]), files[s]) for s in ("train", "valid", "test")}
    candidates = None
    if "candidates" in files:
        candidates = load_candidates(_read(files["candidates"]))
    lex_path = pos_lexicon_path or files.get("pos_lexicon")
    lexicon = load_pos_lexicon(_read(lex_path), lex_path) if lex_path else None
    return make_corpus(
        splits["train"], splits["valid"], splits["test"], candidates, lexicon,
        min_count, name=os.path.basename(os.path.normpath(directory)),
    )


def group_by_dialogue(examples: Iterable[DialogueExample]) -> Dict[int, List[DialogueExample]]:
    groups: Dict[int, List[DialogueExample]] = {}
    for ex in examples:
        groups.setdefault(ex.dialogue_id, []).append(ex)
    return groups


def subsample(examples: Sequence[DialogueExample], fraction: float, seed: int) -> List[DialogueExample]:
    """Keep ceil(fraction * #dialogues) whole dialogues, drawn uniformly with ``seed``."""
    if not (0.0 < fraction <= 1.0):
        raise RangeError(f"fraction must be in (0, 1], got {fraction}")
    groups = group_by_dialogue(examples)
    ids = sorted(groups)
    if fraction == 1.0:
        return list(examples)
    # guard against 0.3 * 10 == 3.0000000000000004
    k = min(len(ids), math.ceil(fraction * len(ids) - 1e-9))
    rng = np.random.default_rng(seed)
    chosen = set(np.asarray(ids)[rng.choice(len(ids), size=k, replace=False)].tolist())
    return [ex for ex in examples if ex.dialogue_id in chosen]
