"""
Retrieval baselines.

``TfIdfIndex`` ranks candidates by TF-IDF weighted cosine similarity against the
whole dialogue history so far (KB lines included). ``Q2AMap`` answers with the
response most often seen after the exact same user utterance in training.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .corpus import CandidateSet, DialogueExample
from .errors import ContractError


def idf_weight(n_docs: int, df: int) -> float:
    """``ln(N / (1 + df)) + 1``."""
    return math.log(n_docs / (1.0 + df)) + 1.0


def context_tokens(example: DialogueExample) -> List[str]:
    return [tok for utt in example.history for tok in utt.tokens]


@dataclass(frozen=True)
class TfIdfIndex:
    idf: Mapping[str, float]
    default_idf: float
    candidate_vectors: Tuple[Dict[str, float], ...]
    n_docs: int

    def weigh(self, tokens: Sequence[str]) -> Dict[str, float]:
        """Raw-count tf times idf, L2-normalized (empty dict for a zero vector)."""
        counts = Counter(tokens)
        vec = {t: c * self.idf.get(t, self.default_idf) for t, c in counts.items()}
        norm = math.sqrt(sum(v * v for v in vec.values()))
        if norm == 0.0:
            return {}
        return {t: v / norm for t, v in vec.items()}

    def similarities(self, tokens: Sequence[str]) -> np.ndarray:
        q = self.weigh(tokens)
        return np.array([sum(w * c.get(t, 0.0) for t, w in q.items()) for c in self.candidate_vectors])

    def rank(self, tokens: Sequence[str]) -> List[int]:
        sims = self.similarities(tokens)
        # stable sort on -sim keeps lower indices first among ties
        return [int(i) for i in np.argsort(-sims, kind="stable")]

    def predict(self, example: DialogueExample) -> int:
        return self.rank(context_tokens(example))[0]


def build_tfidf(train: Sequence[DialogueExample], candidates: CandidateSet) -> TfIdfIndex:
    """Document collection = each training context plus each candidate."""
    docs = [set(context_tokens(ex)) for ex in train] + [set(c.tokens) for c in candidates]
    df = Counter(t for doc in docs for t in doc)
    n = len(docs)
    idf = {t: idf_weight(n, k) for t, k in df.items()}
    index = TfIdfIndex(idf, idf_weight(n, 0), (), n)
    vectors = tuple(index.weigh(c.tokens) for c in candidates)
    return TfIdfIndex(idf, idf_weight(n, 0), vectors, n)


def tfidf_rank(tokens: Sequence[str], index: TfIdfIndex) -> List[int]:
    return index.rank(tokens)


@dataclass(frozen=True)
class Q2AMap:
    table: Mapping[Tuple[str, ...], Mapping[int, int]]
    global_counts: Mapping[int, int]

    @staticmethod
    def _mode(counts: Mapping[int, int]) -> int:
        return min(counts, key=lambda idx: (-counts[idx], idx))

    def predict_key(self, key: Tuple[str, ...]) -> int:
        if not self.global_counts:
            raise ContractError("Q2A map was trained on an empty set")
        counts = self.table.get(tuple(key))
        return self._mode(counts if counts else self.global_counts)

    def predict(self, example: DialogueExample) -> int:
        return self.predict_key(example.query.tokens)


def q2a_train(train: Sequence[DialogueExample]) -> Q2AMap:
    table: Dict[Tuple[str, ...], Counter] = {}
    total: Counter = Counter()
    for ex in train:
        table.setdefault(tuple(ex.query.tokens), Counter())[ex.label] += 1
        total[ex.label] += 1
    return Q2AMap({k: dict(v) for k, v in table.items()}, dict(total))


def q2a_predict(query: Sequence[str], q2a: Q2AMap) -> int:
    return q2a.predict_key(tuple(query))


def baseline_predictions(model, examples: Sequence[DialogueExample]) -> np.ndarray:
    return np.array([model.predict(ex) for ex in examples], dtype=int)
