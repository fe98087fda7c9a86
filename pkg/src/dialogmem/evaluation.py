"""Turn-level accuracy and paired significance tests."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy import stats

from .errors import ContractError

SIGNIFICANCE_LEVEL = 0.01


@dataclass(frozen=True)
class AccuracyResult:
    correct: int
    total: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.total


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. the lowest candidate id
    return np.argmax(np.asarray(scores), axis=-1)


def turn_accuracy(predictions, labels: Sequence[int]) -> AccuracyResult:
    """``predictions`` is either (N, c) scores or N predicted indices."""
    pred = np.asarray(predictions)
    labels = np.asarray(labels)
    if pred.ndim == 2:
        pred = argmax_lowest(pred)
    if len(labels) == 0:
        raise ContractError("accuracy of an empty set is undefined")
    if pred.shape != labels.shape:
        raise ContractError(f"{pred.shape[0]} predictions for {labels.shape[0]} labels")
    return AccuracyResult(int(np.sum(pred == labels)), int(labels.size))


@dataclass(frozen=True)
class PairedComparison:
    pairs: Tuple[Tuple[float, float], ...]
    t: float
    p: float
    degenerate: bool = False

    @property
    def mean_difference(self) -> float:
        return float(np.mean([a - b for a, b in self.pairs]))

    @property
    def significant(self) -> bool:
        return self.p < SIGNIFICANCE_LEVEL


def paired_ttest(pairs: Sequence[Tuple[float, float]]) -> PairedComparison:
    """Two-sided paired t-test on the differences ``a - b``.

    Zero-variance differences are handled explicitly: all-zero gives
    ``t = 0, p = 1``; a constant non-zero difference gives ``p = 0`` and is
    flagged ``degenerate`` (t is reported as +/-inf).
    """
    pairs = tuple((float(a), float(b)) for a, b in pairs)
    n = len(pairs)
    if n < 2:
        raise ContractError("paired t-test needs at least two pairs")
    diffs = np.array([a - b for a, b in pairs])
    mean = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    if sd == 0.0 or sd < 1e-15 * max(1.0, abs(mean)):
        if mean == 0.0:
            return PairedComparison(pairs, 0.0, 1.0)
        return PairedComparison(pairs, math.copysign(math.inf, mean), 0.0, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return PairedComparison(pairs, t, min(1.0, p))


def mean_std(values: Sequence[float]) -> Tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        return math.nan, math.nan
    if np.all(arr == arr[0]):
        return float(arr[0]), 0.0
    return float(arr.mean()), float(arr.std(ddof=1)) if arr.size > 1 else 0.0
