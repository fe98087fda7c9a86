import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from dialogmem.errors import ContractError
from dialogmem.evaluation import mean_std, paired_ttest, turn_accuracy


def t_two_sided_p(t, df, n=200_001):
    """Numerical two-sided tail of Student's t by integrating the density."""
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    x = np.linspace(0.0, abs(t), n)
    body = np.trapezoid(c * (1 + x * x / df) ** (-(df + 1) / 2), x)
    return 1.0 - 2.0 * body


def test_three_of_four():
    r = turn_accuracy([0, 1, 2, 0], [0, 1, 2, 3])
    assert (r.correct, r.total, r.accuracy) == (3, 4, 0.75)


def test_all_correct():
    assert turn_accuracy([1, 2], [1, 2]).accuracy == 1.0


def test_uniform_scores_pick_lowest_index():
    assert turn_accuracy(np.full((5, 4), 0.25), [0] * 5).accuracy == 1.0


def test_empty_and_misaligned():
    with pytest.raises(ContractError):
        turn_accuracy([], [])
    with pytest.raises(ContractError):
        turn_accuracy([1, 2], [1])


@given(st.integers(1, 40), st.integers(2, 6), st.integers(0, 10_000))
def test_accuracy_matches_recount(n, c, seed):
    r = np.random.default_rng(seed)
    scores = r.integers(0, 3, size=(n, c)).astype(float)  # plenty of ties
    labels = r.integers(0, c, size=n)
    hits = 0
    for row, lab in zip(scores, labels):
        best = 0
        for j in range(1, c):
            if row[j] > row[best]:
                best = j
        hits += best == lab
    assert turn_accuracy(scores, labels).correct == hits


def test_ttest_identical_pairs():
    res = paired_ttest([(0.8, 0.8), (0.7, 0.7), (0.9, 0.9)])
    assert (res.t, res.p, res.significant) == (0.0, 1.0, False)


def test_ttest_constant_difference_is_degenerate():
    res = paired_ttest([(0.9, 0.8), (0.8, 0.7), (0.7, 0.6)])
    assert res.degenerate and res.p == 0.0 and res.significant and res.t == math.inf


def test_ttest_hand_statistic():
    # d = [0.02, 0.05, 0.03, 0.06]; mean 0.04, sum of squared deviations 0.001,
    # s = sqrt(0.001 / 3) = 0.0182574, t = 0.04 / (s / 2) = 4.38178
    res = paired_ttest([(0.52, 0.5), (0.55, 0.5), (0.53, 0.5), (0.56, 0.5)])
    assert res.t == pytest.approx(4.38178, abs=1e-5)
    # table values for 3 dof: t(0.05) = 3.182, t(0.02) = 4.541, so 0.02 < p < 0.05
    assert 0.02 < res.p < 0.05 and not res.significant
    assert res.p == pytest.approx(t_two_sided_p(res.t, 3), abs=1e-6)


def test_ttest_needs_two_pairs():
    with pytest.raises(ContractError):
        paired_ttest([(0.5, 0.4)])


@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=10))
def test_ttest_antisymmetric(pairs):
    a = paired_ttest(pairs)
    b = paired_ttest([(y, x) for x, y in pairs])
    assert a.p == pytest.approx(b.p, abs=1e-12)
    if math.isfinite(a.t):
        assert a.t == pytest.approx(-b.t, abs=1e-9)
    else:
        assert b.t == -a.t


def test_mean_std_sample():
    mean, std = mean_std([0.1, 0.2, 0.3])
    assert mean == pytest.approx(0.2) and std == pytest.approx(0.1)
    assert mean_std([0.4]) == (0.4, 0.0)
