import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from auction_ltv.policy import (
    ALPHA_GRID,
    PolicyConfig,
    UndefinedQError,
    ZeroDenominatorError,
    base_select,
    contribution_fraction,
    induced_contribution,
    select,
    tune_alpha,
)


def test_base_select_examples():
    # items A, B and the null column
    assert base_select(np.array([[0.2, 0.7, 0.0]]))[0] == 1
    only_null = np.array([[False, False, True]])
    assert base_select(np.array([[0.2, 0.7, 0.0]]), only_null)[0] == 2


def test_base_select_exhaustive_scan():
    rng = np.random.default_rng(0)
    f = rng.random((50, 51))
    mask = rng.random((50, 51)) < 0.5
    mask[:, -1] = True
    got = base_select(f, mask)
    for k in range(50):
        elig = np.flatnonzero(mask[k])
        assert got[k] == elig[np.argmax(f[k, elig])]


def test_select_blend_example():
    f = np.array([[0.9, 0.8]])
    q = np.array([[0.1, 0.9]])
    assert select(f, q, 0.5)[0] == 1
    assert select(f, q, 0.0)[0] == 0


def test_select_undefined_q():
    f = np.array([[0.9, 0.8, 0.0]])
    q = np.array([[np.nan, 0.9, 0.0]])
    with pytest.raises(UndefinedQError):
        select(f, q, 0.5)
    # an ineligible pair may be undefined
    assert select(f, q, 0.5, np.array([[False, True, True]]))[0] == 1


@settings(max_examples=100, deadline=None)
@given(arrays(float, (6, 4), elements=st.floats(0, 10)), arrays(float, (6, 4), elements=st.floats(0, 10)))
def test_endpoint_identities(f, q):
    np.testing.assert_array_equal(select(f, q, 0.0), base_select(f))
    np.testing.assert_array_equal(select(f, q, 1.0), np.argmax(q, axis=1))


def test_contribution_fraction_examples():
    assert contribution_fraction(10.0, 0.03, 0.0) == 0.0
    assert contribution_fraction(10.0, 0.03, 1.0) == 1.0
    frac = contribution_fraction(10.0, 0.03, 0.96)
    assert frac == pytest.approx(0.0288 / (0.4 + 0.0288), rel=1e-12)
    assert frac <= 0.08
    with pytest.raises(ZeroDenominatorError):
        contribution_fraction(0.0, 0.0, 0.5)


def test_contribution_monotone_in_alpha():
    rng = np.random.default_rng(3)
    f = rng.lognormal(2, 0.5, 1000)
    q = rng.random(1000)
    prev = np.zeros(1000)
    for a in ALPHA_GRID:
        cur = contribution_fraction(f, q, a)
        assert np.all(cur >= prev - 1e-15)
        prev = cur


def test_tune_alpha_trivial_cases():
    rng = np.random.default_rng(4)
    f = rng.random((40, 5)) + 0.1
    q = rng.random((40, 5))
    assert tune_alpha(f, q, 1.0) == max(ALPHA_GRID)
    assert tune_alpha(f, np.zeros_like(q), 0.08) == max(ALPHA_GRID)


def test_tune_alpha_feasible_and_maximal():
    rng = np.random.default_rng(5)
    f = 10 * rng.lognormal(0, 0.5, (200, 6))
    q = rng.random((200, 6))
    a = tune_alpha(f, q, 0.08)
    assert induced_contribution(f, q, a).mean() <= 0.08
    larger = [g for g in ALPHA_GRID if g > a]
    assert all(induced_contribution(f, q, g).mean() > 0.08 for g in larger)


def test_tune_alpha_no_feasible_point_reports_zero():
    f = np.array([[1.0, 1.0]])
    q = np.array([[5.0, 5.0]])
    assert tune_alpha(f, q, 0.01, grid=(0.5, 0.9)) == 0.0


def test_policy_config():
    assert PolicyConfig("base", 0.9).effective_alpha == 0.0
    assert PolicyConfig("greedy_q").effective_alpha == 1.0
    with pytest.raises(ValueError):
        PolicyConfig("modified", 1.5)
