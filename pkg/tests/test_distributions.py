import math
from fractions import Fraction as F

import pytest
from hypothesis import given
from hypothesis import strategies as st

from advres.core import ClassSpec, uniform_pmf
from advres.distributions import (
    MergedDistribution,
    merge_classes,
    pre_arrival_rate,
    piecewise_prearrival_profile,
    profile_rate_at,
    single_class,
)


def two_point(gamma, lam):
    return single_class({(0, 1): gamma, (1, 1): 1 - gamma}, lam)


def test_single_class_merge_is_identity():
    pmf = {(0, 1): F(1, 3), (2, 2): F(2, 3)}
    m = merge_classes([ClassSpec(1, 5, 1, pmf)])
    assert m.joint_pmf == pmf
    assert m.total_rate == 5


def test_symmetric_two_class_merge():
    m = merge_classes([ClassSpec(1, 2, 1, {(0, 1): 1}), ClassSpec(2, 2, 1, {(1, 1): 1})])
    assert m.delay_pmf == {0: F(1, 2), 1: F(1, 2)}


def test_three_class_base_case_marginals():
    # Rates 0.1, 0.45, 0.45 of lambda = 30; weighted sums worked by hand:
    # (0,1): 1/10*1/2 + 9/20*1 = 1/2, (1,2): 9/20*1/4 = 9/80, (2,3): 1/10*1/2 + 9/20*3/4 = 31/80.
    classes = [
        ClassSpec(1, 3, 15, {(0, 1): F(1, 2), (2, 3): F(1, 2)}),
        ClassSpec(2, F(27, 2), 10, {(0, 1): 1}),
        ClassSpec(3, F(27, 2), 8, {(1, 2): F(1, 4), (2, 3): F(3, 4)}),
    ]
    m = merge_classes(classes)
    assert m.total_rate == 30
    assert m.joint_pmf == {(0, 1): F(1, 2), (1, 2): F(9, 80), (2, 3): F(31, 80)}
    assert m.delay_pmf == {0: F(1, 2), 1: F(9, 80), 2: F(31, 80)}
    assert m.duration_pmf == {1: F(1, 2), 2: F(9, 80), 3: F(31, 80)}
    assert m.rho == 30 * (F(1, 2) + 2 * F(9, 80) + 3 * F(31, 80))
    assert m.max_delay == 2 and m.max_duration == 3


def test_zero_rate_merge_rejected():
    with pytest.raises(ValueError):
        merge_classes([ClassSpec(1, 0, 1, {(0, 1): 1})])


def test_zero_rate_class_is_ignored():
    m = merge_classes([ClassSpec(1, 0, 1, {(5, 5): 1}), ClassSpec(2, 1, 1, {(0, 1): 1})])
    assert m.joint_pmf == {(0, 1): 1}


def test_conditional_pmf_undefined_for_missing_duration():
    m = two_point(F(1, 2), 10)
    with pytest.raises(KeyError):
        m.conditional_delay_pmf(2)
    with pytest.raises(KeyError):
        pre_arrival_rate(m, 0, 2)


def test_prearrival_rate_empty_sum_is_full_rate():
    m = single_class({(0, 2): F(1, 2), (3, 1): F(1, 2)}, 8)
    # d < s: every set-s customer ending in (d, d+1] started before now.
    assert pre_arrival_rate(m, 0, 1) == F(1, 2) * 8
    assert pre_arrival_rate(m, 1, 2) == F(1, 2) * 8
    # d - s >= u: nothing left to book.
    assert pre_arrival_rate(m, 4, 1) == 0
    assert pre_arrival_rate(m, 5, 2) == 0


def test_two_point_rates_match_three_piece_profile():
    gamma, lam = F(3, 10), 40
    m = two_point(gamma, lam)
    # Service ends in (1, 2] means start in (0, 1]: booked only by delay-1 customers.
    assert pre_arrival_rate(m, 1, 1) == (1 - gamma) * lam
    assert pre_arrival_rate(m, 2, 1) == 0
    pieces = piecewise_prearrival_profile(m)
    assert pieces == [((-math.inf, 0), lam), ((0, 1), (1 - gamma) * lam), ((1, math.inf), 0)]
    assert profile_rate_at(pieces, -3.0) == lam
    assert profile_rate_at(pieces, 0.0) == lam
    assert profile_rate_at(pieces, 0.5) == (1 - gamma) * lam
    assert profile_rate_at(pieces, 1.0) == (1 - gamma) * lam
    assert profile_rate_at(pieces, 1.5) == 0


def test_prearrival_rate_before_slot_is_full_rate():
    m = single_class({(0, 3): F(1, 4), (2, 3): F(3, 4)}, 12)
    for d in range(3):
        assert pre_arrival_rate(m, d, 3) == 12
    assert pre_arrival_rate(m, 3, 3) == 12 * F(3, 4)
    assert pre_arrival_rate(m, 4, 3) == 12 * F(3, 4)
    assert pre_arrival_rate(m, 5, 3) == 0


def test_all_immediate_profile_is_zero_after_now():
    m = single_class({(0, 1): 1}, 7)
    pieces = piecewise_prearrival_profile(m)
    assert profile_rate_at(pieces, 0.25) == 0
    assert profile_rate_at(pieces, 9.0) == 0


def test_uniform_delay_gives_linear_staircase():
    u, lam = 4, 10
    m = single_class(uniform_pmf(range(u + 1), [1]), lam)
    pieces = piecewise_prearrival_profile(m)
    for d in range(1, u + 1):
        assert pieces[d] == ((d - 1, d), lam * (1 - F(d, u + 1)))
    steps = [rate for _, rate in pieces]
    diffs = {steps[i] - steps[i + 1] for i in range(0, u + 1)}
    assert diffs == {F(lam, u + 1)}


def test_per_service_profile_keys():
    m = single_class({(0, 1): F(1, 2), (1, 2): F(1, 2)}, 6)
    prof = piecewise_prearrival_profile(m, per_service=True)
    assert set(prof) == {1, 2}
    assert prof[2][0][1] == 3


@st.composite
def pmfs(draw):
    keys = draw(st.lists(st.tuples(st.integers(0, 4), st.integers(1, 3)), min_size=1, max_size=6, unique=True))
    weights = draw(st.lists(st.integers(1, 9), min_size=len(keys), max_size=len(keys)))
    total = sum(weights)
    return {k: F(w, total) for k, w in zip(keys, weights)}


@given(pmfs(), st.integers(1, 50))
def test_rates_deplete_with_slot(pmf, lam):
    m = single_class(pmf, lam)
    for s in m.duration_pmf:
        rates = [pre_arrival_rate(m, d, s) for d in range(0, m.max_delay + s + 2)]
        assert all(a >= b for a, b in zip(rates, rates[1:]))
        assert rates[-1] == 0


@given(pmfs(), st.integers(1, 50))
def test_rate_conservation_at_slot_zero(pmf, lam):
    m = single_class(pmf, lam)
    assert sum(pre_arrival_rate(m, 0, s) for s in m.duration_pmf) == lam


@given(st.lists(st.tuples(pmfs(), st.integers(1, 20)), min_size=1, max_size=3))
def test_merge_commutes_with_prearrival_rate(parts):
    classes = [ClassSpec(i + 1, lam, 1, pmf) for i, (pmf, lam) in enumerate(parts)]
    merged = merge_classes(classes)
    assert sum(merged.joint_pmf.values()) == 1
    for s in merged.duration_pmf:
        assert sum(merged.conditional_delay_pmf(s).values()) == 1
        for d in range(0, merged.max_delay + s + 1):
            per_class = 0
            for pmf, lam in parts:
                one = single_class(pmf, lam)
                if one.duration_pmf.get(s, 0) > 0:
                    per_class += pre_arrival_rate(one, d, s)
            assert pre_arrival_rate(merged, d, s) == per_class


@given(pmfs())
def test_marginals_are_row_and_column_sums(pmf):
    m = MergedDistribution(3, pmf)
    for d, g in m.delay_pmf.items():
        assert g == sum(p for (dd, _), p in pmf.items() if dd == d)
    for s, k in m.duration_pmf.items():
        assert k == sum(p for (_, ss), p in pmf.items() if ss == s)


def test_float_inputs_fall_back_gracefully():
    m = single_class({(0, 1): 0.3, (1, 1): 0.7}, 10.0)
    assert pre_arrival_rate(m, 1, 1) == pytest.approx(7.0, abs=1e-12)
