import itertools
import random
from fractions import Fraction as F

import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linprog

from advres.core import BookingLedger, ClassSpec, Request, SystemConfig
from advres.policies import (
    ICSP,
    AdmitAll,
    DPClass,
    DPInstance,
    DPPolicy,
    RejectAll,
    dp_decide,
    dp_solve,
    icsp_decide,
    make_policy,
    solve_knapsack_lp,
)
from oracles import dp_expectimax, dp_policy_enumeration, lp_vertex_enumeration


# ---------------------------------------------------------------- knapsack LP


def test_slack_capacity_accepts_everything():
    classes = [ClassSpec(1, 1, 3, {(0, 2): 1}), ClassSpec(2, 2, 1, {(1, 1): 1})]
    sol = solve_knapsack_lp(classes, 10, 0.1)
    assert sol.class_alpha == {1: 1.0, 2: 1.0}
    assert sol.lp_objective == pytest.approx(3 * 2 + 1 * 2)
    assert sol.used_load == pytest.approx(4.0)


def test_single_overloaded_class_gets_half():
    eps, C = 0.1, 10
    lam = 2 * (1 - eps) * C / 3  # mean service 3
    sol = solve_knapsack_lp([ClassSpec(1, lam, 2, {(0, 3): 1})], C, eps)
    assert sol.class_alpha[1] == pytest.approx(0.5, abs=1e-12)
    assert sol.lp_objective == pytest.approx(lp_vertex_enumeration([2], [lam * 3], (1 - eps) * C), abs=1e-9)


def test_higher_reward_saturates_exactly():
    eps, C = 0.2, 5
    budget = (1 - eps) * C
    classes = [ClassSpec(1, budget, 2, {(0, 1): 1}), ClassSpec(2, budget / 2, 1, {(1, 2): 1})]
    sol = solve_knapsack_lp(classes, C, eps)
    assert sol.accept_probs() == [1.0, 0.0]
    assert sol.cutoff_class == 1


def test_ties_broken_by_class_id():
    classes = [ClassSpec(2, 8, 1, {(0, 1): 1}), ClassSpec(1, 8, 1, {(0, 1): 1})]
    sol = solve_knapsack_lp(classes, 10, 0.2)
    assert sol.order == (1, 2)
    assert sol.class_alpha == {1: 1.0, 2: 0.0}


def test_types_of_a_class_share_alpha():
    classes = [ClassSpec(1, 10, 1, {(0, 1): F(1, 3), (2, 2): F(2, 3)})]
    sol = solve_knapsack_lp(classes, 5, 0.1)
    assert sol.alpha[(0, 1, 1)] == sol.alpha[(2, 2, 1)] == sol.class_alpha[1]


def random_classes(rng, k_max=6):
    classes = []
    for k in range(1, rng.randint(1, k_max) + 1):
        keys = rng.sample([(d, s) for d in range(3) for s in range(1, 4)], rng.randint(1, 3))
        w = [rng.randint(1, 5) for _ in keys]
        pmf = {key: F(x, sum(w)) for key, x in zip(keys, w)}
        classes.append(ClassSpec(k, rng.uniform(0, 5), rng.choice([rng.uniform(0, 4), 1.0, 2.0]), pmf))
    return classes


def test_greedy_matches_lp_oracles_on_random_instances():
    rng = random.Random(2024)
    for _ in range(200):
        classes = random_classes(rng)
        C, eps = rng.randint(1, 20), rng.uniform(0.001, 0.5)
        sol = solve_knapsack_lp(classes, C, eps)
        budget = (1 - eps) * C
        rewards = [float(c.reward_rate) for c in classes]
        loads = [float(c.load) for c in classes]
        assert sol.lp_objective == pytest.approx(lp_vertex_enumeration(rewards, loads, budget), abs=1e-9)
        res = linprog(
            [-r * l for r, l in zip(rewards, loads)],
            A_ub=[loads], b_ub=[budget], bounds=[(0, 1)] * len(classes), method="highs",
        )
        assert sol.lp_objective == pytest.approx(-res.fun, abs=1e-6)


@given(st.integers(0, 10**6))
def test_lp_solution_invariants(seed):
    rng = random.Random(seed)
    classes = random_classes(rng)
    C, eps = rng.randint(1, 20), rng.uniform(0.001, 0.5)
    sol = solve_knapsack_lp(classes, C, eps)
    used = sum(a * float(c.type_rates()[(d, s)]) * s for (d, s, k), a in sol.alpha.items() for c in classes if c.class_id == k)
    assert used <= (1 - eps) * C + 1e-9
    # Full, then at most one fractional, then zero along the reward order.
    seq = [sol.class_alpha[k] for k in sol.order if float(next(c for c in classes if c.class_id == k).load) > 0]
    stage = 0
    for a in seq:
        kind = 0 if a == 1.0 else (1 if a > 0 else 2)
        assert kind >= stage
        if kind == 1:
            assert stage == 0
        stage = max(stage, kind if kind != 1 else 2)
    assert all(0 <= a <= 1 for a in sol.class_alpha.values())


def test_lp_rejects_bad_inputs():
    with pytest.raises(ValueError):
        solve_knapsack_lp([], 1, 0.1)
    with pytest.raises(ValueError):
        solve_knapsack_lp([ClassSpec(1, 1, 1, {(0, 1): 1})], 1, 0.0)


# ---------------------------------------------------------------- ICSP


class CountingRng:
    def __init__(self, value):
        self.value = value
        self.calls = 0

    def random(self):
        self.calls += 1
        return self.value


def _solution():
    # class 1 full, class 2 fractional (0.5), class 3 rejected
    classes = [
        ClassSpec(1, 4, 3, {(0, 1): 1}),
        ClassSpec(2, 8, 2, {(0, 1): 1}),
        ClassSpec(3, 5, 1, {(0, 1): 1}),
    ]
    return solve_knapsack_lp(classes, 10, 0.2)


def test_solution_fixture_shape():
    sol = _solution()
    assert sol.accept_probs() == [1.0, 0.5, 0.0]
    assert sol.cutoff_class == 2


def test_icsp_rejects_above_cutoff_without_touching_rng():
    rng = CountingRng(0.0)
    req = Request(3, 0.0, 0, 1, 1)
    assert not icsp_decide(req, _solution(), BookingLedger(), 10, rng)
    assert rng.calls == 0


def test_icsp_accepts_full_class_on_empty_ledger():
    rng = CountingRng(0.99)
    assert icsp_decide(Request(1, 0.0, 0, 1, 1), _solution(), BookingLedger(), 1, rng)
    assert rng.calls == 0


def test_icsp_coin_for_fractional_class():
    sol = _solution()
    heads, tails = CountingRng(0.1), CountingRng(0.9)
    assert icsp_decide(Request(2, 0.0, 0, 1, 1), sol, BookingLedger(), 5, heads)
    assert not icsp_decide(Request(2, 0.0, 0, 1, 1), sol, BookingLedger(), 5, tails)
    assert heads.calls == tails.calls == 1


def test_icsp_rejects_when_interval_peaks_at_capacity():
    # Free at the requested start, full later inside the interval.
    led = BookingLedger()
    led.reserve(2, 3)
    led.reserve(2.5, 4)
    led.reserve(2.7, 3.5)
    C = 3
    req = Request(1, 0.0, 1, 3, 1)  # asks for [1, 4)
    assert led.occupancy_at(1) == 0
    assert not icsp_decide(req, _solution(), led, C, CountingRng(0.0))
    assert not AdmitAll().decide(req, led, C, None)
    assert AdmitAll().decide(Request(1, 0.0, 0, 2, 2), led, C, None)


def test_baselines_and_factory():
    cfg = SystemConfig(2, [ClassSpec(1, 1, 1, {(0, 1): 1})])
    assert isinstance(make_policy("admit_all"), AdmitAll)
    assert isinstance(make_policy("reject_all"), RejectAll)
    assert isinstance(make_policy("icsp", cfg), ICSP)
    assert not RejectAll().decide(Request(1, 0, 0, 1, 1), BookingLedger(), 5, None)
    with pytest.raises(ValueError):
        make_policy("oracle")


# ---------------------------------------------------------------- DP


def inst(periods, cap, classes):
    return DPInstance(periods, cap, tuple(DPClass(c["p"], c["r"], c["windows"]) for c in classes))


def test_single_period_single_class():
    p, r = F(3, 7), 5
    oracle = dp_solve(inst(1, 1, [{"p": p, "r": r, "windows": {(0, 1): 1}}]))
    assert oracle.optimal_value == p * r


def test_zero_rewards_give_zero_value():
    classes = [{"p": F(1, 2), "r": 0, "windows": {(0, 2): 1}}, {"p": F(1, 3), "r": 0, "windows": {(1, 1): 1}}]
    oracle = dp_solve(inst(4, 2, classes))
    assert oracle.optimal_value == 0
    assert all(v == 0 for v in oracle._memo.values())


SMALL = [
    {"p": F(2, 5), "r": 3, "windows": {(0, 1): F(1, 2), (1, 2): F(1, 2)}},
    {"p": F(2, 5), "r": 1, "windows": {(0, 2): F(1, 2), (0, 1): F(1, 2)}},
]


def test_four_period_instance_matches_history_tree():
    classes = SMALL
    assert dp_solve(inst(4, 2, classes)).optimal_value == dp_expectimax(4, 2, classes)


def test_micro_instances_match_policy_enumeration():
    two_class = [
        {"p": F(1, 3), "r": 2, "windows": {(0, 2): 1}},
        {"p": F(1, 2), "r": 1, "windows": {(0, 1): 1}},
    ]
    one_window = [{"p": F(3, 5), "r": 1, "windows": {(0, 2): 1}}]
    two_windows = [{"p": F(3, 5), "r": 1, "windows": {(0, 2): F(1, 2), (1, 1): F(1, 2)}}]
    # At most 8 decision nodes each, so at most 256 explicit policies.
    cases = [(2, 1, two_class), (2, 2, two_class), (3, 1, one_window), (2, 1, two_windows)]
    for periods, cap, classes in cases:
        best = dp_policy_enumeration(periods, cap, classes)
        assert dp_solve(inst(periods, cap, classes)).optimal_value == best
        assert dp_expectimax(periods, cap, classes) == best


def random_dp_classes(rng, m_max=2, span=3):
    out = []
    budget = F(1)
    for _ in range(rng.randint(1, m_max)):
        p = F(rng.randint(1, 4), 10)
        if p > budget:
            break
        budget -= p
        keys = rng.sample([(a, n) for a in range(span) for n in range(1, span + 1)], rng.randint(1, 3))
        w = [rng.randint(1, 3) for _ in keys]
        out.append({"p": p, "r": rng.randint(0, 4), "windows": {k: F(x, sum(w)) for k, x in zip(keys, w)}})
    return out


def test_random_small_instances_match_history_tree():
    rng = random.Random(7)
    for _ in range(25):
        periods, cap = rng.randint(1, 5), rng.randint(1, 2)
        classes = random_dp_classes(rng)
        assert dp_solve(inst(periods, cap, classes)).optimal_value == dp_expectimax(periods, cap, classes)


def _solved(seed, periods=5, cap=2):
    rng = random.Random(seed)
    classes = random_dp_classes(rng)
    oracle = dp_solve(inst(periods, cap, classes))
    return oracle, classes


def test_out_of_capacity_window_is_rejected():
    oracle = dp_solve(inst(3, 1, SMALL))
    c = (1, 0, 1)
    assert oracle.critical_reward(1, c, (1, 2)) == float("inf")
    assert not dp_decide(oracle, 1, c, (1, 2), 10**9)


def test_last_period_accepts_any_positive_reward():
    oracle = dp_solve(inst(3, 1, SMALL))
    assert oracle.critical_reward(3, (1, 1, 1), (3, 3)) == 0
    assert dp_decide(oracle, 3, (1, 1, 1), (3, 3), F(1, 10**6))
    assert not dp_decide(oracle, 3, (1, 1, 1), (3, 3), 0)


def test_reward_equal_to_threshold_is_rejected():
    oracle = dp_solve(inst(4, 1, SMALL))
    c = (1, 1, 1, 1)
    R = oracle.critical_reward(1, c, (1, 2))
    assert R > 0
    assert not oracle.decide(1, c, (1, 2), R / 2)
    assert oracle.decide(1, c, (1, 2), R / 2 + F(1, 10**9))


def _nested_windows(periods, t):
    wins = [(a, b) for a in range(t, periods + 1) for b in range(a, periods + 1)]
    return [(w, v) for w in wins for v in wins if v[0] <= w[0] and w[1] <= v[1] and w != v]


@pytest.mark.parametrize("seed", range(8))
def test_critical_reward_grows_with_window(seed):
    oracle, _ = _solved(seed)
    T = oracle.instance.periods
    for t, c in list(oracle.states()):
        for w, v in _nested_windows(T, t):
            assert oracle.critical_reward(t, c, w) <= oracle.critical_reward(t, c, v)


@pytest.mark.parametrize("seed", range(8))
def test_value_monotone_in_capacity(seed):
    oracle, _ = _solved(seed, periods=4, cap=2)
    T = oracle.instance.periods
    for t in range(1, T + 1):
        tails = list(itertools.product(range(3), repeat=T - t + 1))
        for a in tails:
            for b in tails:
                if all(x <= y for x, y in zip(a, b)):
                    ca, cb = (2,) * (t - 1) + a, (2,) * (t - 1) + b
                    assert oracle.value(t, ca) <= oracle.value(t, cb)


@pytest.mark.parametrize("seed", range(10))
def test_lp_bounds_scaled_dp_average(seed):
    rng = random.Random(100 + seed)
    eps = rng.choice([0.01, 0.1, 0.3])
    periods, cap = rng.randint(2, 6), rng.randint(1, 2)
    instance = inst(periods, cap, random_dp_classes(rng))
    V = dp_solve(instance).optimal_value
    lp = solve_knapsack_lp(instance.as_classes(), cap, eps).lp_objective
    assert lp >= (1 - eps) * float(V) / periods - 1e-12


def test_state_guard_names_the_bound():
    big = inst(40, 3, [{"p": F(1, 2), "r": 1, "windows": {(0, 1): F(1, 2), (10, 10): F(1, 2)}}])
    with pytest.raises(ValueError, match="state-space guard"):
        dp_solve(big, max_states=10**6)


def test_threshold_table_rows():
    oracle = dp_solve(inst(3, 1, SMALL))
    rows = oracle.threshold_table()
    assert rows and set(rows[0]) == {"t", "state", "window_start", "window_end", "critical_reward"}
    assert rows[0]["t"] == 1 and rows[0]["state"] == "1 1 1"


def test_instance_validation():
    with pytest.raises(ValueError):
        DPInstance(3, 1, (DPClass(F(3, 5), 1, {(0, 1): 1}), DPClass(F(3, 5), 1, {(0, 1): 1})))
    with pytest.raises(ValueError):
        DPClass(F(1, 2), 1, {(0, 1): F(1, 2)})
    with pytest.raises(ValueError):
        DPClass(F(1, 2), 1, {(0, 0): 1})
    with pytest.raises(ValueError):
        DPInstance(0, 1, ())


def test_window_clipped_at_horizon():
    instance = inst(4, 1, SMALL)
    assert instance.window(3, 1, 2) == (4, 4)
    assert instance.window(4, 1, 2) is None
    assert instance.window(2, 0, 1) == (2, 2)


def test_discretisation_probabilities():
    cfg = SystemConfig(3, [ClassSpec(1, 2.0, 1, {(0, 1): 1}), ClassSpec(2, 1.0, 2, {(2, 2): 1})])
    instance = DPInstance.from_config(cfg, periods=5, delta=0.5)
    # lambda = 3, delta = 1/2: p_k = lambda_k delta / (1 + lambda delta)
    assert instance.classes[0].arrival_prob == pytest.approx(1.0 / 2.5)
    assert instance.classes[1].arrival_prob == pytest.approx(0.5 / 2.5)
    assert dict(instance.classes[1].windows) == {(4, 4): 1}
    with pytest.raises(ValueError):
        DPInstance.from_config(cfg, periods=5, delta=0.75)


def test_from_dict():
    instance = DPInstance.from_dict(
        {"periods": 3, "capacity": 1, "classes": [{"arrival_prob": 0.5, "reward": 2, "windows": [[0, 1, 1.0]]}]}
    )
    assert instance.periods == 3 and instance.classes[0].windows == {(0, 1): 1.0}


def test_dp_policy_reads_capacity_from_ledger():
    oracle = dp_solve(inst(3, 1, SMALL))
    policy = DPPolicy(oracle)
    led = BookingLedger()
    led.reserve(2, 3)  # period 2 is taken
    assert not policy.decide(Request(1, 1, 0, 2, 1), led, 1, None)
    assert policy.decide(Request(1, 3, 0, 1, 2), led, 1, None)
