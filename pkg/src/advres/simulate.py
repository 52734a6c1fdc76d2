"""Discrete-event simulation of the loss system with advanced reservation.

Arrivals are generated up front from the merged Poisson stream (they do
not depend on the policy), then replayed against a policy and a booking
ledger.  The coupled variant replays the same stream against an
infinite-capacity twin as well, which gives virtual blocking estimates on
identical sample paths.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .core import BookingLedger, Request, SystemConfig
from .policies import (
    ICSP,
    AdmitAll,
    DPInstance,
    DPPolicy,
    Policy,
    dp_solve,
    make_policy,
    solve_knapsack_lp,
)

N_BATCHES = 20
GC_EVERY = 256


@dataclass
class CellStats:
    offered: int
    accepted: int
    blocking: float
    std_error: float


@dataclass
class VirtualStats:
    offered: int
    blocked: int
    estimate: float
    std_error: float


@dataclass
class SimReport:
    policy: str
    seed: int
    horizon: float
    warmup: float
    capacity: int
    cells: dict  # (d, s, class_id) -> CellStats
    revenue_rate: float
    revenue_se: float
    reward_tally: float
    virtual: dict = field(default_factory=dict)  # (d, s) -> VirtualStats
    accepted_ids: np.ndarray = field(default=None, repr=False)
    peak_occupancy: int = 0
    n_arrivals: int = 0

    @property
    def effective_horizon(self) -> float:
        return self.horizon - self.warmup

    def blocking(self, d, s, k):
        cell = self.cells.get((d, s, k))
        return None if cell is None else cell.blocking

    def rows(self) -> list[dict]:
        out = []
        for (d, s, k), cell in sorted(self.cells.items()):
            v = self.virtual.get((d, s))
            out.append(
                {
                    "d": d,
                    "s": s,
                    "class_id": k,
                    "offered": cell.offered,
                    "accepted": cell.accepted,
                    "blocking": cell.blocking,
                    "blocking_se": cell.std_error,
                    "virtual_blocking": None if v is None else v.estimate,
                    "virtual_se": None if v is None else v.std_error,
                }
            )
        return out

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "seed": self.seed,
            "horizon": self.horizon,
            "warmup": self.warmup,
            "capacity": self.capacity,
            "revenue_rate": self.revenue_rate,
            "revenue_se": self.revenue_se,
            "reward_tally_rate": self.reward_tally / self.effective_horizon,
            "n_arrivals": self.n_arrivals,
            "peak_occupancy": self.peak_occupancy,
            "cells": self.rows(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


REPORT_COLUMNS = [
    "d", "s", "class_id", "offered", "accepted", "blocking", "blocking_se",
    "virtual_blocking", "virtual_se",
]


def warmup_length(config: SystemConfig) -> float:
    """Warm-up: the configured fraction of the horizon, never under 5 (u + v)."""
    w = max(config.warmup_fraction * config.horizon, 5.0 * (config.max_delay + config.max_duration))
    if w >= config.horizon:
        raise ValueError(f"horizon {config.horizon} does not exceed the warm-up {w}")
    return w


@dataclass
class ArrivalStream:
    times: np.ndarray
    classes: np.ndarray
    delays: np.ndarray
    durations: np.ndarray

    def __len__(self):
        return len(self.times)


def generate_arrivals(config: SystemConfig, rng) -> ArrivalStream:
    lam = config.total_rate
    if lam <= 0:
        empty = np.empty(0, dtype=np.int64)
        return ArrivalStream(np.empty(0), empty, empty, empty)
    gaps = []
    t = 0.0
    block = max(1024, int(lam * config.horizon * 1.05) + 64)
    while t < config.horizon:
        g = rng.exponential(1.0 / lam, block)
        gaps.append(g)
        t += float(g.sum())
    times = np.cumsum(np.concatenate(gaps))
    times = times[times < config.horizon]
    n = len(times)
    rates = np.array([float(c.arrival_rate) for c in config.classes])
    idx = rng.choice(len(config.classes), size=n, p=rates / rates.sum())
    ids = np.array([c.class_id for c in config.classes])
    delays = np.zeros(n, dtype=np.int64)
    durations = np.zeros(n, dtype=np.int64)
    for j, c in enumerate(config.classes):
        where = np.flatnonzero(idx == j)
        types = list(c.joint_pmf)
        probs = np.array([float(p) for p in c.joint_pmf.values()])
        pick = rng.choice(len(types), size=where.size, p=probs / probs.sum())
        delays[where] = np.array([d for d, _ in types])[pick]
        durations[where] = np.array([s for _, s in types])[pick]
    return ArrivalStream(times, ids[idx], delays, durations)


def _streams(seed):
    arrivals, coins = np.random.SeedSequence(seed).spawn(2)
    return np.random.default_rng(arrivals), np.random.default_rng(coins)


def _ratio_se(num, den):
    """Batch-means standard error of ``sum(num) / sum(den)``."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    total = den.sum()
    if total <= 0:
        return 0.0
    ratio = num.sum() / total
    keep = den > 0
    b = int(keep.sum())
    if b < 2:
        return 0.0
    resid = num[keep] - ratio * den[keep]
    return float(math.sqrt((resid**2).sum() / (b * (b - 1))) / den[keep].mean())


def _simulate(config, policy, seed, twin=False):
    arr_rng, coin_rng = _streams(seed)
    stream = generate_arrivals(config, arr_rng)
    C = config.capacity
    H = config.horizon
    warm = warmup_length(config)
    batch_len = (H - warm) / N_BATCHES
    reward_of = {c.class_id: float(c.reward_rate) for c in config.classes}

    ledger = BookingLedger()
    shadow = BookingLedger() if twin else None
    offered: dict = {}
    accepted: dict = {}
    v_offered: dict = {}
    v_blocked: dict = {}
    revenue = np.zeros(N_BATCHES)
    tally = 0.0
    peak = 0
    accepted_ids = []

    times = stream.times.tolist()
    classes = stream.classes.tolist()
    delays = stream.delays.tolist()
    durations = stream.durations.tolist()
    for i in range(len(times)):
        t = times[i]
        k, d, s = classes[i], delays[i], durations[i]
        start = t + d
        end = start + s
        if i % GC_EVERY == 0:
            ledger.release_before(t)
            if twin:
                shadow.release_before(t)
        counted = t >= warm
        b = min(int((t - warm) / batch_len), N_BATCHES - 1) if counted else -1
        if twin:
            twin_max = shadow.max_occupancy(start, end)
            shadow.reserve(start, end)
            if counted:
                key = (d, s)
                if key not in v_offered:
                    v_offered[key] = [0] * N_BATCHES
                    v_blocked[key] = [0] * N_BATCHES
                v_offered[key][b] += 1
                if twin_max >= C:
                    v_blocked[key][b] += 1
        ok = policy.decide(Request(k, t, d, s, i), ledger, C, coin_rng)
        if ok:
            if twin and ledger.max_occupancy(start, end) > twin_max:
                raise AssertionError(f"capacitated occupancy exceeds the twin on request {i}")
            ledger.reserve(start, end)
            level = ledger.max_occupancy(start, end)
            if level > peak:
                peak = level
            accepted_ids.append(i)
        if counted:
            key = (d, s, k)
            if key not in offered:
                offered[key] = [0] * N_BATCHES
                accepted[key] = [0] * N_BATCHES
            offered[key][b] += 1
            if ok:
                accepted[key][b] += 1
                gain = reward_of[k] * s
                revenue[b] += gain
                tally += gain

    eff = H - warm
    cells = {}
    revenue_rate = 0.0
    for key in sorted(offered):
        o = np.array(offered[key])
        a = np.array(accepted[key])
        n_off, n_acc = int(o.sum()), int(a.sum())
        cells[key] = CellStats(n_off, n_acc, 1.0 - n_acc / n_off, _ratio_se(o - a, o))
        revenue_rate += reward_of[key[2]] * key[1] * n_acc
    revenue_rate /= eff
    per_batch = revenue / batch_len
    revenue_se = float(per_batch.std(ddof=1) / math.sqrt(N_BATCHES))
    virtual = {}
    for key in sorted(v_offered):
        o = np.array(v_offered[key])
        v = np.array(v_blocked[key])
        virtual[key] = VirtualStats(int(o.sum()), int(v.sum()), v.sum() / o.sum(), _ratio_se(v, o))
    report = SimReport(
        policy=getattr(policy, "name", type(policy).__name__),
        seed=seed,
        horizon=H,
        warmup=warm,
        capacity=C,
        cells=cells,
        revenue_rate=revenue_rate,
        revenue_se=revenue_se,
        reward_tally=tally,
        virtual=virtual,
        accepted_ids=np.array(accepted_ids, dtype=np.int64),
        peak_occupancy=peak,
        n_arrivals=len(times),
    )
    return report, stream, warm


def run(config: SystemConfig, policy: Policy, seed: int = 0) -> SimReport:
    """Simulate ``policy`` over ``[0, horizon)``; statistics exclude the warm-up."""
    report, _, _ = _simulate(config, policy, seed)
    return report


def run_coupled(config: SystemConfig, seed: int = 0, policy: Policy | None = None):
    """Capacitated system and infinite-capacity twin on one arrival stream.

    Returns ``(capacitated, twin)``.  Both reports carry the twin's virtual
    blocking per ``(d, s)``.  Every capacitated acceptance is checked to
    be dominated by the twin's occupancy on the requested interval.
    """
    policy = policy or AdmitAll()
    cap, stream, warm = _simulate(config, policy, seed, twin=True)
    all_ids = np.arange(len(stream), dtype=np.int64)
    if not np.isin(cap.accepted_ids, all_ids).all():
        raise AssertionError("capacitated reservations are not a subset of the twin's")
    reward_of = {c.class_id: float(c.reward_rate) for c in config.classes}
    counted = stream.times >= warm
    cells = {}
    tally = 0.0
    for d, s, k in sorted({(int(a), int(b), int(c)) for a, b, c in zip(
        stream.delays[counted], stream.durations[counted], stream.classes[counted])}):
        n = int(np.count_nonzero(
            counted & (stream.delays == d) & (stream.durations == s) & (stream.classes == k)
        ))
        cells[(d, s, k)] = CellStats(n, n, 0.0, 0.0)
        tally += reward_of[k] * s * n
    eff = config.horizon - warm
    twin = SimReport(
        policy="infinite_capacity",
        seed=seed,
        horizon=config.horizon,
        warmup=warm,
        capacity=-1,
        cells=cells,
        revenue_rate=tally / eff,
        revenue_se=float("nan"),
        reward_tally=tally,
        virtual=cap.virtual,
        accepted_ids=all_ids,
        peak_occupancy=-1,
        n_arrivals=len(stream),
    )
    return cap, twin


# ------------------------------------------------------------- benchmarks

BENCH_COLUMNS = [
    "sensitivity", "policy", "mean_revenue", "ci_halfwidth", "std_error", "reference",
    "err", "ratio", "accept_probs",
]


def replication_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), 7919, index]).generate_state(1)[0])


def _one_replication(args):
    config, policies, seed = args
    return [run(config, p, seed).revenue_rate for p in policies]


def benchmark(
    config: SystemConfig,
    policies,
    replications: int = 5,
    seed: int = 0,
    reference: str = "lp",
    workers: int = 1,
    sensitivity=None,
) -> list[dict]:
    """Mean revenue rate per policy over replications, with ``err`` against a reference.

    ``reference`` is ``"lp"`` (the LP bound ``objective / (1 - epsilon)``) or
    the name of one of the benchmarked policies.  Replication ``i`` uses the
    same arrivals for every policy.
    """
    policies = [make_policy(p, config) if isinstance(p, str) else p for p in policies]
    names = [p.name for p in policies]
    if replications < 1:
        raise ValueError("replications must be >= 1")
    jobs = [(config, policies, replication_seed(seed, i)) for i in range(replications)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one_replication, jobs))
    else:
        results = [_one_replication(j) for j in jobs]
    revenue = np.array(results, dtype=float)  # replications x policies
    solution = solve_knapsack_lp(config.classes, config.capacity, config.epsilon)
    if reference == "lp":
        ref = solution.lp_objective / (1 - config.epsilon)
    elif reference in names:
        ref = float(revenue[:, names.index(reference)].mean())
    else:
        raise ValueError(f"reference {reference!r} is neither 'lp' nor a benchmarked policy")
    rows = []
    for j, name in enumerate(names):
        mean = float(revenue[:, j].mean())
        se = float(revenue[:, j].std(ddof=1) / math.sqrt(replications)) if replications > 1 else 0.0
        rows.append(
            {
                "sensitivity": sensitivity,
                "policy": name,
                "mean_revenue": mean,
                "ci_halfwidth": 1.96 * se,
                "std_error": se,
                "reference": ref,
                "err": abs(mean - ref) / ref if ref > 0 else 0.0,
                "ratio": mean / ref if ref > 0 else 0.0,
                "accept_probs": " ".join(f"{a:.4f}" for a in solution.accept_probs()),
            }
        )
    return rows


def scale_config(config: SystemConfig, capacity: int) -> SystemConfig:
    """Scale capacity and every arrival rate together, keeping rho / C fixed."""
    f = capacity / config.capacity
    return SystemConfig(
        capacity=capacity,
        classes=[c.with_rate(float(c.arrival_rate) * f) for c in config.classes],
        epsilon=config.epsilon,
        horizon=config.horizon,
        warmup_fraction=config.warmup_fraction,
        extra=config.extra,
    )


# --------------------------------------------------- discrete episodes


@dataclass
class EpisodeReport:
    policy: str
    mean_reward: float
    std_error: float
    n_episodes: int


def run_episodes(instance: DPInstance, policy: Policy, n_episodes: int, seed: int = 0) -> EpisodeReport:
    """Monte Carlo total reward of ``policy`` on the finite-horizon instance."""
    arr_rng, coin_rng = _streams(seed)
    outcomes = instance.outcomes()
    probs = np.array([float(o[0]) for o in outcomes])
    draws = arr_rng.choice(len(outcomes), size=(n_episodes, instance.periods), p=probs / probs.sum())
    totals = np.zeros(n_episodes)
    C = instance.capacity
    seq = 0
    for e in range(n_episodes):
        ledger = BookingLedger()
        reward = 0.0
        for t in range(1, instance.periods + 1):
            _, k, offset, length = outcomes[draws[e, t - 1]]
            if k is None:
                continue
            w = instance.window(t, offset, length)
            seq += 1
            if w is None:
                continue
            req = Request(k + 1, t, w[0] - t, w[1] - w[0] + 1, seq)
            if policy.decide(req, ledger, C, coin_rng):
                ledger.reserve(*req.interval)
                reward += float(instance.classes[k].reward) * req.duration
        totals[e] = reward
    se = float(totals.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return EpisodeReport(getattr(policy, "name", "policy"), float(totals.mean()), se, n_episodes)


def discrete_policy(name: str, instance: DPInstance, epsilon: float, oracle=None) -> Policy:
    if name == "dp":
        return DPPolicy(oracle if oracle is not None else dp_solve(instance))
    if name == "icsp":
        return ICSP(solve_knapsack_lp(instance.as_classes(), instance.capacity, epsilon))
    return make_policy(name)


def benchmark_discrete(
    instance: DPInstance, policies, n_episodes: int, seed: int = 0, epsilon: float = 0.01,
    max_states: int = 10**7,
) -> list[dict]:
    """Episode revenue per policy against the exact DP optimum."""
    oracle = dp_solve(instance, max_states=max_states)
    ref = float(oracle.optimal_value)
    solution = solve_knapsack_lp(instance.as_classes(), instance.capacity, epsilon)
    rows = []
    for name in policies:
        policy = discrete_policy(name, instance, epsilon, oracle)
        rep = run_episodes(instance, policy, n_episodes, seed)
        rows.append(
            {
                "sensitivity": None,
                "policy": name,
                "mean_revenue": rep.mean_reward,
                "ci_halfwidth": 1.96 * rep.std_error,
                "std_error": rep.std_error,
                "reference": ref,
                "err": abs(rep.mean_reward - ref) / ref if ref > 0 else 0.0,
                "ratio": rep.mean_reward / ref if ref > 0 else 0.0,
                "accept_probs": " ".join(f"{a:.4f}" for a in solution.accept_probs()),
            }
        )
    return rows
