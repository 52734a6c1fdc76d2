"""Virtual blocking in the infinite-capacity twin.

A customer arriving at time 0 sees, on every unit slot ``(d, d+1]``, two
Poisson streams running towards each other: departures of customers
already in service (read backwards in time) and booked starts.  The
maximum of their sum over the slot is the occupancy maximum ``A_d``.  For
one pair of streams the maximum reduces to ``G + M`` for the induced
down-drifting +/-1 walk (``G`` down-steps, ``M`` running max), which gives
an exact evaluator; everything else is Monte Carlo.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .distributions import MergedDistribution, pre_arrival_rate

# Largest threshold the exact walk evaluator accepts; O(C^3) work beyond it.
MAX_EXACT_THRESHOLD = 4000
# Points held in memory per Monte Carlo chunk.
CHUNK_POINTS = 4_000_000


def erlang_b(C: int, rho: float) -> float:
    """Erlang-B blocking probability via the stable forward recursion."""
    if C < 0 or rho < 0:
        raise ValueError("need C >= 0 and rho >= 0")
    b = 1.0
    for c in range(1, int(C) + 1):
        b = rho * b / (c + rho * b)
    return b


# ---------------------------------------------------------------- random walk


def rw_hitting_prob(p: float, b: int) -> float:
    """P(sup_n S_n >= b) for a +/-1 walk with up-probability ``p < 1/2``."""
    if not 0 <= p < 0.5:
        raise ValueError(f"hitting formula needs 0 <= p < 1/2 (downward drift), got p={p}")
    if b < 0:
        raise ValueError("level b must be >= 0")
    if b == 0:
        return 1.0
    return (p / (1 - p)) ** b


def rw_max_mc(p: float, n_paths: int, n_steps: int, seed=None, chunk: int = 50_000) -> np.ndarray:
    """Running maxima (including the start at 0) of simulated truncated walks."""
    rng = np.random.default_rng(seed)
    out = np.empty(n_paths, dtype=np.int32)
    for lo in range(0, n_paths, chunk):
        hi = min(lo + chunk, n_paths)
        up = rng.random((hi - lo, n_steps)) < p
        steps = up.astype(np.int16) * 2 - 1
        path = np.cumsum(steps, axis=1, dtype=np.int32)
        out[lo:hi] = np.maximum(path.max(axis=1), 0)
    return out


def walk_statistics(labels: Sequence[int]) -> tuple[int, int]:
    """(down-step count, running max) of the walk with the given +/-1 steps."""
    pos = best = downs = 0
    for e in labels:
        pos += e
        if e < 0:
            downs += 1
        best = max(best, pos)
    return downs, best


def opposing_value(backward: Sequence[float], forward: Sequence[float]) -> int:
    """Direct evaluation of ``max_r {#backward in (r, 1] + #forward in [0, r]}``.

    The function only jumps up at forward points, so evaluating at ``r = 0``
    and at every forward point is exhaustive.
    """
    back = np.sort(np.asarray(backward, dtype=float))
    fwd = np.sort(np.asarray(forward, dtype=float))
    best = len(back)
    for j, r in enumerate(fwd, start=1):
        remaining = len(back) - int(np.searchsorted(back, r, side="right"))
        best = max(best, remaining + j)
    return best


# ------------------------------------------------------ opposing processes


@dataclass(frozen=True)
class OpposingProcessSpec:
    backward_rate: float
    forward_rate: float
    threshold: int

    def __post_init__(self):
        if self.backward_rate < 0 or self.forward_rate < 0:
            raise ValueError("rates must be non-negative")
        if self.threshold < 1:
            raise ValueError("threshold must be >= 1")


def opposing_max_exact(spec: OpposingProcessSpec, n_trunc: int | None = None) -> float:
    """Exact ``P(X >= C)`` by conditioning on the number of points.

    Given ``n`` points the labels are iid (+1 w.p. ``forward/total``), so a
    dynamic program over (distance below running max, running max) yields
    ``P(G_n + M_n >= C)`` for every ``n`` in one sweep.  Since
    ``G_n + M_n >= n/2``, every ``n >= 2C`` is blocked and the Poisson sum
    needs no truncation.  ``n_trunc`` may cap the sweep earlier provided
    the neglected Poisson tail is below 1e-10.
    """
    C = spec.threshold
    total = spec.backward_rate + spec.forward_rate
    if total == 0:
        return 0.0
    if C > MAX_EXACT_THRESHOLD:
        raise ValueError(
            f"threshold {C} exceeds the exact evaluator limit {MAX_EXACT_THRESHOLD}; "
            "use opposing_max_mc"
        )
    n_stop = 2 * C - 1
    if n_trunc is not None and n_trunc < n_stop:
        tail = stats.poisson.sf(n_trunc, total)
        if tail > 1e-10:
            raise ValueError(f"P(N > {n_trunc}) = {tail:.3g} exceeds 1e-10")
        n_stop = n_trunc

    p = spec.forward_rate / total
    q = spec.backward_rate / total
    pmf = stats.poisson.pmf(np.arange(n_stop + 1), total)
    # state[w, m]: gap below running max w, running max m; X = (n + m + w) / 2
    state = np.zeros((C, C))
    state[0, 0] = 1.0
    gap_plus_max = np.add.outer(np.arange(C), np.arange(C))
    alive = pmf[0]
    for n in range(1, n_stop + 1):
        nxt = np.zeros_like(state)
        nxt[1:, :] += q * state[:-1, :]
        nxt[:-1, :] += p * state[1:, :]
        nxt[0, 1:] += p * state[0, :-1]
        nxt[gap_plus_max >= 2 * C - n] = 0.0
        state = nxt
        alive += pmf[n] * state.sum()
    return float(min(max(1.0 - alive, 0.0), 1.0))


def _excursions(n_rows, dep_rows, dep_pos, arr_rows, arr_pos) -> np.ndarray:
    """Per row, max over r of (#arrivals <= r) - (#departures <= r), floored at 0."""
    rows = np.concatenate([dep_rows, arr_rows])
    out = np.zeros(n_rows, dtype=np.int64)
    if rows.size == 0:
        return out
    pos = np.concatenate([dep_pos, arr_pos])
    steps = np.concatenate(
        [np.full(dep_rows.size, -1, dtype=np.int64), np.ones(arr_rows.size, dtype=np.int64)]
    )
    order = np.argsort(rows + pos, kind="stable")
    path = np.cumsum(steps[order])
    counts = np.bincount(rows, minlength=n_rows)
    starts = np.cumsum(counts) - counts
    filled = counts > 0
    first = starts[filled]
    before = np.where(first > 0, path[first - 1], 0)
    out[filled] = np.maximum.reduceat(path, first) - before
    return np.maximum(out, 0)


def _draw(rng, rate, n):
    counts = rng.poisson(rate, n)
    rows = np.repeat(np.arange(n), counts)
    pos = rng.random(rows.size)
    return counts, rows, pos


def _chunks(n_samples, points_per_sample):
    size = max(1, min(n_samples, int(CHUNK_POINTS / max(points_per_sample, 1.0))))
    for lo in range(0, n_samples, size):
        yield min(size, n_samples - lo)


def _tail(hits, n):
    est = hits / n
    return est, math.sqrt(max(est * (1 - est), 0.0) / n)


def opposing_max_mc(spec: OpposingProcessSpec, n_samples: int, seed=None) -> tuple[float, float]:
    """Monte Carlo ``P(X >= C)`` with its binomial standard error."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    hits = 0
    for n in _chunks(n_samples, spec.backward_rate + spec.forward_rate):
        b_counts, b_rows, b_pos = _draw(rng, spec.backward_rate, n)
        _, f_rows, f_pos = _draw(rng, spec.forward_rate, n)
        x = b_counts + _excursions(n, b_rows, b_pos, f_rows, f_pos)
        hits += int(np.count_nonzero(x >= spec.threshold))
    return _tail(hits, n_samples)


# --------------------------------------------------------- slot occupancy


@dataclass(frozen=True)
class SlotTerms:
    """Processes making up ``A_d``, each keyed ``(i, s)`` for ``N_i^s``."""

    slot: int
    outside: tuple  # served throughout the slot; enter via their full count
    departures: tuple  # ends inside the slot, mirrored
    arrivals: tuple  # booked starts inside the slot
    rates: dict = field(compare=False)

    @property
    def processes(self):
        return sorted(set(self.outside) | set(self.departures) | set(self.arrivals))


def slot_terms(dist: MergedDistribution, d: int) -> SlotTerms:
    services = [s for s, k in dist.duration_pmf.items() if k > 0]
    outside = tuple((i, s) for s in services if s >= 2 for i in range(d + 1, d + s))
    departures = tuple((d, s) for s in services)
    arrivals = tuple((d + s, s) for s in services)
    keys = set(outside) | set(departures) | set(arrivals)
    rates = {key: float(pre_arrival_rate(dist, *key)) for key in keys}
    return SlotTerms(d, outside, departures, arrivals, rates)


@dataclass(frozen=True)
class OccupancySampleSpec:
    dist: MergedDistribution
    slot: int
    threshold: int
    n_samples: int

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if not 0 <= self.slot <= self.dist.max_delay:
            raise ValueError(f"slot {self.slot} outside [0, {self.dist.max_delay}]")


def sample_window_max(dist: MergedDistribution, slots: Iterable[int], n_samples: int, rng):
    """Samples of ``max(A_j for j in slots)``, every ``N_i^s`` drawn once per sample.

    Slots sharing a process see the same points: the customer behind a
    point ``x`` of ``N_i^s`` starts at ``i - s + x`` and leaves at ``i + x``.
    """
    terms = [slot_terms(dist, j) for j in slots]
    rates = {}
    for t in terms:
        rates.update(t.rates)
    keys = sorted(k for k, r in rates.items() if r > 0)
    per_sample = sum(rates[k] for k in keys) * 2
    out = np.empty(n_samples, dtype=np.int64)
    empty_i = np.empty(0, dtype=np.int64)
    empty_f = np.empty(0)
    done = 0
    for n in _chunks(n_samples, per_sample):
        draws = {k: _draw(rng, rates[k], n) for k in keys}
        best = np.zeros(n, dtype=np.int64)
        for t in terms:
            total = np.zeros(n, dtype=np.int64)
            for k in t.outside:
                if k in draws:
                    total += draws[k][0]
            dep = [draws[k] for k in t.departures if k in draws]
            arr = [draws[k] for k in t.arrivals if k in draws]
            for counts, _, _ in dep:
                total += counts
            total += _excursions(
                n,
                np.concatenate([x[1] for x in dep]) if dep else empty_i,
                np.concatenate([x[2] for x in dep]) if dep else empty_f,
                np.concatenate([x[1] for x in arr]) if arr else empty_i,
                np.concatenate([x[2] for x in arr]) if arr else empty_f,
            )
            np.maximum(best, total, out=best)
        out[done : done + n] = best
        done += n
    return out


def sample_slot_occupancy(spec: OccupancySampleSpec, seed=None) -> tuple[float, float]:
    """Estimate ``P(A_d >= C)`` and its standard error."""
    rng = np.random.default_rng(seed)
    values = sample_window_max(spec.dist, [spec.slot], spec.n_samples, rng)
    return _tail(int(np.count_nonzero(values >= spec.threshold)), spec.n_samples)


def conditional_virtual_blocking(
    dist: MergedDistribution, d: int, s: int, C: int, n_samples: int, seed=None
) -> tuple[float, float]:
    """Estimate ``P_d^s = P(max(A_d, ..., A_{d+s-1}) >= C)`` with its standard error."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    if dist.joint_pmf.get((d, s), 0) <= 0:
        raise ValueError(f"type (d={d}, s={s}) is outside the support")
    rng = np.random.default_rng(seed)
    values = sample_window_max(dist, range(d, d + s), n_samples, rng)
    return _tail(int(np.count_nonzero(values >= C)), n_samples)


# ---------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ["lambda", "C", "d", "s", "estimate", "std_error", "n_samples", "seed"]
REGIMES = ("critical", "padded")


def regime_capacity(regime: str, rho: float, epsilon: float = 0.0) -> int:
    """Integral capacity for a regime; the padded capacity rounds up."""
    if regime == "critical":
        target = rho
    elif regime == "padded":
        if not epsilon > 0:
            raise ValueError("padded regime needs epsilon > 0")
        target = (1 + epsilon) * rho
    else:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    return math.ceil(round(target, 9))


def row_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([int(seed), index]).generate_state(1)[0])


def asymptotic_sweep(
    regime: str,
    base_dist: MergedDistribution,
    lambda_grid: Sequence[float],
    n_samples: int,
    seed: int = 0,
    epsilon: float = 0.1,
    cells: Sequence[tuple[int, int]] | None = None,
) -> list[dict]:
    """Virtual blocking of each ``(d, s)`` type along a scaled-rate grid.

    Rows are long-format, one per ``(lambda, d, s)``; ``C`` follows the
    regime: ``ceil(rho)`` (critical) or ``ceil((1 + epsilon) rho)`` (padded).
    """
    grid = list(lambda_grid)
    if not grid:
        raise ValueError("lambda_grid is empty")
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("lambda_grid must be strictly increasing")
    cells = list(cells) if cells is not None else base_dist.support
    rows = []
    index = 0
    for lam in grid:
        dist = base_dist.with_rate(lam)
        C = regime_capacity(regime, float(dist.rho), epsilon)
        for d, s in cells:
            rs = row_seed(seed, index)
            index += 1
            est, se = conditional_virtual_blocking(dist, d, s, C, n_samples, rs)
            rows.append(
                {
                    "lambda": lam,
                    "C": C,
                    "d": d,
                    "s": s,
                    "estimate": est,
                    "std_error": se,
                    "n_samples": n_samples,
                    "seed": rs,
                }
            )
    return rows


def write_rows_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[c]) for c in columns])


def format_value(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if x is None:
        return ""
    return str(x)
