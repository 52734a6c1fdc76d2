"""Admission policies.

* the knapsack LP and the class-selection policy (ICSP) built from it,
* admit-all / reject-all baselines,
* an exact finite-horizon dynamic program over per-period remaining
  capacity, used as the optimal-policy oracle on small instances.

Every policy exposes ``decide(request, ledger, capacity, rng) -> bool``;
the caller reserves the interval on acceptance.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .core import BookingLedger, ClassSpec, Request, SystemConfig


# ------------------------------------------------------------ knapsack LP


@dataclass(frozen=True)
class PolicySolution:
    alpha: dict  # (d, s, class_id) -> acceptance probability
    class_alpha: dict  # class_id -> acceptance probability
    order: tuple  # class ids by decreasing reward, ties by id
    cutoff_class: int  # last class in ``order`` admitted with positive probability
    lp_objective: float
    capacity_budget: float
    used_load: float

    def accept_probs(self) -> list[float]:
        """Acceptance probabilities in class-id order."""
        return [self.class_alpha[k] for k in sorted(self.class_alpha)]


def solve_knapsack_lp(classes: Sequence[ClassSpec], C: float, epsilon: float) -> PolicySolution:
    """Greedy solution of the continuous knapsack over class loads.

    Classes are filled by decreasing reward until the budget
    ``(1 - epsilon) * C`` is exhausted; the class that straddles the budget
    gets the fractional residual.  All types of a class share its alpha.
    """
    if not classes:
        raise ValueError("no classes")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    budget = (1 - epsilon) * float(C)
    order = sorted(classes, key=lambda c: (-float(c.reward_rate), c.class_id))
    remaining = budget
    class_alpha = {}
    for c in order:
        load = float(c.load)
        if load <= 0:
            a = 1.0
        elif remaining >= load:
            a = 1.0
        else:
            a = min(max(remaining / load, 0.0), 1.0)
        class_alpha[c.class_id] = a
        # the fractional class exhausts the budget; no rounding dust survives it
        remaining = remaining - load if a == 1.0 else 0.0
    admitted = [c.class_id for c in order if class_alpha[c.class_id] > 0]
    cutoff = admitted[-1] if admitted else order[0].class_id
    alpha = {}
    objective = 0.0
    used = 0.0
    for c in classes:
        a = class_alpha[c.class_id]
        for (d, s), rate in c.type_rates().items():
            alpha[(d, s, c.class_id)] = a
            objective += float(c.reward_rate) * a * float(rate) * s
            used += a * float(rate) * s
    return PolicySolution(
        alpha=alpha,
        class_alpha=class_alpha,
        order=tuple(c.class_id for c in order),
        cutoff_class=cutoff,
        lp_objective=objective,
        capacity_budget=budget,
        used_load=used,
    )


def icsp_decide(request: Request, solution: PolicySolution, ledger: BookingLedger, C: int, rng) -> bool:
    """Class selection first, then the capacity check over the whole interval."""
    a = solution.class_alpha.get(request.class_id, 0.0)
    if a <= 0:
        return False
    if a < 1 and not rng.random() < a:
        return False
    return ledger.max_occupancy(*request.interval) < C


class Policy:
    name = "policy"

    def decide(self, request: Request, ledger: BookingLedger, capacity: int, rng) -> bool:
        raise NotImplementedError


class AdmitAll(Policy):
    """Accept whenever the requested interval has a free unit throughout."""

    name = "admit_all"

    def decide(self, request, ledger, capacity, rng):
        return ledger.max_occupancy(*request.interval) < capacity


class RejectAll(Policy):
    name = "reject_all"

    def decide(self, request, ledger, capacity, rng):
        return False


class ICSP(Policy):
    name = "icsp"

    def __init__(self, solution: PolicySolution):
        self.solution = solution

    @classmethod
    def from_config(cls, config: SystemConfig) -> "ICSP":
        return cls(solve_knapsack_lp(config.classes, config.capacity, config.epsilon))

    def decide(self, request, ledger, capacity, rng):
        return icsp_decide(request, self.solution, ledger, capacity, rng)


# ------------------------------------------------------ dynamic program


@dataclass(frozen=True)
class DPClass:
    arrival_prob: object
    reward: object
    windows: Mapping[tuple[int, int], object]  # (start offset, length) -> probability

    def __post_init__(self):
        if self.arrival_prob < 0 or self.reward < 0:
            raise ValueError("arrival probability and reward must be non-negative")
        if abs(sum(self.windows.values()) - 1) > 1e-12:
            raise ValueError("window pmf must sum to 1")
        for a, length in self.windows:
            if a < 0 or length < 1:
                raise ValueError(f"window {(a, length)} needs offset >= 0 and length >= 1")


@dataclass(frozen=True)
class DPInstance:
    """Finite-horizon booking problem with at most one request per period.

    A class-``k`` request at period ``t`` with window ``(a, length)`` asks
    for periods ``t + a .. t + a + length - 1``; periods past the horizon
    are cut off and neither consume capacity nor earn reward.
    """

    periods: int
    capacity: int
    classes: tuple

    def __post_init__(self):
        if self.periods < 1 or self.capacity < 0:
            raise ValueError("need periods >= 1 and capacity >= 0")
        total = sum(c.arrival_prob for c in self.classes)
        if total > 1 + 1e-12:
            raise ValueError(f"arrival probabilities sum to {float(total)} > 1")
        object.__setattr__(self, "classes", tuple(self.classes))

    @property
    def no_arrival_prob(self):
        return 1 - sum(c.arrival_prob for c in self.classes)

    @property
    def max_offset(self) -> int:
        return max(a for c in self.classes for a, _ in c.windows)

    @property
    def max_length(self) -> int:
        return max(n for c in self.classes for _, n in c.windows)

    def outcomes(self):
        """(probability, class index or None, offset, length) per period."""
        out = []
        if self.no_arrival_prob > 0:
            out.append((self.no_arrival_prob, None, 0, 0))
        for k, c in enumerate(self.classes):
            for (a, n), p in c.windows.items():
                if c.arrival_prob * p > 0:
                    out.append((c.arrival_prob * p, k, a, n))
        return out

    def window(self, t: int, offset: int, length: int):
        """Absolute inclusive period range, or None when it falls past the horizon."""
        a = t + offset
        if a > self.periods:
            return None
        return a, min(self.periods, a + length - 1)

    def state_bound(self) -> int:
        span = self.max_offset + self.max_length - 1
        return sum(
            (self.capacity + 1) ** min(self.periods - t + 1, max(span, 0))
            for t in range(1, self.periods + 1)
        )

    def as_classes(self) -> list[ClassSpec]:
        """Per-period view as class specs (rate = arrival probability)."""
        return [
            ClassSpec(k + 1, c.arrival_prob, c.reward, dict(c.windows))
            for k, c in enumerate(self.classes)
        ]

    @classmethod
    def from_config(cls, config: SystemConfig, periods: int, delta: float = 1.0, capacity=None):
        """Discretise a continuous-time system with period length ``delta``.

        Class ``k`` arrives in a period with probability
        ``lambda_k delta / (1 + lambda delta)``.
        """
        lam = config.total_rate
        classes = []
        for c in config.classes:
            windows = {}
            for (d, s), p in c.joint_pmf.items():
                a, n = d / delta, s / delta
                if abs(a - round(a)) > 1e-9 or abs(n - round(n)) > 1e-9:
                    raise ValueError(f"(d={d}, s={s}) is not a multiple of delta={delta}")
                key = (int(round(a)), int(round(n)))
                windows[key] = windows.get(key, 0) + p
            prob = float(c.arrival_rate) * delta / (1 + lam * delta)
            classes.append(DPClass(prob, c.reward_rate, windows))
        return cls(periods, config.capacity if capacity is None else capacity, tuple(classes))

    @classmethod
    def from_dict(cls, raw: Mapping) -> "DPInstance":
        classes = []
        for c in raw["classes"]:
            windows = {}
            for a, n, p in c["windows"]:
                windows[(int(a), int(n))] = windows.get((int(a), int(n)), 0) + float(p)
            classes.append(DPClass(float(c["arrival_prob"]), float(c["reward"]), windows))
        return cls(int(raw["periods"]), int(raw["capacity"]), tuple(classes))


class DPOracle:
    """Memoised optimal values ``V_t(c)`` and the threshold decision rule."""

    def __init__(self, instance: DPInstance, max_states: int = 10**7):
        self.instance = instance
        self.max_states = max_states
        self._memo: dict = {}
        self._outcomes = instance.outcomes()

    @property
    def n_states(self) -> int:
        return len(self._memo)

    def full_state(self) -> tuple:
        return (self.instance.capacity,) * self.instance.periods

    def value(self, t: int, c: Sequence[int]):
        """Optimal expected reward from the start of period ``t`` with capacities ``c``."""
        if t > self.instance.periods:
            return 0
        return self._value(t, tuple(c[t - 1 :]))

    def _value(self, t, tail):
        if t > self.instance.periods:
            return 0
        key = (t, tail)
        hit = self._memo.get(key)
        if hit is not None:
            return hit
        inst = self.instance
        keep = self._value(t + 1, tail[1:])
        total = 0
        for prob, k, offset, length in self._outcomes:
            if k is None:
                total += prob * keep
                continue
            w = inst.window(t, offset, length)
            if w is None:
                total += prob * keep
                continue
            lo, hi = w[0] - t, w[1] - t
            if min(tail[lo : hi + 1]) < 1:
                total += prob * keep
                continue
            booked = tail[:lo] + tuple(x - 1 for x in tail[lo : hi + 1]) + tail[hi + 1 :]
            take = inst.classes[k].reward * (hi - lo + 1) + self._value(t + 1, booked[1:])
            total += prob * (take if take > keep else keep)
        if len(self._memo) >= self.max_states:
            raise RuntimeError(f"DP state-space guard exceeded: more than {self.max_states} states")
        self._memo[key] = total
        return total

    def critical_reward(self, t: int, c: Sequence[int], w: tuple[int, int]):
        """Opportunity cost of granting periods ``w = (a, b)`` in state ``c`` at ``t``."""
        a, b = w
        c = tuple(c)
        if not 1 <= a <= b <= self.instance.periods or a < t:
            raise ValueError(f"window {w} invalid at period {t}")
        if min(c[a - 1 : b]) < 1:
            return math.inf
        reduced = c[: a - 1] + tuple(x - 1 for x in c[a - 1 : b]) + c[b:]
        return self.value(t + 1, c) - self.value(t + 1, reduced)

    def decide(self, t: int, c: Sequence[int], w: tuple[int, int], reward) -> bool:
        return reward * (w[1] - w[0] + 1) > self.critical_reward(t, c, w)

    @property
    def optimal_value(self):
        return self.value(1, self.full_state())

    def states(self):
        """Solved states as ``(t, full capacity vector)``."""
        cap, T = self.instance.capacity, self.instance.periods
        for t, tail in sorted(self._memo):
            yield t, (cap,) * (t - 1) + tail

    def threshold_table(self) -> list[dict]:
        rows = []
        windows = sorted({(a, n) for c in self.instance.classes for a, n in c.windows})
        for t, c in self.states():
            for offset, length in windows:
                w = self.instance.window(t, offset, length)
                if w is None:
                    continue
                rows.append(
                    {
                        "t": t,
                        "state": " ".join(str(x) for x in c[t - 1 :]),
                        "window_start": w[0],
                        "window_end": w[1],
                        "critical_reward": float(self.critical_reward(t, c, w)),
                    }
                )
        return rows


def dp_solve(instance: DPInstance, max_states: int = 10**7) -> DPOracle:
    bound = instance.state_bound()
    if bound > max_states:
        raise ValueError(
            f"DP state-space guard: up to {bound} reachable states exceeds the limit {max_states}"
        )
    oracle = DPOracle(instance, max_states)
    limit = sys.getrecursionlimit()
    if instance.periods + 100 > limit:
        sys.setrecursionlimit(instance.periods + 100)
    oracle.value(1, oracle.full_state())
    return oracle


def dp_decide(oracle: DPOracle, t: int, c: Sequence[int], w: tuple[int, int], r) -> bool:
    """Accept iff ``r * |w|`` strictly exceeds the critical reward."""
    return oracle.decide(t, c, w, r)


class DPPolicy(Policy):
    """Drives the DP oracle from a period-indexed ledger (period j is ``[j, j+1)``)."""

    name = "dp"

    def __init__(self, oracle: DPOracle):
        self.oracle = oracle

    def decide(self, request, ledger, capacity, rng):
        inst = self.oracle.instance
        t = int(request.arrival_time)
        start, end = request.interval
        w = (int(start), int(end) - 1)
        c = [capacity] * (t - 1) + [
            capacity - ledger.max_occupancy(j, j + 1) for j in range(t, inst.periods + 1)
        ]
        reward = inst.classes[request.class_id - 1].reward
        return self.oracle.decide(t, c, w, reward)


def make_policy(name: str, config: SystemConfig | None = None, **kwargs) -> Policy:
    if name == "admit_all":
        return AdmitAll()
    if name == "reject_all":
        return RejectAll()
    if name == "icsp":
        if "solution" in kwargs:
            return ICSP(kwargs["solution"])
        return ICSP.from_config(config)
    raise ValueError(f"unknown policy {name!r}")
