"""Domain types: customer classes, requests, system configuration and the
booking ledger that answers max-occupancy-over-interval queries.

Requested service intervals are half-open, ``[t + d, t + d + s)``, so two
reservations that meet at a single instant never conflict.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from numbers import Real
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np

log = logging.getLogger(__name__)

PMF_TOL = 1e-12


class GarbageCollectedError(ValueError):
    """Raised when a ledger query reaches into history that was released."""


@dataclass(frozen=True)
class ClassSpec:
    """One customer class.

    ``joint_pmf`` maps ``(delay, duration)`` to probability; delays are
    integers >= 0 and durations integers >= 1.
    """

    class_id: int
    arrival_rate: Real
    reward_rate: Real
    joint_pmf: Mapping[tuple[int, int], Real]

    def __post_init__(self):
        if self.arrival_rate < 0:
            raise ValueError(f"class {self.class_id}: arrival_rate must be >= 0")
        if self.reward_rate < 0:
            raise ValueError(f"class {self.class_id}: reward_rate must be >= 0")
        if not self.joint_pmf:
            raise ValueError(f"class {self.class_id}: empty pmf")
        pmf = {}
        for key, p in self.joint_pmf.items():
            d, s = key
            if int(d) != d or int(s) != s:
                raise ValueError(f"class {self.class_id}: non-integer support point {key}")
            d, s = int(d), int(s)
            if d < 0 or s < 1:
                raise ValueError(f"class {self.class_id}: support point {key} outside d>=0, s>=1")
            if not 0 <= p <= 1:
                raise ValueError(f"class {self.class_id}: probability {p} at {key} outside [0, 1]")
            pmf[(d, s)] = pmf.get((d, s), 0) + p
        total = sum(pmf.values())
        if abs(total - 1) > PMF_TOL:
            raise ValueError(f"class {self.class_id}: pmf sums to {float(total)!r}, not 1")
        object.__setattr__(self, "joint_pmf", dict(sorted(pmf.items())))

    @property
    def max_delay(self) -> int:
        return max(d for d, _ in self.joint_pmf)

    @property
    def max_duration(self) -> int:
        return max(s for _, s in self.joint_pmf)

    @property
    def mean_service(self):
        return sum(s * p for (_, s), p in self.joint_pmf.items())

    @property
    def load(self):
        """Offered load ``arrival_rate * mean_service`` in resource-time per unit time."""
        return self.arrival_rate * self.mean_service

    def type_rates(self) -> dict[tuple[int, int], Real]:
        """Arrival rate of each ``(delay, duration)`` type of this class."""
        return {key: self.arrival_rate * p for key, p in self.joint_pmf.items()}

    def with_rate(self, arrival_rate) -> "ClassSpec":
        return ClassSpec(self.class_id, arrival_rate, self.reward_rate, self.joint_pmf)


@dataclass(frozen=True)
class Request:
    class_id: int
    arrival_time: float
    delay: int
    duration: int
    sequence_number: int

    @property
    def interval(self) -> tuple[float, float]:
        start = self.arrival_time + self.delay
        return start, start + self.duration


class BookingLedger:
    """Reserved occupancy as a right-continuous step function of time.

    The step function is held as two parallel buffers: sorted breakpoint
    times and the occupancy level on ``[times[i], times[i+1])``.  Level
    storage (rather than deltas) turns a reservation into one vectorised
    slice increment and an interval query into one slice max.  The live
    region is ``[lo, hi)`` of the buffers; ``release_before`` just moves
    ``lo`` forward, keeping the level at the cut as the new baseline.
    """

    def __init__(self, horizon_floor: float = -math.inf, size: int = 64):
        self._t = np.empty(size, dtype=float)
        self._v = np.zeros(size, dtype=np.int64)
        self._t[0] = horizon_floor
        self._lo = 0
        self._hi = 1

    @property
    def _times(self):
        return self._t[self._lo : self._hi]

    @property
    def _levels(self):
        return self._v[self._lo : self._hi]

    @property
    def horizon_floor(self) -> float:
        return float(self._t[self._lo])

    @property
    def baseline(self) -> int:
        """Occupancy at ``horizon_floor``."""
        return int(self._v[self._lo])

    @property
    def breakpoints(self) -> dict[float, int]:
        """Signed occupancy delta at each breakpoint after the floor."""
        deltas = np.diff(self._levels)
        return {float(t): int(x) for t, x in zip(self._times[1:], deltas) if x}

    def __len__(self):
        return self._hi - self._lo

    def _check(self, start, end):
        if not start < end:
            raise ValueError(f"empty interval [{start}, {end})")
        if start < self._t[self._lo]:
            raise GarbageCollectedError(
                f"query at {start} precedes horizon floor {self._t[self._lo]}"
            )

    def occupancy_at(self, t: float) -> int:
        if t < self._t[self._lo]:
            raise GarbageCollectedError(f"query at {t} precedes horizon floor {self.horizon_floor}")
        times = self._t[self._lo : self._hi]
        return int(self._v[self._lo + times.searchsorted(t, "right") - 1])

    def max_occupancy(self, start: float, end: float) -> int:
        """Maximum occupancy over ``[start, end)``."""
        self._check(start, end)
        lo = self._lo
        times = self._t[lo : self._hi]
        i = lo + times.searchsorted(start, "right") - 1
        j = lo + times.searchsorted(end, "left")
        return int(self._v[i:j].max())

    def _room(self):
        n = self._hi - self._lo
        if self._lo >= len(self._t) // 4:
            self._t[:n] = self._t[self._lo : self._hi]
            self._v[:n] = self._v[self._lo : self._hi]
        else:
            t = np.empty(2 * len(self._t), dtype=float)
            v = np.zeros(2 * len(self._v), dtype=np.int64)
            t[:n] = self._t[self._lo : self._hi]
            v[:n] = self._v[self._lo : self._hi]
            self._t, self._v = t, v
        self._lo, self._hi = 0, n

    def _split(self, t: float) -> int:
        times = self._t[self._lo : self._hi]
        i = self._lo + times.searchsorted(t, "left")
        hi = self._hi
        if i < hi and self._t[i] == t:
            return i
        if hi == len(self._t):
            self._room()
            return self._split(t)
        self._t[i + 1 : hi + 1] = self._t[i:hi]
        self._v[i + 1 : hi + 1] = self._v[i:hi]
        self._t[i] = t
        self._v[i] = self._v[i - 1]
        self._hi = hi + 1
        return i

    def reserve(self, start: float, end: float) -> None:
        """Add one unit of occupancy on ``[start, end)``."""
        self._check(start, end)
        self._split(start)
        j = self._split(end)
        i = self._lo + self._t[self._lo : self._hi].searchsorted(start, "left")
        self._v[i:j] += 1

    def release_before(self, t: float) -> None:
        """Forget history before ``t``; queries at times >= t are unaffected."""
        if t <= self._t[self._lo]:
            return
        times = self._t[self._lo : self._hi]
        i = self._lo + times.searchsorted(t, "right") - 1
        self._t[i] = t
        self._lo = i

    def copy(self) -> "BookingLedger":
        other = BookingLedger.__new__(BookingLedger)
        other._t = self._t.copy()
        other._v = self._v.copy()
        other._lo, other._hi = self._lo, self._hi
        return other


def max_occupancy(ledger: BookingLedger, interval) -> int:
    return ledger.max_occupancy(*interval)


def reserve(ledger: BookingLedger, interval) -> BookingLedger:
    ledger.reserve(*interval)
    return ledger


def release_before(ledger: BookingLedger, t: float) -> BookingLedger:
    ledger.release_before(t)
    return ledger


@dataclass
class SystemConfig:
    capacity: int
    classes: list[ClassSpec]
    epsilon: float = 0.01
    horizon: float = 1000.0
    warmup_fraction: float = 0.2
    extra: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if int(self.capacity) != self.capacity or self.capacity < 0:
            raise ValueError(f"capacity must be a non-negative integer, got {self.capacity}")
        self.capacity = int(self.capacity)
        if not self.classes:
            raise ValueError("at least one class is required")
        ids = [c.class_id for c in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class ids {ids}")
        if not 0 < self.epsilon < 1:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0 <= self.warmup_fraction < 1:
            raise ValueError(f"warmup_fraction must lie in [0, 1), got {self.warmup_fraction}")
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        rho = self.rho
        if not math.isfinite(rho):
            raise ValueError("traffic intensity is not finite")
        if self.capacity > 0:
            bound = min(float(c.load) for c in self.classes) / self.capacity
            if self.epsilon >= bound:
                log.warning(
                    "epsilon=%g is not below min_k(lambda_k mu_k / C)=%g", self.epsilon, bound
                )

    @property
    def rho(self) -> float:
        return float(sum(c.load for c in self.classes))

    @property
    def total_rate(self) -> float:
        return float(sum(c.arrival_rate for c in self.classes))

    @property
    def max_delay(self) -> int:
        return max(c.max_delay for c in self.classes)

    @property
    def max_duration(self) -> int:
        return max(c.max_duration for c in self.classes)

    def class_by_id(self, class_id: int) -> ClassSpec:
        for c in self.classes:
            if c.class_id == class_id:
                return c
        raise KeyError(class_id)


def _number(x):
    """Keep ints and decimal strings exact; everything else becomes float."""
    if isinstance(x, bool):
        raise TypeError("boolean is not a number")
    if isinstance(x, int):
        return x
    if isinstance(x, str):
        return Fraction(x)
    return float(x)


def class_from_dict(raw: Mapping[str, Any], default_id: int) -> ClassSpec:
    pmf: dict[tuple[int, int], Any] = {}
    for triple in raw["pmf"]:
        d, s, p = triple
        pmf[(int(d), int(s))] = pmf.get((int(d), int(s)), 0) + _number(p)
    return ClassSpec(
        class_id=int(raw.get("class_id", default_id)),
        arrival_rate=_number(raw["arrival_rate"]),
        reward_rate=_number(raw.get("reward_rate", 0.0)),
        joint_pmf=pmf,
    )


def class_to_dict(spec: ClassSpec) -> dict:
    return {
        "class_id": spec.class_id,
        "arrival_rate": float(spec.arrival_rate),
        "reward_rate": float(spec.reward_rate),
        "pmf": [[d, s, float(p)] for (d, s), p in spec.joint_pmf.items()],
    }


CONFIG_KEYS = {"capacity", "epsilon", "horizon", "warmup_fraction", "classes"}


def config_from_dict(raw: Mapping[str, Any]) -> SystemConfig:
    classes = [class_from_dict(c, i + 1) for i, c in enumerate(raw["classes"])]
    extra = {k: v for k, v in raw.items() if k not in CONFIG_KEYS}
    return SystemConfig(
        capacity=raw["capacity"],
        classes=classes,
        epsilon=float(raw.get("epsilon", 0.01)),
        horizon=float(raw.get("horizon", 1000.0)),
        warmup_fraction=float(raw.get("warmup_fraction", 0.2)),
        extra=extra,
    )


def config_to_dict(config: SystemConfig) -> dict:
    out = {
        "capacity": config.capacity,
        "epsilon": config.epsilon,
        "horizon": config.horizon,
        "warmup_fraction": config.warmup_fraction,
        "classes": [class_to_dict(c) for c in config.classes],
    }
    out.update(config.extra)
    return out


def load_config(path) -> SystemConfig:
    with open(Path(path)) as fh:
        return config_from_dict(json.load(fh))


def uniform_pmf(delays: Iterable[int], durations: Iterable[int]) -> dict[tuple[int, int], Fraction]:
    """Independent uniform delay and duration, as an exact joint pmf."""
    delays, durations = list(delays), list(durations)
    p = Fraction(1, len(delays) * len(durations))
    return {(d, s): p for d in delays for s in durations}
