"""Merged reservation/service distributions and pre-arrival rates.

Superposing the class streams gives one Poisson stream of rate
``total_rate`` whose ``(delay, duration)`` marks follow the rate-weighted
mixture of the class pmfs.  Arithmetic stays exact (``Fraction``) when every
input is rational and silently becomes float otherwise.
"""

from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Sequence

from .core import PMF_TOL, ClassSpec


@dataclass(frozen=True)
class MergedDistribution:
    total_rate: object
    joint_pmf: dict  # (d, s) -> probability

    def __post_init__(self):
        if not self.total_rate > 0:
            raise ValueError("merged distribution needs a positive total rate")
        total = sum(self.joint_pmf.values())
        if abs(total - 1) > PMF_TOL:
            raise ValueError(f"joint pmf sums to {float(total)!r}")

    @property
    def max_delay(self) -> int:
        return max(d for (d, s), p in self.joint_pmf.items() if p > 0)

    @property
    def max_duration(self) -> int:
        return max(s for (d, s), p in self.joint_pmf.items() if p > 0)

    @property
    def support(self) -> list[tuple[int, int]]:
        return sorted(k for k, p in self.joint_pmf.items() if p > 0)

    @property
    def delay_pmf(self) -> dict:
        """Marginal of the delay, entries ``gamma_d``."""
        out = {}
        for (d, _), p in self.joint_pmf.items():
            out[d] = out.get(d, 0) + p
        return dict(sorted(out.items()))

    @property
    def duration_pmf(self) -> dict:
        """Marginal of the duration, entries ``kappa_s``."""
        out = {}
        for (_, s), p in self.joint_pmf.items():
            out[s] = out.get(s, 0) + p
        return dict(sorted(out.items()))

    def conditional_delay_pmf(self, s: int) -> dict:
        """``P(D = d | S = s)``; undefined (KeyError) when ``kappa_s == 0``."""
        kappa = self.duration_pmf.get(s, 0)
        if not kappa > 0:
            raise KeyError(f"duration {s} has zero probability; conditional pmf undefined")
        out = {}
        for (d, ss), p in self.joint_pmf.items():
            if ss == s:
                out[d] = out.get(d, 0) + _ratio(p, kappa)
        return dict(sorted(out.items()))

    @property
    def mean_service(self):
        return sum(s * k for s, k in self.duration_pmf.items())

    @property
    def rho(self):
        return self.total_rate * self.mean_service

    def with_rate(self, total_rate) -> "MergedDistribution":
        return MergedDistribution(total_rate, dict(self.joint_pmf))

    def pre_arrival_rate(self, d: int, s: int):
        return pre_arrival_rate(self, d, s)


def _ratio(a, b):
    """``a / b``, exact when both are rational."""
    if isinstance(a, (int, Fraction)) and isinstance(b, (int, Fraction)):
        return Fraction(a) / Fraction(b)
    return a / b


def merge_classes(classes: Sequence[ClassSpec]) -> MergedDistribution:
    total = sum(c.arrival_rate for c in classes)
    if not total > 0:
        raise ValueError("all classes have zero arrival rate")
    joint = {}
    for c in classes:
        if not c.arrival_rate > 0:
            continue
        w = _ratio(c.arrival_rate, total)
        for key, p in c.joint_pmf.items():
            joint[key] = joint.get(key, 0) + w * p
    return MergedDistribution(total, dict(sorted(joint.items())))


def single_class(joint_pmf: dict, rate) -> MergedDistribution:
    return MergedDistribution(rate, dict(sorted(joint_pmf.items())))


def pre_arrival_rate(dist: MergedDistribution, d: int, s: int):
    """Rate of already-booked set-``s`` customers whose service ends in ``(d, d+1]``.

    Equivalently: set-``s`` starting times in ``(d-s, d-s+1]`` that have
    been booked before time 0.  Equals ``kappa_s * lambda`` when the slot
    lies entirely in the past and 0 once every admissible delay is used up.
    """
    if s < 1 or d < 0:
        raise ValueError(f"need s >= 1 and d >= 0, got d={d}, s={s}")
    gamma = dist.conditional_delay_pmf(s)
    kappa = dist.duration_pmf[s]
    base = kappa * dist.total_rate
    last = d - s
    if last < 0:
        return base
    if last >= max(gamma):
        return 0 * base
    consumed = sum(p for i, p in gamma.items() if i <= last)
    return base * max(1 - consumed, 0)


def piecewise_prearrival_profile(dist: MergedDistribution, per_service: bool = False):
    """Intensity of booked starting times as seen by an arrival at time 0.

    Returns a list of ``((lo, hi), rate)`` pieces: ``(-inf, 0]`` carries the
    full rate, ``(d-1, d]`` carries the rate of customers whose delay is at
    least ``d``, and ``(u, inf)`` is empty.  With ``per_service=True`` a dict
    ``s -> pieces`` is returned instead, one profile per service set.
    """
    if per_service:
        return {
            s: _profile(dist.conditional_delay_pmf(s), kappa * dist.total_rate)
            for s, kappa in dist.duration_pmf.items()
            if kappa > 0
        }
    return _profile(dist.delay_pmf, dist.total_rate)


def _profile(gamma: dict, rate):
    u = max(d for d, p in gamma.items() if p > 0)
    pieces = [((-math.inf, 0), rate)]
    consumed = 0
    for d in range(1, u + 1):
        consumed += gamma.get(d - 1, 0)
        pieces.append(((d - 1, d), rate * max(1 - consumed, 0)))
    pieces.append(((u, math.inf), 0 * rate))
    return pieces


def profile_rate_at(pieces, r: float):
    for (lo, hi), rate in pieces:
        if lo < r <= hi or (lo == -math.inf and r <= hi):
            return rate
    return pieces[-1][1]
