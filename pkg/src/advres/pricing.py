"""Static pricing: choose one price per class so that the induced load fits
the capacity budget ``(1 - epsilon) C`` while revenue is maximal.

The constrained problem is solved through its Lagrangian.  For a multiplier
``theta`` every class independently maximises ``(r - theta) * rate(r)``;
the achieved load is non-increasing in ``theta``, so the smallest feasible
multiplier is found by bisection.  ``cross_validate_nlp1`` solves the joint
price-and-admission problem by brute-force grid search as an independent
check on the Lagrangian route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import ClassSpec

FAMILIES = ("linear", "exponential")
GOLDEN_TOL = 1e-9
_INV_PHI = (math.sqrt(5) - 1) / 2


@dataclass(frozen=True)
class DemandCurve:
    """Arrival rate as a function of price, vanishing at ``choke_price``.

    ``linear``: ``lambda0 * (1 - r / choke_price)``.
    ``exponential``: an exponential decay shifted down so it hits zero at the
    choke price, ``lambda0 * (exp(-beta r) - exp(-beta r_inf)) / (1 - exp(-beta r_inf))``.
    """

    family: str
    lambda0: float
    choke_price: float
    beta: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown demand family {self.family!r}; expected one of {FAMILIES}")
        if self.lambda0 < 0:
            raise ValueError("lambda0 must be >= 0")
        if not self.choke_price > 0:
            raise ValueError("choke_price must be positive")
        if self.family == "exponential" and not self.beta > 0:
            raise ValueError("exponential demand needs beta > 0")

    def _tail(self):
        return math.exp(-self.beta * self.choke_price)

    def rate(self, r):
        """Demand at price ``r``; prices are clipped to ``[0, choke_price]``."""
        r = np.clip(r, 0.0, self.choke_price)
        if self.family == "linear":
            out = self.lambda0 * (1.0 - r / self.choke_price)
        else:
            tail = self._tail()
            out = self.lambda0 * (np.exp(-self.beta * r) - tail) / (1.0 - tail)
        return np.maximum(out, 0.0)

    def revenue_slope_bound(self) -> float:
        """Upper bound on ``|d(r * rate(r)) / dr|`` over ``[0, choke_price]``."""
        if self.family == "linear":
            return float(self.lambda0)
        tail = self._tail()
        return float(self.lambda0 + self.choke_price * self.lambda0 * self.beta / (1.0 - tail))

    @classmethod
    def from_dict(cls, raw: Mapping) -> "DemandCurve":
        return cls(
            family=raw["family"],
            lambda0=float(raw["lambda0"]),
            choke_price=float(raw["choke_price"]),
            beta=float(raw.get("beta", 0.0)),
        )


def mean_duration(pmf: Mapping[tuple[int, int], float]) -> float:
    return float(sum(s * p for (_, s), p in pmf.items()))


def _golden_max(f, lo: float, hi: float, tol: float = GOLDEN_TOL) -> float:
    a, b = lo, hi
    x1 = b - _INV_PHI * (b - a)
    x2 = a + _INV_PHI * (b - a)
    f1, f2 = f(x1), f(x2)
    while b - a > tol:
        if f1 < f2:
            a, x1, f1 = x1, x2, f2
            x2 = a + _INV_PHI * (b - a)
            f2 = f(x2)
        else:
            b, x2, f2 = x2, x1, f1
            x1 = b - _INV_PHI * (b - a)
            f1 = f(x1)
    return (a + b) / 2


def best_price(curve: DemandCurve, theta: float, check_points: int = 65) -> float:
    """Maximiser of ``(r - theta) * rate(r)`` over ``[0, choke_price]``.

    Raises ``ValueError`` when a coarse grid beats the golden-section result,
    which means the objective is not unimodal on the bracket.
    """
    top = curve.choke_price
    if theta >= top or curve.lambda0 == 0:
        return top
    if curve.family == "linear":
        return min((top + theta) / 2, top)
    lo = max(theta, 0.0)

    def f(r):
        return (r - theta) * float(curve.rate(r))

    r = _golden_max(f, lo, top)
    grid = np.linspace(lo, top, check_points)
    values = (grid - theta) * curve.rate(grid)
    if values.max() > f(r) + 1e-9 * max(1.0, abs(values.max())):
        raise ValueError(
            f"inner maximisation not unimodal at theta={theta}: grid value "
            f"{values.max()} beats golden-section value {f(r)}"
        )
    return r


@dataclass(frozen=True)
class PricingResult:
    theta: float
    prices: tuple[float, ...]
    rates: tuple[float, ...]
    loads: tuple[float, ...]
    objective: float
    budget: float
    iterations: int

    @property
    def total_load(self) -> float:
        return float(sum(self.loads))

    def rows(self, class_ids: Sequence[int] | None = None) -> list[dict]:
        ids = class_ids or range(1, len(self.prices) + 1)
        total = self.total_load
        return [
            {
                "class_id": k,
                "price": r,
                "rate": lam,
                "load": load,
                "load_share": load / total if total > 0 else 0.0,
                "theta": self.theta,
                "objective": self.objective,
            }
            for k, r, lam, load in zip(ids, self.prices, self.rates, self.loads)
        ]


PRICING_COLUMNS = ["class_id", "price", "rate", "load", "load_share", "theta", "objective"]


def _evaluate(curves, mus, theta):
    prices = [best_price(c, theta) for c in curves]
    rates = [float(c.rate(r)) for c, r in zip(curves, prices)]
    loads = [lam * mu for lam, mu in zip(rates, mus)]
    return prices, rates, loads


def load_at(curves: Sequence[DemandCurve], pmfs: Sequence[Mapping], theta: float) -> float:
    """Total load induced by the per-class maximisers at multiplier ``theta``."""
    mus = [mean_duration(p) for p in pmfs]
    return float(sum(_evaluate(curves, mus, theta)[2]))


def solve_nlp2(
    curves: Sequence[DemandCurve],
    pmfs: Sequence[Mapping],
    capacity: float,
    epsilon: float,
    tol: float = 1e-9,
    max_iter: int = 200,
) -> PricingResult:
    """Smallest multiplier whose separable price maximisers fit the budget."""
    if len(curves) != len(pmfs):
        raise ValueError("need one pmf per demand curve")
    if not curves:
        raise ValueError("no classes to price")
    mus = [mean_duration(p) for p in pmfs]
    budget = (1 - epsilon) * capacity

    def result(theta, it):
        prices, rates, loads = _evaluate(curves, mus, theta)
        obj = sum(r * load for r, load in zip(prices, loads))
        return PricingResult(theta, tuple(prices), tuple(rates), tuple(loads), obj, budget, it)

    if budget <= 0:
        prices = tuple(float(c.choke_price) for c in curves)
        zeros = (0.0,) * len(curves)
        return PricingResult(max(prices), prices, zeros, zeros, 0.0, budget, 0)

    if sum(_evaluate(curves, mus, 0.0)[2]) <= budget:
        return result(0.0, 0)

    lo, hi = 0.0, max(c.choke_price for c in curves)
    it = 0
    while it < max_iter:
        it += 1
        mid = (lo + hi) / 2
        if sum(_evaluate(curves, mus, mid)[2]) > budget:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol and budget - sum(_evaluate(curves, mus, hi)[2]) <= tol * capacity:
            break
    return result(hi, it)


def knapsack_values(prices: np.ndarray, loads: np.ndarray, budget: float) -> np.ndarray:
    """Fractional-knapsack revenue per row: fill load in order of decreasing price.

    ``prices`` and ``loads`` have shape ``(n, K)``.  Revenue per unit load of
    class ``k`` is its price, so the greedy fill is exact.
    """
    order = np.argsort(-prices, axis=1, kind="stable")
    p = np.take_along_axis(prices, order, axis=1)
    w = np.take_along_axis(loads, order, axis=1)
    before = np.cumsum(w, axis=1) - w
    with np.errstate(divide="ignore", invalid="ignore"):
        take = np.where(w > 0, np.clip((budget - before) / w, 0.0, 1.0), 0.0)
    return (p * w * take).sum(axis=1)


@dataclass(frozen=True)
class CrossValidation:
    nlp1_objective: float
    nlp2_objective: float
    gap: float
    error_bound: float
    nlp1_prices: tuple[float, ...]
    nlp2_prices: tuple[float, ...]


def nlp1_grid(
    curves: Sequence[DemandCurve],
    pmfs: Sequence[Mapping],
    capacity: float,
    epsilon: float,
    grid_points: int = 101,
    chunk: int = 1 << 20,
) -> tuple[float, tuple[float, ...], float]:
    """Joint price grid with the admission fractions solved exactly per grid point.

    Returns ``(objective, prices, error_bound)``.  Rounding an optimal price
    vector up to the grid keeps it feasible and loses at most
    ``sum_k h_k * mu_k * sup|d(r rate_k)/dr|`` in revenue.
    """
    if len(curves) > 3:
        raise ValueError("joint grid search is limited to 3 classes")
    mus = np.array([mean_duration(p) for p in pmfs])
    budget = max((1 - epsilon) * capacity, 0.0)
    axes = [np.linspace(0.0, c.choke_price, grid_points) for c in curves]
    rate_axes = [c.rate(a) for c, a in zip(curves, axes)]
    best, best_idx = -math.inf, None
    total = grid_points ** len(curves)
    flat = np.arange(total)
    for start in range(0, total, chunk):
        idx = np.stack(np.unravel_index(flat[start : start + chunk], (grid_points,) * len(curves)), axis=1)
        prices = np.stack([a[idx[:, k]] for k, a in enumerate(axes)], axis=1)
        loads = np.stack([r[idx[:, k]] for k, r in enumerate(rate_axes)], axis=1) * mus
        values = knapsack_values(prices, loads, budget)
        j = int(values.argmax())
        if values[j] > best:
            best, best_idx = float(values[j]), idx[j]
    prices = tuple(float(axes[k][i]) for k, i in enumerate(best_idx))
    bound = sum(
        c.choke_price / (grid_points - 1) * mu * c.revenue_slope_bound() for c, mu in zip(curves, mus)
    )
    return best, prices, float(bound)


def cross_validate_nlp1(
    curves: Sequence[DemandCurve],
    pmfs: Sequence[Mapping],
    capacity: float,
    epsilon: float,
    grid_points: int = 101,
) -> CrossValidation:
    obj1, prices1, bound = nlp1_grid(curves, pmfs, capacity, epsilon, grid_points)
    sol = solve_nlp2(curves, pmfs, capacity, epsilon)
    return CrossValidation(obj1, sol.objective, abs(obj1 - sol.objective), bound, prices1, sol.prices)


def priced_classes(
    result: PricingResult, pmfs: Sequence[Mapping], class_ids: Sequence[int] | None = None
) -> list[ClassSpec]:
    """Classes with arrival rates and rewards fixed at the solved prices."""
    ids = class_ids or range(1, len(pmfs) + 1)
    return [
        ClassSpec(k, lam, r, pmf) for k, lam, r, pmf in zip(ids, result.rates, result.prices, pmfs)
    ]
