"""Two neighbouring problems solved with the same acquisition-cost machinery.

Budget-constrained bidding flips the contract problem around: maximize the
value of items won subject to a spend ceiling.  The optimal bid for item j is
``g_j^{-1}(v_j / theta)`` -- the shaded valuation under a second-price rule --
where the single multiplier ``theta`` makes total spend meet the budget and
comes out of a monotone bisection.

The second problem prices portfolio construction against order-book depth:
buying volume V of an asset walks up the book, and the cost beyond mid-price
notional equals the second-price acquisition cost of the book's unnormalized
supply curve.  That makes transaction costs convex in volume, so a
mean-variance portfolio with realistic market-order costs is one convex
program (solved by proximal gradient) with a smooth conjugate dual in
Cholesky coordinates (solved quasi-Newton); each solve certifies the other
through the duality gap.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import bisect, brentq, minimize

from .curves import Empirical, PowerLawDensity, SupplyCurve, curve_from_json
from .model import ItemType

__all__ = [
    "BudgetInstance",
    "BudgetSlack",
    "LobMarket",
    "InsufficientDepth",
    "MarkowitzInstance",
    "NotConverged",
    "solve_budget",
    "budget_bids",
    "budget_spend",
    "lob_cost",
    "lob_curve_from_density_csv",
    "solve_markowitz_primal",
    "solve_markowitz_dual",
    "markowitz_objective",
    "markowitz_dual_objective",
    "markowitz_to_json",
    "markowitz_from_json",
]


class BudgetSlack(Exception):
    """The budget covers bidding the maximum on everything; no multiplier binds.

    Carries the degenerate answer: ``theta = 0`` and the max-bid vector
    (entries are ``x_bar``, possibly inf for unbounded supports).
    """

    def __init__(self, bids: np.ndarray):
        self.theta = 0.0
        self.bids = bids
        super().__init__("budget exceeds the cost of maximal bids on every item")


class InsufficientDepth(ValueError):
    """A market order larger than the book's total depth cannot fill."""

    def __init__(self, volume: float, depth: float):
        self.volume = volume
        self.depth = depth
        super().__init__(f"requested volume {volume:.6g} exceeds book depth {depth:.6g}")


class NotConverged(RuntimeError):
    """Iteration budget exhausted above the requested residual or gap."""

    def __init__(self, best, residual: float):
        self.best = best
        self.residual = residual
        super().__init__(f"did not converge: residual {residual:.3e}")


# ---------------------------------------------------------------------------
# budget-constrained bidding


@dataclass(frozen=True)
class BudgetInstance:
    """Value-maximizing bidder: items with per-item values and one spend cap."""

    items: tuple[ItemType, ...]
    values: np.ndarray
    budget: float

    def __post_init__(self):
        object.__setattr__(self, "items", tuple(self.items))
        values = np.asarray(self.values, dtype=float)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if values.shape != (len(self.items),):
            raise ValueError("need one value per item")
        if not np.all(np.isfinite(values)) or np.any(values < 0.0):
            raise ValueError("values must be finite and nonnegative")
        if not np.any(values > 0.0):
            raise ValueError("at least one item value must be positive")
        if not (self.budget > 0.0 and math.isfinite(self.budget)):
            raise ValueError("budget must be positive and finite")

    @property
    def n_items(self) -> int:
        return len(self.items)


def budget_bids(bi: BudgetInstance, theta: float) -> np.ndarray:
    """Bids g_j^{-1}(v_j / theta); theta = 0 means bid the support maximum."""
    bids = np.zeros(bi.n_items)
    for j, it in enumerate(bi.items):
        if theta == 0.0:
            bids[j] = it.curve.x_bar
            continue
        if bi.values[j] == 0.0:
            continue
        cost = it.cost
        mu = bi.values[j] / theta
        cap = cost.bid_cap
        if math.isfinite(cap):
            mu = min(mu, cap)
        bids[j] = float(cost.bid_mapping_inverse(mu))
    return bids


def budget_spend(bi: BudgetInstance, theta: float) -> float:
    """Total spend rate at the bids implied by multiplier ``theta``."""
    bids = budget_bids(bi, theta)
    return sum(it.arrival_rate * float(it.cost.expected_cost(x)) for it, x in zip(bi.items, bids))


def solve_budget(bi: BudgetInstance, tol: float = 1e-10) -> tuple[float, np.ndarray]:
    """Multiplier and bids making total spend meet the budget exactly.

    Spend is continuous and nonincreasing in theta (bids shrink as the
    multiplier grows), so the root brackets by doubling/halving and closes by
    bisection to ``tol``.  Raises BudgetSlack when even maximal bids cost no
    more than the budget.
    """
    max_spend = budget_spend(bi, 0.0)
    if bi.budget >= max_spend:
        raise BudgetSlack(budget_bids(bi, 0.0))

    def excess(theta: float) -> float:
        return budget_spend(bi, theta) - bi.budget

    hi = 1.0
    for _ in range(200):
        if excess(hi) < 0.0:
            break
        hi *= 2.0
    else:  # pragma: no cover - spend -> 0 as theta grows
        raise RuntimeError("could not bracket the budget multiplier from above")
    lo = hi / 2.0
    for _ in range(2000):
        if excess(lo) > 0.0:
            break
        lo /= 2.0
    else:  # pragma: no cover - spend -> max_spend > B as theta -> 0
        raise RuntimeError("could not bracket the budget multiplier from below")

    theta = float(bisect(excess, lo, hi, xtol=tol))
    return theta, budget_bids(bi, theta)


# ---------------------------------------------------------------------------
# limit-order-book costs


@dataclass(frozen=True)
class LobMarket:
    """Order-book depth per asset as unnormalized supply curves.

    ``curves[j]`` maps a price offset p (above mid) to the volume available
    at or below it; total mass is the book's full depth for that asset.
    """

    curves: tuple[SupplyCurve, ...]

    def __post_init__(self):
        object.__setattr__(self, "curves", tuple(self.curves))
        if not self.curves:
            raise ValueError("need at least one asset")

    @property
    def n_assets(self) -> int:
        return len(self.curves)

    def depth(self, j: int) -> float:
        return self.curves[j].total_mass


def lob_curve_from_density_csv(path) -> Empirical:
    """Piecewise-linear depth profile from (price_offset, density) CSV rows.

    Densities are interpolated linearly between offsets (trapezoid volume per
    segment), so the cumulative curve is piecewise linear through the
    integrated breakpoints.  A positive first offset leaves a spread gap with
    zero volume below it.  A single header row is tolerated.
    """
    rows: list[tuple[float, float]] = []
    with open(path, newline="") as fh:
        for k, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except (ValueError, IndexError):
                if k == 0:
                    continue
                raise ValueError(f"{path}: malformed density row {k}: {row!r}") from None
    if len(rows) < 2:
        raise ValueError(f"{path}: need at least two density samples")
    offsets = np.array([r[0] for r in rows])
    dens = np.array([r[1] for r in rows])
    if offsets[0] < 0.0 or not np.all(np.diff(offsets) > 0.0):
        raise ValueError(f"{path}: price offsets must be nonnegative and strictly increasing")
    if np.any(dens < 0.0):
        raise ValueError(f"{path}: densities must be nonnegative")
    seg = 0.5 * (dens[:-1] + dens[1:]) * np.diff(offsets)
    if np.any(seg <= 0.0):
        raise ValueError(f"{path}: zero-volume segment; depth must be strictly increasing")
    volume = np.concatenate([[0.0], np.cumsum(seg)])
    return Empirical(list(zip(offsets.tolist(), volume.tolist())))


def lob_cost(market: LobMarket, j: int, volume: float) -> float:
    """Cost of a market order of size ``volume`` beyond mid-price notional.

    Walking the book up to the marginal price W^{-1}(V) costs the integral of
    the quantile -- the second-price acquisition cost of the depth curve.
    """
    if volume < 0.0:
        raise ValueError("volume must be nonnegative")
    curve = market.curves[j]
    depth = curve.total_mass
    if volume > depth * (1.0 + 1e-12):
        raise InsufficientDepth(volume, depth)
    return float(curve.integral_quantile(min(volume, depth)))


# ---------------------------------------------------------------------------
# portfolio construction against the book


@dataclass(frozen=True)
class MarkowitzInstance:
    """Mean-variance portfolio with market-order costs from ``lob``.

    ``lob=None`` is the frictionless limit: no transaction costs and no
    short-selling restriction.  With a book present, positions are long-only
    and capped by each asset's depth.
    """

    alpha: np.ndarray
    sigma: np.ndarray
    risk_aversion: float
    lob: LobMarket | None = None

    def __post_init__(self):
        alpha = np.asarray(self.alpha, dtype=float)
        sigma = np.asarray(self.sigma, dtype=float)
        alpha.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "sigma", sigma)
        m = alpha.size
        if sigma.shape != (m, m):
            raise ValueError("sigma must be square and match alpha")
        if not np.allclose(sigma, sigma.T, atol=1e-12):
            raise ValueError("sigma must be symmetric")
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError:
            raise ValueError("sigma must be positive definite") from None
        if not (self.risk_aversion > 0.0 and math.isfinite(self.risk_aversion)):
            raise ValueError("risk_aversion must be positive and finite")
        if self.lob is not None and self.lob.n_assets != m:
            raise ValueError("lob must cover every asset")

    @property
    def n_assets(self) -> int:
        return int(self.alpha.size)


def markowitz_to_json(mi: MarkowitzInstance) -> dict:
    return {
        "alpha": mi.alpha.tolist(),
        "sigma": mi.sigma.tolist(),
        "risk_aversion": mi.risk_aversion,
        "lob": None if mi.lob is None else [c.to_json() for c in mi.lob.curves],
    }


def markowitz_from_json(obj: dict) -> MarkowitzInstance:
    lob = obj.get("lob")
    market = None if lob is None else LobMarket(tuple(curve_from_json(c) for c in lob))
    return MarkowitzInstance(
        alpha=np.asarray(obj["alpha"], dtype=float),
        sigma=np.asarray(obj["sigma"], dtype=float),
        risk_aversion=float(obj["risk_aversion"]),
        lob=market,
    )


def markowitz_objective(mi: MarkowitzInstance, x: np.ndarray) -> float:
    """Risk plus transaction costs minus forecast returns at portfolio x."""
    x = np.asarray(x, dtype=float)
    quad = 0.5 * mi.risk_aversion * float(x @ mi.sigma @ x) - float(mi.alpha @ x)
    if mi.lob is None:
        return quad
    if np.any(x < 0.0):
        return math.inf
    return quad + sum(lob_cost(mi.lob, j, float(x[j])) for j in range(mi.n_assets))


def _prox_volume(curve: SupplyCurve, z: float, t: float) -> float:
    """argmin_y Lambda(y) + (y - z)^2 / (2t) over 0 <= y <= depth."""
    if z <= 0.0:
        return 0.0
    mass = curve.total_mass
    if isinstance(curve, PowerLawDensity):
        # Lambda'(y) = sqrt(2 y / w0); quadratic in sqrt(y)
        b = math.sqrt(2.0 / curve.w0)
        u = 0.5 * (-t * b + math.sqrt(t * t * b * b + 4.0 * z))
        return min(u * u, mass)
    x_bar = curve.x_bar
    if math.isfinite(x_bar) and mass + t * x_bar <= z:
        return mass

    def balance(y: float) -> float:
        return y + t * float(curve.inverse(y)) - z

    hi = mass if math.isfinite(x_bar) else mass * (1.0 - 1e-14)
    if balance(hi) <= 0.0:
        return mass
    return max(float(brentq(balance, 0.0, hi, xtol=1e-14)), 0.0)


def solve_markowitz_primal(
    mi: MarkowitzInstance, tol: float = 1e-8, max_iter: int = 20000
) -> np.ndarray:
    """Accelerated proximal gradient on the cost-aware portfolio objective.

    Momentum with gradient restarts; the fixed step is 1 over the quadratic
    term's Lipschitz constant.  Stops when the prox-gradient stationarity
    residual falls below ``tol``; raises NotConverged past ``max_iter``.
    """
    m = mi.n_assets
    risk = mi.risk_aversion
    step = 1.0 / (risk * float(np.linalg.eigvalsh(mi.sigma)[-1]))

    def prox(z: np.ndarray) -> np.ndarray:
        if mi.lob is None:
            return z
        return np.array([_prox_volume(mi.lob.curves[j], float(z[j]), step) for j in range(m)])

    def forward(x: np.ndarray) -> np.ndarray:
        return prox(x - step * (risk * (mi.sigma @ x) - mi.alpha))

    x = np.zeros(m)
    y = x
    momentum = 1.0
    residual = math.inf
    for _ in range(max_iter):
        x_new = forward(y)
        x_test = forward(x_new)
        residual = float(np.max(np.abs(x_test - x_new))) / step
        if residual <= tol:
            return x_test
        momentum_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * momentum**2))
        y_new = x_new + ((momentum - 1.0) / momentum_new) * (x_new - x)
        if float((y_new - x_new) @ (x_new - x)) > 0.0:  # restart on overshoot
            momentum_new, y_new = 1.0, x_new
        x, y, momentum = x_new, y_new, momentum_new
    raise NotConverged(x, residual)


def _conjugate_terms(mi: MarkowitzInstance, margins: np.ndarray) -> tuple[float, np.ndarray]:
    """sum_j Lambda_j^*(m_j) and its gradient (the book volume at each margin).

    The no-short extension makes the conjugate 0 with zero slope for m <= 0;
    above, it is the running integral of the depth curve, whose derivative is
    the cumulative volume itself -- no quantile inversions involved.
    """
    total = 0.0
    grad = np.zeros_like(margins)
    for j, curve in enumerate(mi.lob.curves):
        mj = float(margins[j])
        if mj <= 0.0:
            continue
        total += float(curve.integral_cdf(mj))
        grad[j] = float(curve.eval(mj))
    return total, grad


def markowitz_dual_objective(mi: MarkowitzInstance, zeta: np.ndarray) -> float:
    """Conjugate-cost value at ``zeta`` (Cholesky coordinates of phi)."""
    chol = np.linalg.cholesky(mi.sigma)
    if mi.lob is None:
        margins = mi.alpha - chol @ zeta
        if np.any(np.abs(margins) > 1e-9 * (1.0 + np.abs(mi.alpha))):
            return math.inf
        total = 0.0
    else:
        total, _ = _conjugate_terms(mi, mi.alpha - chol @ zeta)
    return total + 0.5 * float(zeta @ zeta) / mi.risk_aversion


def solve_markowitz_dual(
    mi: MarkowitzInstance, tol: float = 1e-8
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quasi-Newton solve of the conjugate dual; returns (zeta, phi, x).

    Minimizes ``sum_j Lambda_j^*(alpha_j - (L zeta)_j) + ||zeta||^2 / (2 risk)``
    with Sigma = L L^T.  The portfolio is recovered from stationarity: x is
    the book volume available at the margins alpha - phi, and the result is
    certified by the primal-dual objective gap (NotConverged beyond ``tol``).
    """
    chol = np.linalg.cholesky(mi.sigma)
    risk = mi.risk_aversion

    if mi.lob is None:
        # conjugate costs collapse to an equality constraint phi = alpha
        zeta = np.linalg.solve(chol, mi.alpha)
        x = np.linalg.solve(mi.sigma, mi.alpha) / risk
        return zeta, mi.alpha.copy(), x

    def objective(zeta: np.ndarray) -> tuple[float, np.ndarray]:
        value, volume = _conjugate_terms(mi, mi.alpha - chol @ zeta)
        value += 0.5 * float(zeta @ zeta) / risk
        return value, -chol.T @ volume + zeta / risk

    res = minimize(
        objective,
        np.zeros(mi.n_assets),
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": 5000, "ftol": 1e-18, "gtol": 1e-12},
    )
    zeta = res.x
    phi = chol @ zeta
    _, x = _conjugate_terms(mi, mi.alpha - phi)
    primal = markowitz_objective(mi, x)
    gap = primal + float(res.fun)
    if not (gap <= tol * (1.0 + abs(primal))):
        raise NotConverged((zeta, phi, x), gap)
    return zeta, phi, x
