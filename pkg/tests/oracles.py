"""Independent numerical oracles shared by the test modules.

Everything here recomputes target quantities by a route different from the
library implementation (grid suprema, Monte-Carlo, exhaustive search), so
agreement is evidence rather than tautology.
"""
from __future__ import annotations

import numpy as np


def grid_sup_conjugate(cost, mu: float, n: int = 4096) -> float:
    """sup_q (mu q - lam(q)) over an n-point grid on [0, total mass]."""
    qs = np.linspace(0.0, cost.total_mass, n)
    vals = mu * qs - np.asarray(cost.lam(qs))
    return float(np.max(vals[np.isfinite(vals)]))


def grid_sup_biconjugate(cost, q: float, mu_hi: float, n: int = 4096) -> float:
    """sup_mu (q mu - conjugate(mu)) over an n-point grid on [0, mu_hi]."""
    mus = np.linspace(0.0, mu_hi, n)
    vals = q * mus - np.asarray(cost.conjugate(mus))
    return float(np.max(vals[np.isfinite(vals)]))


def ks_distance(curve, samples: np.ndarray, grid: int = 4096) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF of ``samples``
    and the curve, evaluated on a dense quantile grid plus the sample points."""
    samples = np.sort(np.asarray(samples, dtype=float))
    n = samples.size
    xs = np.concatenate([samples, np.asarray(curve.inverse(np.linspace(1e-6, 1 - 1e-6, grid)))])
    xs = np.unique(xs)
    emp = np.searchsorted(samples, xs, side="right") / n
    model = np.asarray(curve.eval(xs))
    return float(np.max(np.abs(emp - model)))
