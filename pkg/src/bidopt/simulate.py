"""Monte-Carlo replay of bid policies on synthetic auction streams.

The optimizer lives in a fluid model -- arrival rates, win probabilities,
expected payments.  This module checks that picture against a discrete-event
simulation.  Arrivals of each item type form independent Poisson processes
matching the model rates (a deterministic-arrival mode exists for
variance-free smoke tests); each arrival draws a clearing price from the
item's supply curve by inverse transform; the policy picks a contract to bid
for -- or abstains -- according to its per-arrival mixing weights.  A bid at
or above the price wins (ties win) and pays the price on second-price items
or the bid itself on first-price items.

Batches use RNG streams spawned from one seed, so runs are reproducible
bit-for-bit, batches are independent (they could run in parallel; sums over
batches are order-independent), and batch means give honest standard errors.
``ab_compare`` replays several policies against the *same* draws (common
random numbers): identical policies produce exactly zero cost difference, and
small true differences are not drowned in Monte-Carlo noise.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .costs import AuctionKind
from .model import ProblemInstance
from .solver import PrimalSolution

__all__ = [
    "BidPolicy",
    "SimulationReport",
    "ABComparison",
    "policy_from_primal",
    "simulate",
    "ab_compare",
]


@dataclass(frozen=True)
class BidPolicy:
    """Stationary bidding rule: one bid per item plus per-arrival mixing weights.

    ``gamma`` is edge-aligned with the instance (the order of ``edge_i`` /
    ``edge_j``): ``gamma[e]`` is the probability that an arrival of item
    ``edge_j[e]`` is bid on for contract ``edge_i[e]``.  An item's weights may
    sum to less than 1; the remainder abstains from the auction.
    """

    bids: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "bids", np.asarray(self.bids, dtype=float))
        object.__setattr__(self, "gamma", np.asarray(self.gamma, dtype=float))

    def check(self, inst: ProblemInstance) -> None:
        """Validate shapes and mixing invariants against an instance."""
        if self.bids.shape != (inst.n_items,):
            raise ValueError(
                f"policy has {self.bids.shape} bids; instance has {inst.n_items} items"
            )
        if self.gamma.shape != (inst.n_edges,):
            raise ValueError(
                f"policy has {self.gamma.shape} mixing weights; instance has {inst.n_edges} edges"
            )
        if not np.all(np.isfinite(self.bids)) or np.any(self.bids < 0.0):
            raise ValueError("bids must be finite and nonnegative")
        if np.any(self.gamma < -1e-12) or not np.all(np.isfinite(self.gamma)):
            raise ValueError("mixing weights must be nonnegative")
        mass = np.zeros(inst.n_items)
        np.add.at(mass, inst.edge_j, np.maximum(self.gamma, 0.0))
        if np.any(mass > 1.0 + 1e-9):
            j = int(np.argmax(mass))
            raise ValueError(
                f"item {inst.items[j].id!r}: mixing weights sum to {mass[j]:.12g} > 1"
            )


def policy_from_primal(inst: ProblemInstance, primal: PrimalSolution) -> BidPolicy:
    """Executable policy that realizes a primal solution's acquisition rates.

    ``primal.gamma`` says how wins split between contracts; the per-arrival
    weight also folds in the probability of bidding at all,
    ``s_j / (lambda_j W_j(x_j))``, so the realized win rate matches ``s_j``
    even when the solution leaves some win capacity unused.
    """
    bid_prob = np.zeros(inst.n_items)
    for j, it in enumerate(inst.items):
        lam_w = it.arrival_rate * float(it.curve.eval(float(primal.x[j])))
        if lam_w > 0.0 and primal.s[j] > 0.0:
            bid_prob[j] = min(1.0, float(primal.s[j]) / lam_w)
    return BidPolicy(bids=primal.x.copy(), gamma=primal.gamma * bid_prob[inst.edge_j])


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class SimulationReport:
    """Realized rates next to the fluid-model predictions, with standard errors.

    Predictions are policy-implied: win rate ``lambda_j m_j W_j(x_j)`` and
    cost rate ``sum_j lambda_j m_j f_j(x_j)`` where ``m_j`` is the item's
    total mixing weight and ``f_j`` the expected payment per auction.  For a
    policy built from a certified optimum these coincide with the convex
    program's rates and objective.
    """

    horizon: float
    n_batches: int
    seed: int
    arrival_model: str
    targets: np.ndarray
    value_rate: np.ndarray
    value_rate_se: np.ndarray
    predicted_value_rate: np.ndarray
    win_rate: np.ndarray
    win_rate_se: np.ndarray
    predicted_win_rate: np.ndarray
    cost_rate: float
    cost_rate_se: float
    predicted_cost_rate: float

    def fulfillment_ok(self, n_se: float = 3.0) -> bool:
        """True when every contract's realized rate covers its target within n_se errors."""
        return bool(np.all(self.value_rate + n_se * self.value_rate_se >= self.targets))

    def to_json(self) -> dict:
        return {
            "horizon": self.horizon,
            "n_batches": self.n_batches,
            "seed": self.seed,
            "arrival_model": self.arrival_model,
            "targets": self.targets.tolist(),
            "value_rate": self.value_rate.tolist(),
            "value_rate_se": self.value_rate_se.tolist(),
            "predicted_value_rate": self.predicted_value_rate.tolist(),
            "win_rate": self.win_rate.tolist(),
            "win_rate_se": self.win_rate_se.tolist(),
            "predicted_win_rate": self.predicted_win_rate.tolist(),
            "cost_rate": self.cost_rate,
            "cost_rate_se": self.cost_rate_se,
            "predicted_cost_rate": self.predicted_cost_rate,
        }


@dataclass(frozen=True)
class ABComparison:
    """Common-random-number comparison of several policies on one instance.

    Policy 0 is the baseline: ``delta_cost[p] = cost_rate[p] - cost_rate[0]``
    with the standard error of the *paired* per-batch differences, which is
    what shared draws buy.  ``feasible[p]`` flags whether policy p covered
    every contract target within ``n_se`` standard errors.
    """

    horizon: float
    n_batches: int
    seed: int
    arrival_model: str
    n_se: float
    cost_rate: np.ndarray
    cost_rate_se: np.ndarray
    delta_cost: np.ndarray
    delta_cost_se: np.ndarray
    value_rate: np.ndarray
    value_rate_se: np.ndarray
    feasible: np.ndarray

    def to_json(self) -> dict:
        return {
            "horizon": self.horizon,
            "n_batches": self.n_batches,
            "seed": self.seed,
            "arrival_model": self.arrival_model,
            "n_se": self.n_se,
            "cost_rate": self.cost_rate.tolist(),
            "cost_rate_se": self.cost_rate_se.tolist(),
            "delta_cost": self.delta_cost.tolist(),
            "delta_cost_se": self.delta_cost_se.tolist(),
            "value_rate": self.value_rate.tolist(),
            "value_rate_se": self.value_rate_se.tolist(),
            "feasible": self.feasible.tolist(),
        }


# ---------------------------------------------------------------------------
# the event loop


def _check_sampleable(inst: ProblemInstance) -> None:
    for it in inst.items:
        if it.curve.total_mass > 1.0 + 1e-12:
            raise ValueError(
                f"item {it.id!r}: supply curve carries mass {it.curve.total_mass:.6g} > 1 "
                "and is not a price distribution"
            )


def _batch_rngs(seed, n_batches: int) -> list[np.random.Generator]:
    return [np.random.default_rng(c) for c in np.random.SeedSequence(seed).spawn(n_batches)]


def _draw_batch(rng: np.random.Generator, inst: ProblemInstance, t_batch: float, deterministic: bool):
    """Exogenous randomness for one batch: arrival counts and two uniforms each.

    The first uniform becomes the clearing price by inverse transform; the
    second selects the contract.  Policies never touch the draws, so several
    policies can be replayed against the same batch (common random numbers).
    """
    if deterministic:
        counts = np.round(inst.rates * t_batch).astype(np.int64)
    else:
        counts = rng.poisson(inst.rates * t_batch)
    return [(rng.random(int(k)), rng.random(int(k))) for k in counts]


def _replay(inst: ProblemInstance, policy: BidPolicy, draws) -> tuple[np.ndarray, np.ndarray, float]:
    """Run one batch of draws under a policy; returns value/win/cost totals."""
    value = np.zeros(inst.n_contracts)
    wins = np.zeros(inst.n_items)
    cost = 0.0
    for j, it in enumerate(inst.items):
        u_price, u_sel = draws[j]
        edges = inst.item_edges(j)
        if u_price.size == 0 or edges.size == 0:
            continue
        cum = np.cumsum(np.maximum(policy.gamma[edges], 0.0))
        pick = np.searchsorted(cum, u_sel, side="right")
        placed = pick < edges.size
        if not np.any(placed):
            continue
        bid = float(policy.bids[j])
        price = np.asarray(it.curve.inverse(u_price[placed]))
        won = bid >= price
        k = int(np.count_nonzero(won))
        if k == 0:
            continue
        wins[j] = k
        if it.auction is AuctionKind.SECOND_PRICE:
            cost += float(price[won].sum())
        else:
            cost += bid * k
        e_won = edges[pick[placed][won]]
        np.add.at(value, inst.edge_i[e_won], inst.edge_v[e_won])
    return value, wins, cost


def _predictions(inst: ProblemInstance, policy: BidPolicy):
    """Fluid-model rates implied by a policy: per-contract value, per-item wins, cost."""
    win_prob = np.array(
        [float(it.curve.eval(float(policy.bids[j]))) for j, it in enumerate(inst.items)]
    )
    mix = np.zeros(inst.n_items)
    np.add.at(mix, inst.edge_j, np.maximum(policy.gamma, 0.0))
    edge_rate = (inst.rates * win_prob)[inst.edge_j] * np.maximum(policy.gamma, 0.0)
    value = np.zeros(inst.n_contracts)
    np.add.at(value, inst.edge_i, edge_rate * inst.edge_v)
    pay = np.array(
        [float(cost.expected_cost(float(policy.bids[j]))) for j, cost in enumerate(inst.costs)]
    )
    return value, inst.rates * mix * win_prob, float(np.sum(inst.rates * mix * pay))


def _mean_se(batch_rates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = batch_rates.mean(axis=0)
    se = batch_rates.std(axis=0, ddof=1) / math.sqrt(batch_rates.shape[0])
    return mean, se


def _write_fulfillment_csv(path, inst: ProblemInstance, t_batch: float, batch_value: np.ndarray) -> None:
    """Cumulative value-delivery rate per contract at each batch boundary."""
    cum = np.cumsum(batch_value, axis=0)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time"] + [str(c.id) for c in inst.contracts])
        for b in range(cum.shape[0]):
            t = (b + 1) * t_batch
            w.writerow([f"{t:.10g}"] + [f"{x / t:.10g}" for x in cum[b]])


def simulate(
    inst: ProblemInstance,
    policy: BidPolicy,
    horizon: float,
    seed,
    *,
    n_batches: int = 20,
    deterministic_arrivals: bool = False,
    csv_path=None,
    json_path=None,
) -> SimulationReport:
    """Replay ``policy`` for ``horizon`` time units and aggregate realized rates.

    The horizon splits into ``n_batches`` equal batches with independent RNG
    streams spawned from ``seed``; standard errors come from the spread of
    the batch means.  ``csv_path`` dumps the cumulative fulfillment-rate time
    series per contract, ``json_path`` the full report.
    """
    policy.check(inst)
    _check_sampleable(inst)
    if not (horizon > 0.0 and math.isfinite(horizon)):
        raise ValueError("horizon must be positive and finite")
    if n_batches < 2:
        raise ValueError("need at least 2 batches for standard errors")

    t_batch = horizon / n_batches
    batch_value = np.zeros((n_batches, inst.n_contracts))
    batch_wins = np.zeros((n_batches, inst.n_items))
    batch_cost = np.zeros(n_batches)
    for b, rng in enumerate(_batch_rngs(seed, n_batches)):
        draws = _draw_batch(rng, inst, t_batch, deterministic_arrivals)
        batch_value[b], batch_wins[b], batch_cost[b] = _replay(inst, policy, draws)

    value_rate, value_se = _mean_se(batch_value / t_batch)
    win_rate, win_se = _mean_se(batch_wins / t_batch)
    cost_rate, cost_se = _mean_se(batch_cost / t_batch)
    pred_value, pred_win, pred_cost = _predictions(inst, policy)

    for arr in (value_rate, value_se, pred_value, win_rate, win_se, pred_win):
        arr.setflags(write=False)
    report = SimulationReport(
        horizon=float(horizon),
        n_batches=int(n_batches),
        seed=int(seed),
        arrival_model="deterministic" if deterministic_arrivals else "poisson",
        targets=inst.targets,
        value_rate=value_rate,
        value_rate_se=value_se,
        predicted_value_rate=pred_value,
        win_rate=win_rate,
        win_rate_se=win_se,
        predicted_win_rate=pred_win,
        cost_rate=float(cost_rate),
        cost_rate_se=float(cost_se),
        predicted_cost_rate=pred_cost,
    )
    if csv_path is not None:
        _write_fulfillment_csv(csv_path, inst, t_batch, batch_value)
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report.to_json(), fh, indent=2)
    return report


def ab_compare(
    inst: ProblemInstance,
    policies,
    horizon: float,
    seed,
    *,
    n_batches: int = 20,
    deterministic_arrivals: bool = False,
    n_se: float = 3.0,
) -> ABComparison:
    """Compare policies under common random numbers (policy 0 is the baseline).

    Each batch's arrivals, prices, and selection uniforms are drawn once and
    replayed under every policy, so cost differences are paired: identical
    policies differ by exactly zero, and the difference of two good policies
    carries far less variance than two independent runs would.
    """
    policies = list(policies)
    if len(policies) < 2:
        raise ValueError("need at least two policies to compare")
    for policy in policies:
        policy.check(inst)
    _check_sampleable(inst)
    if not (horizon > 0.0 and math.isfinite(horizon)):
        raise ValueError("horizon must be positive and finite")
    if n_batches < 2:
        raise ValueError("need at least 2 batches for standard errors")

    n_pol = len(policies)
    t_batch = horizon / n_batches
    batch_value = np.zeros((n_pol, n_batches, inst.n_contracts))
    batch_cost = np.zeros((n_pol, n_batches))
    for b, rng in enumerate(_batch_rngs(seed, n_batches)):
        draws = _draw_batch(rng, inst, t_batch, deterministic_arrivals)
        for p, policy in enumerate(policies):
            batch_value[p, b], _, batch_cost[p, b] = _replay(inst, policy, draws)

    cost_rates = batch_cost / t_batch
    cost_rate, cost_se = _mean_se(cost_rates.T)
    delta, delta_se = _mean_se((cost_rates - cost_rates[0]).T)
    value_rate = np.zeros((n_pol, inst.n_contracts))
    value_se = np.zeros((n_pol, inst.n_contracts))
    feasible = np.zeros(n_pol, dtype=bool)
    for p in range(n_pol):
        value_rate[p], value_se[p] = _mean_se(batch_value[p] / t_batch)
        feasible[p] = bool(
            np.all(value_rate[p] + n_se * value_se[p] >= inst.targets)
        )

    for arr in (cost_rate, cost_se, delta, delta_se, value_rate, value_se, feasible):
        arr.setflags(write=False)
    return ABComparison(
        horizon=float(horizon),
        n_batches=int(n_batches),
        seed=int(seed),
        arrival_model="deterministic" if deterministic_arrivals else "poisson",
        n_se=float(n_se),
        cost_rate=cost_rate,
        cost_rate_se=cost_se,
        delta_cost=delta,
        delta_cost_se=delta_se,
        value_rate=value_rate,
        value_rate_se=value_se,
        feasible=feasible,
    )
