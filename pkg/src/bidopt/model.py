"""Problem instances: item types, contracts, and the adequate-supply check.

An instance couples M item types (arrival rate, supply curve, auction kind)
with N contracts (target value rate, sparse positive valuations).  The
valuation sparsity pattern is compiled once into flat edge arrays -- the
solver and the feasibility check both run off these, never off dense N x M
matrices.

Edges are stored contract-major (sorted by contract position, then item
position), with a precomputed item-major permutation so per-item reductions
are contiguous-slice operations.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .costs import AcquisitionCost, AuctionKind
from .curves import SupplyCurve, curve_from_json

__all__ = [
    "ItemType",
    "Contract",
    "ProblemInstance",
    "SupplyCheck",
    "InfeasibilityCertificate",
    "DuplicateId",
    "EmptyUsefulSet",
    "build_instance",
    "check_adequate_supply",
    "max_scalable_target",
    "instance_from_json",
    "random_instance",
    "random_sparse_instance",
]


class DuplicateId(ValueError):
    """Two items (or two contracts) share an id."""


class EmptyUsefulSet(ValueError):
    """A contract values no item positively."""

    def __init__(self, contract_id):
        self.contract_id = contract_id
        super().__init__(f"contract {contract_id!r} has no positive valuation")


@dataclass(frozen=True)
class ItemType:
    """One auctioned item type: arrivals at ``arrival_rate`` priced by ``curve``."""

    id: str | int
    arrival_rate: float
    curve: SupplyCurve
    auction: AuctionKind

    def __post_init__(self):
        object.__setattr__(self, "auction", AuctionKind.parse(self.auction))
        rate = float(self.arrival_rate)
        if not (rate > 0.0 and np.isfinite(rate)):
            raise ValueError(f"item {self.id!r}: arrival_rate must be positive and finite")
        object.__setattr__(self, "arrival_rate", rate)

    @cached_property
    def cost(self) -> AcquisitionCost:
        # first-price items fail here when the curve is not 2-concave
        return AcquisitionCost(self.curve, self.auction)


@dataclass(frozen=True)
class Contract:
    """A fulfillment contract: accumulate value at rate ``target_rate``.

    ``valuations`` maps item ids to strictly positive per-item values; zero
    entries are dropped on construction, negatives are rejected.
    """

    id: str | int
    target_rate: float
    valuations: Mapping[str | int, float]

    def __post_init__(self):
        target = float(self.target_rate)
        if not (target > 0.0 and np.isfinite(target)):
            raise ValueError(f"contract {self.id!r}: target_rate must be positive and finite")
        object.__setattr__(self, "target_rate", target)
        kept = {}
        for j, v in self.valuations.items():
            v = float(v)
            if v < 0.0 or not np.isfinite(v):
                raise ValueError(f"contract {self.id!r}: valuation for {j!r} must be finite and >= 0")
            if v > 0.0:
                kept[j] = v
        object.__setattr__(self, "valuations", kept)


@dataclass(frozen=True)
class ProblemInstance:
    """Validated instance with a compiled sparse edge index.

    Edge k connects contract position ``edge_i[k]`` to item position
    ``edge_j[k]`` with valuation ``edge_v[k]``; edges are contract-major.
    ``contract_start`` slices edges per contract; ``by_item``/``item_start``
    give the item-major view (``by_item[item_start[j]:item_start[j+1]]`` are
    the edge indices into item j).
    """

    items: tuple[ItemType, ...]
    contracts: tuple[Contract, ...]
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_v: np.ndarray
    contract_start: np.ndarray
    by_item: np.ndarray
    item_start: np.ndarray

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_contracts(self) -> int:
        return len(self.contracts)

    @property
    def n_edges(self) -> int:
        return int(self.edge_v.size)

    @cached_property
    def rates(self) -> np.ndarray:
        """Arrival rates per item position."""
        out = np.array([it.arrival_rate for it in self.items])
        out.setflags(write=False)
        return out

    @cached_property
    def targets(self) -> np.ndarray:
        """Target value rates per contract position."""
        out = np.array([c.target_rate for c in self.contracts])
        out.setflags(write=False)
        return out

    @cached_property
    def costs(self) -> tuple[AcquisitionCost, ...]:
        return tuple(it.cost for it in self.items)

    def contract_edges(self, i: int) -> slice:
        return slice(int(self.contract_start[i]), int(self.contract_start[i + 1]))

    def item_edges(self, j: int) -> np.ndarray:
        return self.by_item[int(self.item_start[j]) : int(self.item_start[j + 1])]

    # -- serialization ------------------------------------------------------
    def to_json(self) -> dict:
        return {
            "items": [
                {
                    "id": it.id,
                    "rate": it.arrival_rate,
                    "curve": it.curve.to_json(),
                    "auction": it.auction.value,
                }
                for it in self.items
            ],
            "contracts": [
                {
                    "id": c.id,
                    "target": c.target_rate,
                    "valuations": {str(j): v for j, v in c.valuations.items()},
                }
                for c in self.contracts
            ],
        }

    def write_edges_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", "v"])
            for k in range(self.n_edges):
                w.writerow(
                    [
                        self.contracts[self.edge_i[k]].id,
                        self.items[self.edge_j[k]].id,
                        f"{self.edge_v[k]:.12g}",
                    ]
                )


def build_instance(items: Sequence[ItemType], contracts: Sequence[Contract]) -> ProblemInstance:
    """Validate ids, compile the edge index, and gate first-price curves."""
    items = tuple(items)
    contracts = tuple(contracts)
    item_pos: dict = {}
    for pos, it in enumerate(items):
        if it.id in item_pos:
            raise DuplicateId(f"item id {it.id!r} appears twice")
        item_pos[it.id] = pos
    seen = set()
    for c in contracts:
        if c.id in seen:
            raise DuplicateId(f"contract id {c.id!r} appears twice")
        seen.add(c.id)

    ei, ej, ev = [], [], []
    for pos, c in enumerate(contracts):
        if not c.valuations:
            raise EmptyUsefulSet(c.id)
        cols = []
        for j, v in c.valuations.items():
            if j not in item_pos:
                raise ValueError(f"contract {c.id!r} values unknown item {j!r}")
            cols.append((item_pos[j], v))
        cols.sort()
        for jpos, v in cols:
            ei.append(pos)
            ej.append(jpos)
            ev.append(v)

    edge_i = np.asarray(ei, dtype=np.intp)
    edge_j = np.asarray(ej, dtype=np.intp)
    edge_v = np.asarray(ev, dtype=float)
    contract_start = np.searchsorted(edge_i, np.arange(len(contracts) + 1))
    by_item = np.argsort(edge_j, kind="stable")
    item_start = np.searchsorted(edge_j[by_item], np.arange(len(items) + 1))
    for arr in (edge_i, edge_j, edge_v, contract_start, by_item, item_start):
        arr.setflags(write=False)

    inst = ProblemInstance(
        items=items,
        contracts=contracts,
        edge_i=edge_i,
        edge_j=edge_j,
        edge_v=edge_v,
        contract_start=contract_start,
        by_item=by_item,
        item_start=item_start,
    )
    inst.costs  # construct eagerly: first-price items must pass the 2-concavity gate
    return inst


def instance_from_json(obj: dict) -> ProblemInstance:
    """Rebuild an instance from its ``to_json`` form."""
    items = [
        ItemType(
            id=spec["id"],
            arrival_rate=spec["rate"],
            curve=curve_from_json(spec["curve"]),
            auction=AuctionKind.parse(spec["auction"]),
        )
        for spec in obj["items"]
    ]
    by_str = {str(it.id): it.id for it in items}
    contracts = [
        Contract(
            id=spec["id"],
            target_rate=spec["target"],
            valuations={by_str.get(str(j), j): v for j, v in spec["valuations"].items()},
        )
        for spec in obj["contracts"]
    ]
    return build_instance(items, contracts)


# ---------------------------------------------------------------------------
# adequate supply


@dataclass(frozen=True)
class InfeasibilityCertificate:
    """A contract set whose demand provably exceeds the supply it can reach.

    ``weights`` is the full dual certificate y: the instance is infeasible at
    the given margin because

        sum_i y_i C_i  >  sum_j (1-margin) lambda_j max_{i in B_j} v_ij y_i

    (``weighted_shortfall`` is the difference).  When the support set S alone
    violates the coarser Hall-type ratio -- total demand of S divided by the
    best valuation any member sees exceeding the total arrival rate the set
    can reach -- ``hall_violation`` is True and the ratio fields describe it.
    """

    contract_ids: tuple
    weights: dict
    demand: float
    best_valuation: float
    reachable_supply: float
    weighted_shortfall: float

    @property
    def hall_violation(self) -> bool:
        return self.demand / self.best_valuation > self.reachable_supply

    def verify(self, inst: ProblemInstance, margin: float) -> bool:
        """Recheck the weighted inequality directly against the instance."""
        y = np.zeros(inst.n_contracts)
        pos = {c.id: k for k, c in enumerate(inst.contracts)}
        for cid, w in self.weights.items():
            y[pos[cid]] = w
        vy = inst.edge_v * y[inst.edge_i]
        cap = 0.0
        for j in range(inst.n_items):
            edges = inst.item_edges(j)
            if edges.size:
                cap += (1.0 - margin) * inst.rates[j] * float(np.max(vy[edges]))
        return float(y @ inst.targets) - cap > 0.0


@dataclass(frozen=True)
class SupplyCheck:
    """Outcome of the adequate-supply feasibility check."""

    feasible: bool
    slack: float
    witness: np.ndarray | None = None
    certificate: InfeasibilityCertificate | None = field(default=None, repr=False)

    def __bool__(self) -> bool:
        return self.feasible


def _value_matrix(inst: ProblemInstance) -> sp.csr_matrix:
    """N x d matrix with v_e in row edge_i[e]."""
    return sp.csr_matrix(
        (inst.edge_v, (inst.edge_i, np.arange(inst.n_edges))),
        shape=(inst.n_contracts, inst.n_edges),
    )


def _item_matrix(inst: ProblemInstance) -> sp.csr_matrix:
    """M x d incidence matrix summing edge rates per item."""
    return sp.csr_matrix(
        (np.ones(inst.n_edges), (inst.edge_j, np.arange(inst.n_edges))),
        shape=(inst.n_items, inst.n_edges),
    )


def check_adequate_supply(inst: ProblemInstance, margin: float = 1e-6) -> SupplyCheck:
    """Phase-1 LP for: R >= 0, sum_j in A_i v_ij R_ij = C_i, sum_i R_ij <= (1-margin) lambda_j.

    Feasible outcomes carry an explicit witness R (edge-aligned).  Infeasible
    outcomes carry an :class:`InfeasibilityCertificate` built from the LP
    duals.
    """
    if not (0.0 <= margin < 1.0):
        raise ValueError("margin must lie in [0, 1)")
    n, m, d = inst.n_contracts, inst.n_items, inst.n_edges
    # variables: R (d) then per-contract slack (n); minimize total slack
    cost_vec = np.concatenate([np.zeros(d), np.ones(n)])
    a_eq = sp.hstack([_value_matrix(inst), sp.eye(n, format="csr")], format="csr")
    a_ub = sp.hstack([_item_matrix(inst), sp.csr_matrix((m, n))], format="csr")
    cap = (1.0 - margin) * inst.rates
    res = linprog(
        cost_vec,
        A_ub=a_ub,
        b_ub=cap,
        A_eq=a_eq,
        b_eq=inst.targets,
        bounds=(0.0, None),
        method="highs",
    )
    if res.status != 0:
        raise RuntimeError(f"feasibility LP failed: {res.message}")
    slack = float(res.fun)
    if slack <= 1e-9 * (1.0 + float(inst.targets.sum())):
        witness = np.array(res.x[:d])
        witness.setflags(write=False)
        return SupplyCheck(feasible=True, slack=0.0, witness=witness)

    y = np.clip(np.asarray(res.eqlin.marginals, dtype=float), 0.0, 1.0)
    vy = inst.edge_v * y[inst.edge_i]
    # weighted capacity sum_j (1-margin) lambda_j max_{i in B_j} v_ij y_i
    per_item_max = np.zeros(m)
    for j in range(m):
        edges = inst.item_edges(j)
        if edges.size:
            per_item_max[j] = float(np.max(vy[edges]))
    shortfall = float(y @ inst.targets) - float(cap @ per_item_max)

    # smallest top-k-by-weight contract set that violates the Hall-type ratio
    order = np.argsort(-y, kind="stable")
    support = [k for k in order if y[k] > 1e-12] or [int(order[0])]
    chosen = support
    for k in range(1, len(support) + 1):
        s = support[:k]
        if _hall_numbers(inst, s)[0]:
            chosen = s
            break
    violated, demand, best_v, reach = _hall_numbers(inst, chosen)
    cert = InfeasibilityCertificate(
        contract_ids=tuple(inst.contracts[k].id for k in chosen),
        weights={inst.contracts[k].id: float(y[k]) for k in support},
        demand=demand,
        best_valuation=best_v,
        reachable_supply=reach,
        weighted_shortfall=shortfall,
    )
    return SupplyCheck(feasible=False, slack=slack, certificate=cert)


def _hall_numbers(inst: ProblemInstance, members: Sequence[int]):
    """(violated?, demand, best valuation, reachable arrival rate) for a contract set."""
    members = list(members)
    demand = float(inst.targets[members].sum())
    edge_sets = [inst.contract_edges(i) for i in members]
    best_v = max(float(np.max(inst.edge_v[s])) for s in edge_sets)
    reach_items = np.unique(np.concatenate([inst.edge_j[s] for s in edge_sets]))
    reach = float(inst.rates[reach_items].sum())
    return demand / best_v > reach, demand, best_v, reach


def max_scalable_target(inst: ProblemInstance, margin: float = 1e-6) -> float:
    """Largest t such that targets t*C_i are simultaneously satisfiable.

    Solved as one LP: maximize t subject to sum v_ij R_ij >= t C_i and the
    margin-tightened item capacities.
    """
    n, m, d = inst.n_contracts, inst.n_items, inst.n_edges
    # variables: R (d), t; minimize -t
    cost_vec = np.concatenate([np.zeros(d), [-1.0]])
    fulfill = sp.hstack([-_value_matrix(inst), sp.csr_matrix(inst.targets[:, None])], format="csr")
    caps = sp.hstack([_item_matrix(inst), sp.csr_matrix((m, 1))], format="csr")
    a_ub = sp.vstack([fulfill, caps], format="csr")
    b_ub = np.concatenate([np.zeros(n), (1.0 - margin) * inst.rates])
    res = linprog(cost_vec, A_ub=a_ub, b_ub=b_ub, bounds=(0.0, None), method="highs")
    if res.status != 0:
        raise RuntimeError(f"target-scaling LP failed: {res.message}")
    return float(-res.fun)


# ---------------------------------------------------------------------------
# generators


_FAMILY_SAMPLERS = {
    "exponential": lambda rng: {"family": "exponential", "params": {"rate": float(rng.uniform(0.4, 2.5))}},
    "hyperbolic": lambda rng: {"family": "hyperbolic", "params": {"scale": float(rng.uniform(0.4, 2.5))}},
    "bounded_uniform": lambda rng: {"family": "bounded_uniform", "params": {"x_max": float(rng.uniform(0.5, 3.0))}},
}


def random_instance(
    rng: np.random.Generator,
    n_contracts: int,
    n_items: int,
    *,
    edge_prob: float = 0.6,
    kinds: Sequence[str] = ("second_price", "first_price"),
    families: Sequence[str] = ("exponential", "hyperbolic", "bounded_uniform"),
    slack_margin: float = 0.05,
) -> ProblemInstance:
    """Random feasible instance: targets are set strictly inside capacity.

    A reference allocation splitting ``(1 - 2*slack_margin) lambda_j`` evenly
    over each item's contracts is costed out, and each target is a random
    fraction of the value that allocation delivers, so adequate supply holds
    at any margin below ``slack_margin`` by construction.
    """
    items = [
        ItemType(
            id=f"item{j}",
            arrival_rate=float(rng.uniform(0.5, 2.0)),
            curve=curve_from_json(_FAMILY_SAMPLERS[rng.choice(list(families))](rng)),
            auction=str(rng.choice(list(kinds))),
        )
        for j in range(n_items)
    ]
    mask = rng.random((n_contracts, n_items)) < edge_prob
    for i in range(n_contracts):
        if not mask[i].any():
            mask[i, rng.integers(n_items)] = True
    values = np.where(mask, rng.uniform(0.5, 2.0, size=mask.shape), 0.0)
    degree = np.maximum(mask.sum(axis=0), 1)
    ref_rate = np.array([it.arrival_rate for it in items]) * (1.0 - 2.0 * slack_margin) / degree
    delivered = values @ ref_rate
    frac = rng.uniform(0.4, 0.95, size=n_contracts)
    contracts = [
        Contract(
            id=f"contract{i}",
            target_rate=float(delivered[i] * frac[i]),
            valuations={f"item{j}": float(values[i, j]) for j in range(n_items) if mask[i, j]},
        )
        for i in range(n_contracts)
    ]
    return build_instance(items, contracts)


def random_sparse_instance(
    rng: np.random.Generator, n_contracts: int = 200, n_items: int = 1200
) -> ProblemInstance:
    """Large sparse instance: exp(1) rates/curve-rates/targets, clipped-Gaussian values.

    Valuations are standard normals shifted down by 1 and clipped at 0, so
    roughly 16% of pairs carry an edge.  Targets are rescaled to 80% of the
    maximum simultaneously satisfiable level whenever the raw draw is not
    comfortably feasible, keeping the instance usable at small margins.
    """
    lam = rng.exponential(1.0, size=n_items) + 1e-3
    gam = rng.exponential(1.0, size=n_items) + 1e-3
    items = [
        ItemType(id=f"item{j}", arrival_rate=float(lam[j]),
                 curve=curve_from_json({"family": "exponential", "params": {"rate": float(gam[j])}}),
                 auction="second_price")
        for j in range(n_items)
    ]
    targets = rng.exponential(1.0, size=n_contracts) + 1e-3
    values = np.clip(rng.normal(0.0, 1.0, size=(n_contracts, n_items)) - 1.0, 0.0, None)
    for i in range(n_contracts):
        if not (values[i] > 0.0).any():
            values[i, rng.integers(n_items)] = float(rng.uniform(0.5, 1.0))
    contracts = [
        Contract(
            id=f"contract{i}",
            target_rate=float(targets[i]),
            valuations={f"item{j}": float(v) for j, v in enumerate(values[i]) if v > 0.0},
        )
        for i in range(n_contracts)
    ]
    inst = build_instance(items, contracts)
    t_max = max_scalable_target(inst, margin=1e-3)
    if t_max < 1.25:  # raw draw is infeasible or too close to the boundary
        scale = 0.8 * t_max
        contracts = [
            Contract(id=c.id, target_rate=c.target_rate * scale, valuations=c.valuations)
            for c in contracts
        ]
        inst = build_instance(items, contracts)
    return inst
