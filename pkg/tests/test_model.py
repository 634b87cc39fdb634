import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bidopt.costs import AuctionKind, NotTwoConcave
from bidopt.curves import BoundedUniform, Empirical, Exponential, Hyperbolic
from bidopt.model import (
    Contract,
    DuplicateId,
    EmptyUsefulSet,
    ItemType,
    build_instance,
    check_adequate_supply,
    random_sparse_instance,
    instance_from_json,
    max_scalable_target,
    random_instance,
)


def scalar_instance(target=1.0, rate=2.0):
    item = ItemType("a", rate, Exponential(1.0), "second_price")
    return build_instance([item], [Contract("x", target, {"a": 1.0})])


def stress_instance(c1=0.99):
    # three unit-rate items with very different price scales, two overlapping contracts
    items = [
        ItemType(f"i{k}", 1.0, Exponential(g), "second_price")
        for k, g in enumerate([0.1, 1.0, 10.0])
    ]
    contracts = [
        Contract("c1", c1, {"i0": 1.0, "i1": 1.0}),
        Contract("c2", 2.0 * c1, {"i1": 1.0, "i2": 1.0}),
    ]
    return build_instance(items, contracts)


# ---------------------------------------------------------------------------
# construction


def test_edge_index_shape():
    inst = stress_instance()
    assert (inst.n_contracts, inst.n_items, inst.n_edges) == (2, 3, 4)
    assert inst.edge_i.tolist() == [0, 0, 1, 1]
    assert inst.edge_j.tolist() == [0, 1, 1, 2]
    # item-major view groups edges per item
    assert inst.item_edges(1).tolist() == [1, 2]
    assert inst.item_edges(0).tolist() == [0]
    assert inst.contract_edges(1) == slice(2, 4)


def test_zero_valuations_dropped():
    item = ItemType("a", 1.0, Exponential(1.0), "second_price")
    other = ItemType("b", 1.0, Exponential(1.0), "second_price")
    c = Contract("x", 1.0, {"a": 1.0, "b": 0.0})
    inst = build_instance([item, other], [c])
    assert inst.n_edges == 1
    assert "b" not in c.valuations


def test_empty_useful_set():
    item = ItemType("a", 1.0, Exponential(1.0), "second_price")
    with pytest.raises(EmptyUsefulSet) as exc:
        build_instance([item], [Contract("x", 1.0, {"a": 0.0})])
    assert exc.value.contract_id == "x"


def test_duplicate_ids():
    item = ItemType("a", 1.0, Exponential(1.0), "second_price")
    with pytest.raises(DuplicateId):
        build_instance([item, item], [Contract("x", 1.0, {"a": 1.0})])
    with pytest.raises(DuplicateId):
        build_instance([item], [Contract("x", 1.0, {"a": 1.0}), Contract("x", 2.0, {"a": 1.0})])


def test_unknown_item_rejected():
    item = ItemType("a", 1.0, Exponential(1.0), "second_price")
    with pytest.raises(ValueError, match="unknown item"):
        build_instance([item], [Contract("x", 1.0, {"zzz": 1.0})])


def test_validation_of_scalars():
    with pytest.raises(ValueError):
        ItemType("a", 0.0, Exponential(1.0), "second_price")
    with pytest.raises(ValueError):
        Contract("x", -1.0, {"a": 1.0})
    with pytest.raises(ValueError):
        Contract("x", 1.0, {"a": -0.5})


def test_first_price_gate_fires_at_build():
    kinked = Empirical([(1.0, 0.2), (2.0, 0.8)])
    item = ItemType("a", 1.0, kinked, "first_price")
    with pytest.raises(NotTwoConcave):
        build_instance([item], [Contract("x", 0.1, {"a": 1.0})])


def test_json_round_trip(tmp_path):
    inst = stress_instance()
    back = instance_from_json(json.loads(json.dumps(inst.to_json())))
    assert back.n_edges == inst.n_edges
    assert np.array_equal(back.edge_v, inst.edge_v)
    assert back.items[2].curve == Exponential(10.0)
    assert back.items[0].auction is AuctionKind.SECOND_PRICE
    assert back.contracts[1].target_rate == pytest.approx(1.98)


def test_edges_csv(tmp_path):
    inst = stress_instance()
    path = tmp_path / "edges.csv"
    inst.write_edges_csv(path)
    rows = path.read_text().strip().splitlines()
    assert rows[0] == "i,j,v"
    assert len(rows) == 5
    assert rows[1].split(",")[:2] == ["c1", "i0"]


# ---------------------------------------------------------------------------
# adequate supply


def test_feasible_scalar():
    chk = check_adequate_supply(scalar_instance(target=1.0, rate=2.0), margin=0.1)
    assert chk
    assert chk.witness[0] == pytest.approx(1.0)


def test_infeasible_scalar_certificate():
    chk = check_adequate_supply(scalar_instance(target=3.0, rate=2.0), margin=0.1)
    assert not chk
    cert = chk.certificate
    assert cert.contract_ids == ("x",)
    assert cert.hall_violation  # 3.0 / 1.0 > 2.0
    assert cert.demand == pytest.approx(3.0)
    assert cert.reachable_supply == pytest.approx(2.0)
    assert cert.weighted_shortfall > 0.0
    assert cert.verify(scalar_instance(target=3.0, rate=2.0), 0.1)


def test_stress_instance_feasible_at_zero_margin():
    # total demand 0.99 * 3 = 2.97 < 3 = total arrival rate
    assert check_adequate_supply(stress_instance(0.99), margin=0.0)


def test_stress_instance_infeasible_beyond_capacity():
    chk = check_adequate_supply(stress_instance(1.01), margin=0.0)
    assert not chk
    assert chk.certificate.hall_violation  # uniform valuations: set certificate exists
    assert chk.certificate.verify(stress_instance(1.01), 0.0)


def test_weighted_certificate_when_ratio_test_cannot_fire():
    # one item, two contracts with different valuations: infeasible overall,
    # yet no subset passes the coarse ratio check -- the weighted certificate must
    item = ItemType("j", 1.0, Exponential(1.0), "second_price")
    contracts = [Contract("a", 0.6, {"j": 1.0}), Contract("b", 0.9, {"j": 2.0})]
    inst = build_instance([item], contracts)
    chk = check_adequate_supply(inst, margin=0.0)
    assert not chk
    cert = chk.certificate
    assert not cert.hall_violation
    assert cert.weighted_shortfall == pytest.approx(0.05, abs=1e-9)
    assert cert.verify(inst, 0.0)


def test_margin_monotonicity():
    # feasible at margin m stays feasible at every smaller margin
    inst = scalar_instance(target=1.8, rate=2.0)
    assert check_adequate_supply(inst, margin=0.1)
    assert check_adequate_supply(inst, margin=0.05)
    assert check_adequate_supply(inst, margin=0.0)
    assert not check_adequate_supply(inst, margin=0.2)


def test_margin_validation():
    with pytest.raises(ValueError):
        check_adequate_supply(scalar_instance(), margin=1.0)
    with pytest.raises(ValueError):
        check_adequate_supply(scalar_instance(), margin=-0.1)


def test_max_scalable_target():
    inst = scalar_instance(target=1.0, rate=2.0)
    assert max_scalable_target(inst, margin=0.1) == pytest.approx(1.8, abs=1e-9)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=15, deadline=None)
def test_random_instances_feasible_with_uniform_certificates(seed):
    rng = np.random.default_rng(seed)
    inst = random_instance(rng, n_contracts=3, n_items=5, slack_margin=0.05)
    assert check_adequate_supply(inst, margin=0.01)
    # push every target far beyond total capacity: certificate must verify
    boosted = build_instance(
        list(inst.items),
        [
            Contract(c.id, c.target_rate + 100.0, c.valuations)
            for c in inst.contracts
        ],
    )
    chk = check_adequate_supply(boosted, margin=0.01)
    assert not chk
    assert chk.certificate.verify(boosted, 0.01)


def test_random_sparse_instance_shape():
    inst = random_sparse_instance(np.random.default_rng(11), n_contracts=30, n_items=180)
    assert inst.n_contracts == 30
    assert inst.n_items == 180
    # clipped-Gaussian valuations keep the graph sparse
    assert inst.n_edges < 0.35 * 30 * 180
    assert check_adequate_supply(inst, margin=1e-3)


def test_instance_arrays_read_only():
    inst = stress_instance()
    with pytest.raises(ValueError):
        inst.edge_v[0] = 5.0
    with pytest.raises(ValueError):
        inst.rates[0] = 5.0
