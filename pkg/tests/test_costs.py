import numpy as np
import pytest

from fslora.config import build_experiment, validate_config
from fslora.costs import (
    METHODS,
    CostLedger,
    CostParams,
    client_costs,
    cost_table,
    downlink_bytes,
    encode_wire,
    reconcile,
    server_costs,
    uplink_bytes,
)
from fslora.errors import RangeError
from fslora.validate import cost_reconciliation


def test_wire_encoding_is_float32() -> None:
    assert len(encode_wire(np.zeros((3, 2)), np.zeros(4))) == 4 * 10


def test_uplink_closed_forms() -> None:
    p = CostParams(m=64, n=64, r=8, ks=(2, 4, 8))
    assert p.q == 4 * 8 * 128
    assert uplink_bytes("fslora", p, 0) == 1024
    assert uplink_bytes("fslora", p, 1) == p.q // 2
    assert uplink_bytes("fslora", p, 2) == p.q
    assert uplink_bytes("fedlora", p, 0) == p.q
    for method in ("heterolora", "flexlora", "flora"):
        assert uplink_bytes(method, p, 0) == 1024


def test_uplink_is_monotone_in_local_rank() -> None:
    p = CostParams(m=10, n=7, r=8, ks=tuple(range(1, 9)))
    for method in METHODS:
        values = [uplink_bytes(method, p, i) for i in range(8)]
        assert values == sorted(values)


def test_topk_uplink_adds_bitmap() -> None:
    p = CostParams(m=32, n=32, r=16, ks=(8,), topk_ratio=0.5)
    payload = 8 * 64
    assert uplink_bytes("fslora", p, 0) == 4 * (payload // 2) + payload // 8
    assert uplink_bytes("heterolora", p, 0) == 4 * payload


def test_downlink_closed_forms() -> None:
    p = CostParams(m=64, n=64, r=8, ks=(4, 8))
    assert downlink_bytes("flora", p) == p.q // 2 + p.q
    assert downlink_bytes("fedlora", p) == p.q
    assert downlink_bytes("fslora", p) == p.q + 2
    assert downlink_bytes("fslora", p, [1]) == p.q + 1


def test_large_layer_examples() -> None:
    big = CostParams(m=516096, n=516096, r=64, ks=(64,) * 100)
    assert big.q // 4 == 66_060_288
    assert big.q / 2**20 == pytest.approx(252.0)
    assert downlink_bytes("fslora", big) - big.q == 800


def test_client_and_server_costs() -> None:
    p = CostParams(m=64, n=64, r=8, ks=(4, 8), H=10)
    assert client_costs("fslora", p, 0).flops == 10 * 4 * 128
    assert client_costs("fedlora", p, 1) == client_costs("fslora", p, 1)
    assert client_costs("flora", p, 0).memory_bytes >= client_costs("fslora", p, 0).memory_bytes
    assert server_costs("fedlora", p).memory_bytes == 2 * p.q
    assert server_costs("flexlora", p).memory_bytes == max(p.q // 2 + p.q, 2 * p.P)


def test_unknown_method_and_bad_params() -> None:
    p = CostParams(m=2, n=2, r=2, ks=(1,))
    with pytest.raises(RangeError):
        uplink_bytes("sgd", p, 0)
    with pytest.raises(RangeError):
        CostParams(m=2, n=2, r=2, ks=(3,))
    with pytest.raises(RangeError):
        CostParams(m=2, n=2, r=2, ks=(1,), topk_ratio=1.5)


def test_cost_table_has_a_row_per_client_and_method() -> None:
    rows = cost_table(CostParams(m=4, n=4, r=4, ks=(1, 2)))
    assert len(rows) == len(METHODS) * 3


def test_reconcile_flags_mismatches() -> None:
    p = CostParams(m=4, n=4, r=4, ks=(2, 2))
    ledger = CostLedger()
    ledger.add_uplink(0, uplink_bytes("heterolora", p, 0))
    ledger.add_uplink(1, 1)
    ledger.add_downlink(p.q)
    rows = reconcile("heterolora", p, ledger, [0, 1])
    assert [r.ok for r in rows] == [True, False, True]


def test_measured_ledgers_match_closed_forms_for_every_method() -> None:
    assert cost_reconciliation(rounds=2) == []


def test_rank_sweep_at_fixed_k_keeps_client_costs() -> None:
    ups = []
    for r in (8, 16):
        data = {
            "rounds": 1,
            "rank": r,
            "task": {"m": 6, "n": 5, "true_rank": 1, "sample_count": 40, "holdout_count": 0},
            "clients": {"count": 2, "local_steps": 1, "ranks": {"kind": "list", "ranks": [4, 4]}},
        }
        ups.append(build_experiment(validate_config(data)).run().metrics[0].uplink_bytes)
    assert ups[0] == ups[1]
