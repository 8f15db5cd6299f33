import dataclasses

import numpy as np
import pytest

from conftest import random_spec
from tdsearch.contraction import PlanNode, fold_static, layer_plan, naive_path, optimal_path
from tdsearch.cost import (
    AcceleratorConfig,
    CostRecord,
    assign_mem_types,
    fused_cost,
    layer_cost,
    model_cost,
    node_cost,
    plan_cost,
)
from tdsearch.factorize import Format, TensorizationShape, decompose
from tdsearch.tensor import EinsumSpec

ACCEL = AcceleratorConfig()
CP_LAYER = EinsumSpec(("bc", "a", "da", "ea", "ca"), "bde", {"b": 64, "c": 768, "a": 280, "d": 12, "e": 64})
STATIC = [False, True, True, True, True]


def folded_cp_layer(plan):
    return fold_static(plan, [None] + [np.ones(CP_LAYER.shape_of(s)) for s in CP_LAYER.inputs[1:]])


def node(macs, summed, mem_type=2, dram=0, sram=0):
    return PlanNode(0, 0, 1, "", "", "", (), macs, summed, False, True, mem_type, dram, sram)


def test_config_defaults_and_validation():
    a = AcceleratorConfig()
    assert (a.num_pes, a.macs_per_pe, a.bytes_per_element) == (32, 1024, 1)
    assert a.gb_bytes == int(2.91 * 1024 * 1024)
    assert a.weight_buf_bytes == 32 * 32 * 1024 and a.input_buf_bytes == 64 * 1024 and a.accum_buf_bytes == 32 * 384
    with pytest.raises(ValueError):
        AcceleratorConfig(num_pes=0)
    with pytest.raises(ValueError):
        AcceleratorConfig(gb_bytes=1000)


def test_single_matmul_is_type4():
    spec = EinsumSpec.from_shapes("bc,cd->bd", [(8, 16), (16, 4)])
    plan = assign_mem_types(fold_static(optimal_path(spec, [False, True]), [None, np.ones((16, 4))]), ACCEL)
    assert [n.mem_type for n in plan.nodes] == [4]


def test_cp_layer_types_in_order():
    plan = assign_mem_types(folded_cp_layer(optimal_path(CP_LAYER, STATIC)), ACCEL)
    assert [n.mem_type for n in plan.nodes] == [1, 2, 3]


def test_spill_increases_dram():
    spec = EinsumSpec(("bc", "cd", "de"), "be", {"b": 2048, "c": 2, "d": 2048, "e": 2})
    plan = fold_static(plan_from := naive_path(spec, [False, True, True]), [None, np.ones((2, 2048)), np.ones((2048, 2))])
    # the b x d intermediate is 4 MiB, larger than the global buffer
    assert plan_from.nodes[0].out_shape == (2048, 2048)
    small = dataclasses.replace(ACCEL, gb_bytes=64 * 1024 * 1024)
    big = assign_mem_types(plan, ACCEL)
    roomy = assign_mem_types(plan, small)
    assert sum(n.dram_bytes for n in big.nodes) > sum(n.dram_bytes for n in roomy.nodes)
    assert sum(n.dram_bytes for n in big.nodes) - sum(n.dram_bytes for n in roomy.nodes) == 2 * 2048 * 2048


def test_node_cost_hand_arithmetic():
    full = node_cost(node(32_768, 1024), ACCEL)
    assert full.compute_cycles == 1 and full.cycles == 1
    narrow = node_cost(node(32_768, 8), ACCEL)
    assert narrow.compute_cycles == 128 * full.compute_cycles
    rec = node_cost(node(100, 1024, dram=64, sram=10), ACCEL)
    assert rec.energy == 100 * 1 + 10 * 6 + 64 * 400
    assert rec.memory_cycles == 2
    with pytest.raises(ValueError):
        node_cost(node(1, 1, mem_type=None), ACCEL)


def test_zero_mac_folded_plan_costs_nothing():
    spec = EinsumSpec.from_shapes("ij,jk->ik", [(2, 3), (3, 2)])
    plan = fold_static(optimal_path(spec, [True, True]), [np.ones((2, 3)), np.ones((3, 2))])
    rec = plan_cost(plan, ACCEL)
    assert rec.energy == 0 and rec.cycles == 0 and rec.edp == 0


def test_one_node_fused_equals_node_cost():
    spec = EinsumSpec.from_shapes("bc,cd->bd", [(8, 16), (16, 4)])
    plan = assign_mem_types(fold_static(optimal_path(spec, [False, True]), [None, np.ones((16, 4))]), ACCEL)
    assert fused_cost(plan, ACCEL) == node_cost(plan.nodes[0], ACCEL)


def test_cp_layer_optimal_cheaper_than_naive():
    opt = plan_cost(folded_cp_layer(optimal_path(CP_LAYER, STATIC)), ACCEL)
    naive = plan_cost(folded_cp_layer(naive_path(CP_LAYER, STATIC)), ACCEL)
    assert opt.edp < naive.edp


def test_fused_never_more_dram_than_unfused(rng):
    for _ in range(50):
        spec = random_spec(rng, max_extent=6)
        static = [False] + [bool(rng.random() < 0.7) for _ in spec.inputs[1:]]
        ops = [None if not s else np.ones(spec.shape_of(sub)) for s, sub in zip(static, spec.inputs)]
        plan = fold_static(optimal_path(spec, static), ops)
        assert plan_cost(plan, ACCEL).dram_bytes <= plan_cost(plan, ACCEL, fused=False).dram_bytes


def test_edp_exact_and_model_cost():
    rec = CostRecord(energy=3.0, cycles=2, seconds=2e-9, edp=6e-9)
    assert model_cost([rec]) == (3.0, 2e-9, 3.0 * 2e-9)
    e, t, edp = model_cost([rec, rec])
    assert (e, t) == (6.0, 4e-9) and edp == pytest.approx(4 * rec.energy * rec.seconds)
    other = CostRecord(energy=5.0, cycles=1, seconds=1e-9)
    assert model_cost([rec, other]) == model_cost([other, rec])
    with pytest.raises(ValueError):
        model_cost([])


def test_activation_loaded_once_without_spills():
    f = decompose(np.random.default_rng(0).standard_normal((64, 64)), Format.CP, TensorizationShape((8, 8), (8, 8)), (8,))
    plan, _ = layer_plan(f, batch=16)
    typed = assign_mem_types(plan, ACCEL)
    readers = [n for n in typed.nodes if 0 in (n.left, n.right)]
    assert len(readers) == 1 and readers[0].mem_type in (1, 4)


def test_more_macs_never_cheaper():
    a = node_cost(node(1000, 16), ACCEL)
    b = node_cost(node(2000, 16), ACCEL)
    assert b.energy >= a.energy and b.compute_cycles >= a.compute_cycles


def test_layer_cost_deterministic_and_roundtrip():
    f = decompose(np.random.default_rng(1).standard_normal((64, 64)), Format.TTM, TensorizationShape((8, 8), (8, 8)), (1, 8, 1))
    a, b = layer_cost(f, 32, ACCEL), layer_cost(f, 32, ACCEL)
    assert a == b and a.edp == a.energy * a.seconds
    assert CostRecord.from_dict(a.to_dict()) == a
