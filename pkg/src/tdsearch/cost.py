"""Closed-form energy/latency model of a fused-einsum accelerator.

Nodes of a folded contraction plan are tagged with one of four memory
access types:

1. reads the raw activation from DRAM, writes its result to the global buffer
2. reads and writes the global buffer only
3. reads the global buffer, writes the final result to DRAM
4. reads the activation from DRAM and writes the final result to DRAM

Intermediates larger than the global buffer spill: the producer writes them
to DRAM and the consumer reads them back from DRAM.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

from .contraction import ContractionPlan, PlanNode, layer_plan

MB = 1024 * 1024
KB = 1024


@dataclass(frozen=True)
class AcceleratorConfig:
    num_pes: int = 32
    macs_per_pe: int = 1024
    gb_bytes: int = int(2.91 * MB)
    weight_buf_bytes: int = 32 * 32 * KB
    input_buf_bytes: int = 64 * KB
    accum_buf_bytes: int = 32 * 384
    dram_bytes_per_cycle: int = 32
    clock_hz: float = 1e9
    bytes_per_element: int = 1
    e_mac: float = 1.0
    e_sram_byte: float = 6.0
    e_dram_byte: float = 400.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not value > 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.gb_bytes < max(self.weight_buf_bytes, self.input_buf_bytes, self.accum_buf_bytes):
            raise ValueError("global buffer must be at least as large as any PE buffer")


@dataclass(frozen=True)
class CostRecord:
    """Energy in pJ, latency in cycles and seconds, EDP in pJ*s."""

    energy: float = 0.0
    cycles: int = 0
    seconds: float = 0.0
    edp: float = 0.0
    macs: int = 0
    dram_bytes: int = 0
    sram_bytes: int = 0
    compute_cycles: int = 0
    memory_cycles: int = 0
    utilization: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CostRecord":
        return cls(**data)


def _nbytes(node_shape: Sequence[int], accel: AcceleratorConfig) -> int:
    return math.prod(node_shape) * accel.bytes_per_element


def assign_mem_types(plan: ContractionPlan, accel: AcceleratorConfig, fused: bool = True) -> ContractionPlan:
    """Tag every dynamic node with its memory access type and byte traffic.

    With ``fused=False`` every node is treated as type 4, i.e. each
    intermediate makes a DRAM round trip.
    """
    spec = plan.spec
    n = len(spec.inputs)
    sizes = {i: _nbytes(spec.shape_of(spec.inputs[i]), accel) for i in range(n)}
    sizes.update({k: v.size * accel.bytes_per_element for k, v in plan.folded.items()})
    sizes.update({node.id: _nbytes(node.out_shape, accel) for node in plan.nodes})
    dynamic_ids = {node.id for node in plan.nodes}

    def kind(ref: int) -> str:
        if ref in dynamic_ids:
            return "intermediate"
        if ref < n and not plan.leaf_static[ref]:
            return "input"
        return "static"

    typed = []
    for node in plan.nodes:
        final = node.id == plan.root
        kinds = [kind(node.left), kind(node.right)]
        dram = sram = 0
        for ref, k in zip((node.left, node.right), kinds):
            if k == "static":
                sram += sizes[ref]
            elif k == "input" or not fused or sizes[ref] > accel.gb_bytes:
                dram += sizes[ref]
            else:
                sram += sizes[ref]
        out = sizes[node.id]
        if final or not fused or out > accel.gb_bytes:
            dram += out
        else:
            sram += out
        reads_input = "input" in kinds
        if not fused:
            mem_type = 4
        elif final:
            mem_type = 4 if reads_input else 3
        else:
            mem_type = 1 if reads_input else 2
        typed.append(replace(node, mem_type=mem_type, dram_bytes=dram, sram_bytes=sram))
    return replace(plan, nodes=typed)


def node_cost(node: PlanNode, accel: AcceleratorConfig) -> CostRecord:
    """Cost of one typed node.

    Utilization is ``min(1, summed_extent / macs_per_pe)``; latency is the
    larger of compute and DRAM transfer cycles.
    """
    if node.mem_type is None:
        raise ValueError(f"node %{node.id} has no memory type; run assign_mem_types first")
    lanes = accel.num_pes * min(node.summed_extent, accel.macs_per_pe)
    compute = -(-node.macs // lanes)
    memory = -(-node.dram_bytes // accel.dram_bytes_per_cycle)
    cycles = max(compute, memory)
    energy = node.macs * accel.e_mac + node.sram_bytes * accel.e_sram_byte + node.dram_bytes * accel.e_dram_byte
    return _record(accel, energy, cycles, node.macs, node.dram_bytes, node.sram_bytes, compute, memory)


def _record(accel, energy, cycles, macs, dram, sram, compute, memory) -> CostRecord:
    seconds = cycles / accel.clock_hz
    peak = compute * accel.num_pes * accel.macs_per_pe
    return CostRecord(
        energy=float(energy),
        cycles=int(cycles),
        seconds=seconds,
        edp=float(energy) * seconds,
        macs=int(macs),
        dram_bytes=int(dram),
        sram_bytes=int(sram),
        compute_cycles=int(compute),
        memory_cycles=int(memory),
        utilization=macs / peak if peak else 0.0,
    )


def fused_cost(plan: ContractionPlan, accel: AcceleratorConfig) -> CostRecord:
    """Sum of node costs with sequential node latency."""
    records = [node_cost(node, accel) for node in plan.nodes]
    return _record(
        accel,
        sum(r.energy for r in records),
        sum(r.cycles for r in records),
        sum(r.macs for r in records),
        sum(r.dram_bytes for r in records),
        sum(r.sram_bytes for r in records),
        sum(r.compute_cycles for r in records),
        sum(r.memory_cycles for r in records),
    )


def model_cost(layer_records: Sequence[CostRecord]) -> tuple[float, float, float]:
    """Total energy (pJ), latency (s) and their product over all layers."""
    if not layer_records:
        raise ValueError("model_cost needs at least one layer record")
    energy = sum(r.energy for r in layer_records)
    seconds = sum(r.seconds for r in layer_records)
    return energy, seconds, energy * seconds


def plan_cost(plan: ContractionPlan, accel: AcceleratorConfig, fused: bool = True) -> CostRecord:
    return fused_cost(assign_mem_types(plan, accel, fused=fused), accel)


def layer_cost(f, batch: int, accel: AcceleratorConfig, fused: bool = True) -> CostRecord:
    """Cost of one factorized layer on its folded MAC-optimal plan."""
    plan, _ = layer_plan(f, batch)
    return plan_cost(plan, accel, fused=fused)
