"""Contraction paths for factorized layers.

A plan is a list of pairwise contractions in SSA form: operands are
numbered ``0..n-1`` and every node appends a new id ``n, n+1, ...``.
Plans can fold their all-static subtrees into precomputed constants, in
which case only the dynamic nodes remain.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .factorize import FactorizedLinear, Format
from .tensor import EinsumSpec, as_tensor, contract_pair

ALPHABET = "abcdefghijklmnopqrstuvwxyz"
DP_OPERAND_LIMIT = 8


@dataclass(frozen=True)
class PlanNode:
    id: int
    left: int
    right: int
    left_subs: str
    right_subs: str
    out_subs: str
    out_shape: tuple[int, ...]
    macs: int
    summed_extent: int
    is_static: bool
    is_contracting: bool
    mem_type: Optional[int] = None
    dram_bytes: int = 0
    sram_bytes: int = 0

    def describe(self) -> str:
        flags = []
        if self.is_static:
            flags.append("static")
        if self.is_contracting:
            flags.append("contracting")
        if self.mem_type is not None:
            flags.append(f"type{self.mem_type}")
        return (
            f"%{self.id} = %{self.left}[{self.left_subs}] * %{self.right}[{self.right_subs}]"
            f" -> [{self.out_subs}] macs={self.macs} {' '.join(flags)}".rstrip()
        )


@dataclass
class ContractionPlan:
    spec: EinsumSpec
    nodes: list[PlanNode]
    leaf_static: tuple[bool, ...]
    root: int
    optimal: bool = True
    folded: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def dynamic_macs(self) -> int:
        return sum(n.macs for n in self.nodes)

    @property
    def total_macs(self) -> int:
        return self.dynamic_macs

    def describe(self) -> str:
        lines = [f"# {self.spec.equation}"]
        lines += [f"%{k} = const{tuple(v.shape)}" for k, v in sorted(self.folded.items())]
        lines += [n.describe() for n in self.nodes]
        return "\n".join(lines)

    def path(self) -> list[tuple[int, int]]:
        return [(n.left, n.right) for n in self.nodes]


def _subs_size(spec: EinsumSpec, subs: str) -> int:
    return math.prod(spec.extents[c] for c in subs)


def _make_node(spec, node_id, left, right, lsubs, rsubs, out_subs, static) -> PlanNode:
    union = "".join(dict.fromkeys(lsubs + rsubs))
    summed = [c for c in union if c not in out_subs]
    macs = _subs_size(spec, union)
    out_size = _subs_size(spec, out_subs)
    return PlanNode(
        id=node_id,
        left=left,
        right=right,
        left_subs=lsubs,
        right_subs=rsubs,
        out_subs=out_subs,
        out_shape=spec.shape_of(out_subs),
        macs=macs,
        summed_extent=_subs_size(spec, "".join(summed)),
        is_static=static,
        is_contracting=out_size <= max(_subs_size(spec, lsubs), _subs_size(spec, rsubs)),
    )


def plan_from_path(
    spec: EinsumSpec,
    path: Sequence[tuple[int, int]],
    static: Optional[Sequence[bool]] = None,
    optimal: bool = False,
) -> ContractionPlan:
    """Build a plan from SSA pairs ``(left_id, right_id)``.

    Intermediate outputs keep every letter still needed by the output or
    by an operand not yet consumed, ordered as in ``left + right``.
    """
    n = len(spec.inputs)
    if n < 2:
        raise ValueError("a contraction plan needs at least two operands")
    if len(path) != n - 1:
        raise ValueError(f"path must have {n - 1} steps, got {len(path)}")
    static = tuple(bool(s) for s in static) if static is not None else (False,) * n
    if len(static) != n:
        raise ValueError("one staticness flag per operand expected")
    live = {i: spec.inputs[i] for i in range(n)}
    is_static = {i: static[i] for i in range(n)}
    nodes = []
    for step, (a, b) in enumerate(path):
        if a == b or a not in live or b not in live:
            raise ValueError(f"invalid path step {(a, b)}")
        lsubs, rsubs = live.pop(a), live.pop(b)
        node_id = n + step
        if not live:
            out = spec.output
        else:
            needed = set(spec.output).union(*live.values())
            out = "".join(c for c in dict.fromkeys(lsubs + rsubs) if c in needed)
        st = is_static[a] and is_static[b]
        nodes.append(_make_node(spec, node_id, a, b, lsubs, rsubs, out, st))
        live[node_id] = out
        is_static[node_id] = st
    return ContractionPlan(spec, nodes, static, root=n + len(path) - 1, optimal=optimal)


def naive_path(spec: EinsumSpec, static: Optional[Sequence[bool]] = None) -> ContractionPlan:
    """Strict left-to-right association ``((x0 x1) x2) ...``."""
    n = len(spec.inputs)
    path = [(0, 1)] + [(n + k - 1, k + 1) for k in range(1, n - 1)]
    return plan_from_path(spec, path, static, optimal=n == 2)


def _popcount(x: int) -> int:
    return bin(x).count("1")


def optimal_path(spec: EinsumSpec, static: Optional[Sequence[bool]] = None) -> ContractionPlan:
    """MAC-minimal binary contraction order.

    Up to eight operands this is an exhaustive dynamic program over operand
    subsets.  Ties are broken by the smaller largest intermediate, then by
    preferring a single operand on the right (left-deep trees), then by
    enumeration order.  Larger equations fall back to a greedy
    smallest-intermediate heuristic and the plan is flagged non-optimal.
    """
    n = len(spec.inputs)
    if n < 2:
        raise ValueError("a contraction plan needs at least two operands")
    if n > DP_OPERAND_LIMIT:
        return _greedy_path(spec, static)

    full = (1 << n) - 1
    letter_mask = {c: 0 for c in spec.letters}
    for i, subs in enumerate(spec.inputs):
        for c in subs:
            letter_mask[c] |= 1 << i

    subs_of: dict[int, str] = {}

    def subs(mask: int) -> str:
        if mask not in subs_of:
            if _popcount(mask) == 1:
                subs_of[mask] = spec.inputs[mask.bit_length() - 1]
            elif mask == full:
                subs_of[mask] = spec.output
            else:
                inside = [spec.inputs[i] for i in range(n) if mask >> i & 1]
                present = "".join(dict.fromkeys("".join(inside)))
                subs_of[mask] = "".join(
                    c for c in present if c in spec.output or letter_mask[c] & ~mask
                )
        return subs_of[mask]

    # best[mask] = (macs, largest intermediate, left, right)
    best: dict[int, tuple[int, int, int, int]] = {1 << i: (0, 0, 0, 0) for i in range(n)}
    for mask in sorted(range(1, full + 1), key=lambda m: (_popcount(m), m)):
        if _popcount(mask) < 2:
            continue
        low = mask & -mask
        rest = mask ^ low
        rights = []
        sub = rest
        while sub:
            rights.append(sub)
            sub = (sub - 1) & rest
        rights.sort(key=lambda r: (_popcount(r), r))
        incumbent = None
        for right in rights:
            left = mask ^ right
            lm, li = best[left][:2]
            rm, ri = best[right][:2]
            union = "".join(dict.fromkeys(subs(left) + subs(right)))
            macs = lm + rm + _subs_size(spec, union)
            largest = max(li, ri, _subs_size(spec, subs(mask)) if mask != full else 0)
            if incumbent is None or (macs, largest) < incumbent[:2]:
                incumbent = (macs, largest, left, right)
        best[mask] = incumbent

    order: list[tuple[int, int]] = []
    ssa: dict[int, int] = {1 << i: i for i in range(n)}

    def emit(mask: int) -> int:
        if mask in ssa:
            return ssa[mask]
        _, _, left, right = best[mask]
        a, b = emit(left), emit(right)
        order.append((a, b))
        ssa[mask] = n + len(order) - 1
        return ssa[mask]

    emit(full)
    return plan_from_path(spec, order, static, optimal=True)


def _greedy_path(spec: EinsumSpec, static) -> ContractionPlan:
    n = len(spec.inputs)
    live = {i: spec.inputs[i] for i in range(n)}
    path = []
    next_id = n
    while len(live) > 1:
        ids = sorted(live)
        choice = None
        for x in range(len(ids)):
            for y in range(x + 1, len(ids)):
                a, b = ids[x], ids[y]
                others = [s for k, s in live.items() if k not in (a, b)]
                needed = set(spec.output).union(*others)
                out = "".join(c for c in dict.fromkeys(live[a] + live[b]) if c in needed)
                union = "".join(dict.fromkeys(live[a] + live[b]))
                key = (_subs_size(spec, out), _subs_size(spec, union), a, b)
                if choice is None or key < choice[0]:
                    choice = (key, a, b, out)
        _, a, b, out = choice
        del live[a], live[b]
        live[next_id] = out
        path.append((a, b))
        next_id += 1
    return plan_from_path(spec, path, static, optimal=False)


def fold_static(
    plan: ContractionPlan,
    operands: Sequence[Optional[np.ndarray]],
    static: Optional[Sequence[bool]] = None,
) -> ContractionPlan:
    """Precompute every maximal all-static subtree.

    ``operands`` must hold values for the static leaves; dynamic leaves may
    be ``None``.  The returned plan keeps only dynamic nodes; constants for
    folded subtrees live in ``plan.folded`` keyed by their SSA id.
    """
    static = tuple(bool(s) for s in static) if static is not None else plan.leaf_static
    if len(static) != len(plan.spec.inputs):
        raise ValueError("one staticness flag per operand expected")
    values: dict[int, np.ndarray] = dict(plan.folded)
    for i, flag in enumerate(static):
        if flag:
            if operands[i] is None:
                raise ValueError(f"static operand {i} has no value")
            values[i] = as_tensor(operands[i])
    is_static = {i: static[i] for i in range(len(static))}
    is_static.update({k: True for k in plan.folded})
    kept: list[PlanNode] = []
    for node in plan.nodes:
        st = is_static[node.left] and is_static[node.right]
        is_static[node.id] = st
        if st:
            values[node.id] = contract_pair(
                values[node.left], node.left_subs, values[node.right], node.right_subs, node.out_subs
            )
        else:
            kept.append(replace(node, is_static=False))
    referenced = {ref for node in kept for ref in (node.left, node.right)}
    if not kept:
        referenced = {plan.root}
    # static leaves consumed by dynamic nodes ride along so the plan is self-contained
    folded = {k: v for k, v in values.items() if k in referenced and is_static[k]}
    return ContractionPlan(plan.spec, kept, static, plan.root, plan.optimal, folded)


def execute_plan(plan: ContractionPlan, operands: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    spec = plan.spec
    if len(operands) != len(spec.inputs):
        raise ValueError(f"expected {len(spec.inputs)} operands, got {len(operands)}")
    values: dict[int, np.ndarray] = {}
    for i, (subs, op) in enumerate(zip(spec.inputs, operands)):
        if op is None:
            continue
        if tuple(np.shape(op)) != spec.shape_of(subs):
            raise ValueError(f"operand {i} has shape {np.shape(op)}, expected {spec.shape_of(subs)}")
        values[i] = op
    values.update(plan.folded)
    for node in plan.nodes:
        try:
            a, b = values[node.left], values[node.right]
        except KeyError as exc:
            raise ValueError(f"operand %{exc.args[0]} was not supplied") from None
        values[node.id] = contract_pair(a, node.left_subs, b, node.right_subs, node.out_subs)
    return as_tensor(values[plan.root])


# -- factorized layers ---------------------------------------------------------


def build_einsum(
    f: FactorizedLinear, batch: int = 1, batch_letters: str = "b"
) -> tuple[EinsumSpec, list[Optional[np.ndarray]]]:
    """Forward einsum ``y = x W'`` of a factorized layer.

    Operand 0 is the activation (returned as ``None``), reshaped to
    ``batch x m_1 x ... x m_p``; the remaining operands are the cores with
    ``f.scale`` folded into one of them.  A CP layer with shape
    ``(768|12,64)`` gives ``bc,a,da,ea,ca->bde``.
    """
    batch_letters = batch_letters or ""
    pool = [c for c in ALPHABET if c not in batch_letters]
    extents = {c: 1 for c in batch_letters}
    if batch_letters:
        extents[batch_letters[0]] = int(batch)
    shape = f.shape
    p, q = len(shape.rows), len(shape.cols)

    def take(k):
        if k > len(pool):
            raise ValueError("equation needs more than 26 distinct indices")
        out = "".join(pool[:k])
        del pool[:k]
        return out

    cores = [as_tensor(c) for c in f.cores]
    if f.format is Format.CP:
        rank = take(1)
        rows, cols = take(p), take(q)
        inputs = [batch_letters + rows, rank]
        inputs += [c + rank for c in cols] + [c + rank for c in rows]
        ops = [cores[0] * f.scale] + cores[1 + p :] + cores[1 : 1 + p]
        extents[rank] = f.ranks[0]
    elif f.format is Format.TUCKER:
        ranks = take(p + q)
        rows, cols = take(p), take(q)
        inputs = [batch_letters + rows]
        inputs += [rows[k] + ranks[k] for k in range(p)]
        inputs += [ranks]
        inputs += [cols[k] + ranks[p + k] for k in range(q)]
        ops = cores[1 : 1 + p] + [cores[0] * f.scale] + cores[1 + p :]
        extents.update(zip(ranks, f.ranks))
    elif f.format is Format.TTM:
        rows, cols = take(p), take(q)
        bonds = take(p - 1)
        inputs = [batch_letters + rows]
        ops = []
        for k in range(p):
            left = bonds[k - 1] if k > 0 else ""
            right = bonds[k] if k < p - 1 else ""
            inputs.append(left + rows[k] + cols[k] + right)
            G = cores[k]
            G = G.reshape([s for s, keep in zip(G.shape, (k > 0, True, True, k < p - 1)) if keep])
            ops.append(G * f.scale if k == p - 1 else G)
        extents.update(zip(bonds, f.ranks[1:-1]))
    else:
        rows, cols = take(1), take(1)
        inputs = [batch_letters + rows, rows + cols]
        ops = [cores[0] * f.scale]
        extents[rows] = f.M
        extents[cols] = f.N
    if f.format is not Format.DENSE:
        extents.update(zip(rows, shape.rows))
        extents.update(zip(cols, shape.cols))
    spec = EinsumSpec(tuple(inputs), batch_letters + cols, extents)
    return spec, [None] + ops


def layer_plan(f: FactorizedLinear, batch: int = 1, fold: bool = True) -> tuple[ContractionPlan, list]:
    """Optimal (and by default folded) plan for ``f`` plus its operand list."""
    spec, ops = build_einsum(f, batch)
    static = [op is not None for op in ops]
    plan = optimal_path(spec, static)
    if fold:
        plan = fold_static(plan, ops)
    return plan, ops


def layer_apply(plan: ContractionPlan, ops: list, f: FactorizedLinear, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    batch = x.shape[0]
    if f.format is Format.DENSE:
        xs = x
    else:
        xs = x.reshape((batch,) + f.shape.rows)
    y = execute_plan(plan, [xs] + list(ops[1:]))
    return y.reshape(batch, f.N)
