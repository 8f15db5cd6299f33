"""Tensorization-shape search: candidates, rank enumeration, cost table, Pareto selection."""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .cost import AcceleratorConfig, CostRecord, layer_cost
from .factorize import Format, TensorizationShape, max_ranks, param_count, project

DEFAULT_ORDERS = {Format.TTM: (6, 8, 10), Format.TUCKER: (4, 6, 8), Format.CP: (2, 3)}
DEFAULT_MULTIPLE = {Format.TTM: 32, Format.TUCKER: 8, Format.CP: 32}


@dataclass(frozen=True)
class ShapeSpaceConfig:
    format: Format = Format.CP
    orders: tuple[int, ...] = (2, 3)
    top_k: int = 3
    rank_multiple: int = 32
    compression_limits: tuple[float, float] = (0.35, 0.5)

    def __post_init__(self):
        object.__setattr__(self, "format", Format(self.format))
        object.__setattr__(self, "orders", tuple(int(d) for d in self.orders))
        object.__setattr__(self, "compression_limits", tuple(float(c) for c in self.compression_limits))
        lo, hi = self.compression_limits
        if not lo < hi:
            raise ValueError(f"compression limits must satisfy c_min < c_max, got {self.compression_limits}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.rank_multiple < 1:
            raise ValueError("rank_multiple must be >= 1")
        if self.format is Format.DENSE:
            raise ValueError("shape search needs a factorized format")

    @classmethod
    def default(cls, fmt: Format) -> "ShapeSpaceConfig":
        fmt = Format(fmt)
        return cls(fmt, DEFAULT_ORDERS[fmt], 3, DEFAULT_MULTIPLE[fmt], (0.35, 0.5))


@dataclass(frozen=True)
class ShapeCandidate:
    shape: TensorizationShape
    entropy: float


def ordered_factorizations(M: int, d: int) -> list[tuple[int, ...]]:
    """Every ordered ``d``-tuple of integers >= 2 whose product is ``M``."""
    if d < 1 or M < 2:
        return []
    if d == 1:
        return [(M,)]
    out = []
    for f in range(2, M // 2 + 1):
        if M % f == 0:
            out.extend((f,) + rest for rest in ordered_factorizations(M // f, d - 1))
    return out


def entropy_score(factors: Sequence[int], M: Optional[int] = None) -> float:
    """``-sum p ln p`` with ``p_i = ln(m_i) / ln(M)``; largest for balanced factors."""
    M = math.prod(factors) if M is None else M
    if math.prod(factors) != M:
        raise ValueError(f"{tuple(factors)} does not multiply to {M}")
    total = math.log(M)
    h = 0.0
    for m in factors:
        p = math.log(m) / total
        if p > 0:
            h -= p * math.log(p)
    return h


def top_factorizations(M: int, d: int, k: int) -> list[tuple[int, ...]]:
    """The ``k`` highest-entropy factor multisets, as sorted tuples."""
    canonical = sorted({tuple(sorted(f)) for f in ordered_factorizations(M, d)})
    canonical.sort(key=lambda f: (-round(entropy_score(f, M), 12), f))
    return canonical[:k]


def _splits(fmt: Format, d: int) -> list[tuple[int, int]]:
    if d < 2:
        return []
    p = d // 2
    if fmt is Format.TTM:
        return [(p, p)] if d % 2 == 0 else []
    return [(p, d - p)] if d % 2 == 0 else [(p, d - p), (d - p, p)]


def generate_candidates(M: int, N: int, config: ShapeSpaceConfig) -> list[ShapeCandidate]:
    """Top-k entropy factorizations per side, paired, then permuted within each side.

    Candidates are returned sorted by descending entropy, then by shape.
    """
    seen: dict[TensorizationShape, float] = {}
    for d in config.orders:
        for p, q in _splits(config.format, d):
            rows = top_factorizations(M, p, config.top_k)
            cols = top_factorizations(N, q, config.top_k)
            for r, c in itertools.product(rows, cols):
                h = entropy_score(r, M) + entropy_score(c, N)
                for rp in sorted(set(itertools.permutations(r))):
                    for cp in sorted(set(itertools.permutations(c))):
                        seen.setdefault(TensorizationShape(rp, cp), h)
    out = [ShapeCandidate(s, h) for s, h in seen.items()]
    out.sort(key=lambda cand: (-round(cand.entropy, 12), cand.shape))
    return out


def enumerate_ranks(
    shape: TensorizationShape, fmt: Format, config: ShapeSpaceConfig, M: int, N: int
) -> list[tuple[int, ...]]:
    """Rank settings on the multiple grid whose compression ratio is within limits.

    Tucker and TTM use uniform ranks clipped per axis (or bond) to the
    legal maximum.
    """
    fmt = Format(fmt)
    shape.check_matrix(M, N)
    lo, hi = config.compression_limits
    mult = config.rank_multiple
    limit = max_ranks(fmt, shape)
    out: list[tuple[int, ...]] = []
    for r in range(mult, max(limit) + 1, mult):
        if fmt is Format.CP:
            ranks = (r,)
        elif fmt is Format.TUCKER:
            ranks = tuple(min(r, d) for d in limit)
        else:
            ranks = (1,) + tuple(min(r, b) for b in limit[1:-1]) + (1,)
        if ranks in out:
            continue
        c = param_count(fmt, shape, ranks) / (M * N)
        if lo <= c <= hi:
            out.append(ranks)
    return out


@dataclass(frozen=True)
class CostRow:
    shape: TensorizationShape
    ranks: tuple[int, ...]
    error: float
    ratio: float
    cost: CostRecord = field(compare=False)

    @property
    def objectives(self) -> tuple[float, float, float]:
        return (self.error, self.ratio, self.cost.edp)

    def to_dict(self) -> dict:
        return {
            "shape": str(self.shape),
            "ranks": list(self.ranks),
            "error": self.error,
            "ratio": self.ratio,
            "cost": self.cost.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CostRow":
        return cls(
            TensorizationShape.parse(data["shape"]),
            tuple(data["ranks"]),
            float(data["error"]),
            float(data["ratio"]),
            CostRecord.from_dict(data["cost"]),
        )


def row_seed(seed: int, shape: TensorizationShape, ranks: Sequence[int]) -> np.random.Generator:
    key = [seed, *shape.rows, 0, *shape.cols, 0, *ranks]
    return np.random.default_rng(np.random.SeedSequence(key))


def build_cost_table(
    W: np.ndarray,
    candidates: Sequence[ShapeCandidate | TensorizationShape],
    config: ShapeSpaceConfig,
    accel: AcceleratorConfig,
    batch: int,
    seed: int = 0,
    jobs: int = 1,
) -> list[CostRow]:
    """Evaluate decomposition error, compression and cost for every (shape, rank) pair.

    Each row draws its randomness from a generator keyed on (seed, shape,
    ranks), so the table does not depend on ``jobs``.
    """
    if not candidates:
        raise ValueError("build_cost_table needs at least one candidate")
    M, N = W.shape
    shapes = list(dict.fromkeys(c.shape if isinstance(c, ShapeCandidate) else c for c in candidates))
    work = [(s, r) for s in shapes for r in enumerate_ranks(s, config.format, config, M, N)]

    def evaluate(item):
        s, r = item
        f, eps = project(W, config.format, s, r, seed=row_seed(seed, s, r))
        return CostRow(s, r, eps, f.param_count / (M * N), layer_cost(f, batch, accel))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(evaluate, work))
    return [evaluate(item) for item in work]


def pareto_indices(points: np.ndarray) -> list[int]:
    """Indices of the non-dominated rows of ``points`` (all objectives minimized).

    Rows are visited in lexicographic order; a row can only be dominated by
    one that sorts before it, and by transitivity it suffices to test it
    against the front found so far.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2:
        raise ValueError("points must be a 2-D array")
    order = np.lexsort(pts.T[::-1])
    front: list[int] = []
    for i in order:
        if front:
            f = pts[front]
            dominated = np.all(f <= pts[i], axis=1) & np.any(f < pts[i], axis=1)
            if dominated.any():
                continue
        front.append(int(i))
    return sorted(front)


def pareto_front(table: Sequence[CostRow]) -> list[CostRow]:
    if not table:
        raise ValueError("pareto_front needs a nonempty table")
    idx = pareto_indices(np.array([row.objectives for row in table]))
    return [table[i] for i in idx]


def select_shape(front: Sequence[CostRow]) -> CostRow:
    """Lowest error; ties go to lower EDP, then lower ratio, then the smaller shape."""
    if not front:
        raise ValueError("cannot select a shape from an empty front")
    return min(front, key=lambda r: (r.error, r.cost.edp, r.ratio, r.shape, r.ranks))
