"""Weight-sharing rank supernet.

Each layer is decomposed once at its maximal ranks; every subnet is a
leading slice of those cores.  A genome holds, per layer, a tuple of rank
components: ``(r,)`` for CP, the per-axis ranks for Tucker and the inner
bond ranks for TTM.
"""
from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .factorize import (
    FactorizedLinear,
    Format,
    TensorizationShape,
    decompose,
    param_count,
    reconstruct,
)
from .shapes import ShapeSpaceConfig, enumerate_ranks
from .tensor import DegenerateVarianceWarning, as_tensor, relative_error, variance_match_scale

Entry = tuple[int, ...]
Genome = tuple[Entry, ...]


@dataclass(frozen=True)
class SamplerConfig:
    max_step: int = 3
    sandwich_random_count: int = 2

    def __post_init__(self):
        if self.max_step < 0:
            raise ValueError("max_step must be >= 0")
        if self.sandwich_random_count < 0:
            raise ValueError("sandwich_random_count must be >= 0")


def components(fmt: Format, ranks: Sequence[int]) -> Entry:
    return tuple(ranks[1:-1]) if Format(fmt) is Format.TTM else tuple(ranks)


def full_ranks(fmt: Format, entry: Entry) -> tuple[int, ...]:
    return (1,) + tuple(entry) + (1,) if Format(fmt) is Format.TTM else tuple(entry)


def rank_grid(max_rank: int, multiple: int) -> tuple[int, ...]:
    """Multiples of ``multiple`` up to ``max_rank``, plus ``max_rank`` itself."""
    grid = list(range(multiple, max_rank + 1, multiple))
    if not grid or grid[-1] != max_rank:
        grid.append(max_rank)
    return tuple(grid)


@dataclass
class SuperNetLayer:
    teacher: np.ndarray
    factorized: FactorizedLinear
    grids: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        self.teacher = as_tensor(self.teacher)
        r_max = components(self.factorized.format, self.factorized.ranks)
        if len(self.grids) != len(r_max):
            raise ValueError("one grid per rank component expected")
        for grid, top in zip(self.grids, r_max):
            if not grid or grid[-1] != top or list(grid) != sorted(set(grid)):
                raise ValueError(f"grid {grid} must be increasing and end at the max rank {top}")

    @property
    def format(self) -> Format:
        return self.factorized.format

    @property
    def max_entry(self) -> Entry:
        return tuple(g[-1] for g in self.grids)

    @property
    def min_entry(self) -> Entry:
        return tuple(g[0] for g in self.grids)

    def check(self, entry: Entry) -> None:
        entry = tuple(entry)
        if len(entry) != len(self.grids):
            raise ValueError(f"entry {entry} has {len(entry)} components, expected {len(self.grids)}")
        for v, grid in zip(entry, self.grids):
            if v not in grid:
                raise ValueError(f"rank {v} is not on the grid {grid}")


def supernet_max_ranks(
    fmt: Format, shape: TensorizationShape, multiple: int, target_ratio: float = 0.6
) -> tuple[int, ...]:
    """Largest uniform rank setting whose compression ratio stays at or below ``target_ratio``."""
    cfg = ShapeSpaceConfig(fmt, (shape.order,), 1, multiple, (0.0, target_ratio))
    ranks = enumerate_ranks(shape, fmt, cfg, shape.M, shape.N)
    if ranks:
        return ranks[-1]
    low = ShapeSpaceConfig(fmt, (shape.order,), 1, multiple, (0.0, float("inf")))
    options = enumerate_ranks(shape, fmt, low, shape.M, shape.N)
    if not options:
        raise ValueError(f"no legal rank on the multiple-{multiple} grid for {shape}")
    return options[0]


def build_layer(
    W: np.ndarray,
    fmt: Format,
    shape: TensorizationShape,
    multiple: int,
    target_ratio: float = 0.6,
    max_ranks: Sequence[int] | None = None,
    seed: int | np.random.Generator = 0,
    als_iters: int = 50,
) -> SuperNetLayer:
    """Decompose ``W`` at the supernet's maximal ranks.

    Tucker layers use plain HOSVD so that every leading slice is exactly
    the truncated HOSVD at that rank.
    """
    fmt = Format(fmt)
    ranks = tuple(max_ranks) if max_ranks is not None else supernet_max_ranks(fmt, shape, multiple, target_ratio)
    f = decompose(W, fmt, shape, ranks, seed=seed, hooi_sweeps=0, als_iters=als_iters)
    grids = tuple(rank_grid(r, multiple) for r in components(fmt, ranks))
    return SuperNetLayer(W, f, grids)


def slice_subnet(layer: SuperNetLayer, entry: Entry) -> FactorizedLinear:
    """Leading slices of the supernet cores; the arrays are views, not copies."""
    layer.check(entry)
    f = layer.factorized
    ranks = full_ranks(f.format, entry)
    if f.format is Format.CP:
        (r,) = ranks
        cores = [f.cores[0][:r]] + [A[:, :r] for A in f.cores[1:]]
    elif f.format is Format.TUCKER:
        core = f.cores[0][tuple(slice(0, r) for r in ranks)]
        cores = [core] + [U[:, :r] for U, r in zip(f.cores[1:], ranks)]
    else:
        cores = [G[: ranks[k], :, :, : ranks[k + 1]] for k, G in enumerate(f.cores)]
    return FactorizedLinear(f.format, f.shape, ranks, cores, scale=f.scale)


def subnet_reconstruct(layer: SuperNetLayer, entry: Entry) -> np.ndarray:
    """Reconstruct a slice and rescale it to the teacher's variance."""
    approx = reconstruct(slice_subnet(layer, entry))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateVarianceWarning)
        scaled, _ = variance_match_scale(layer.teacher, approx)
    if np.var(approx) == 0.0:
        warnings.warn("subnet reconstruction has zero variance; left unscaled", DegenerateVarianceWarning, stacklevel=2)
    return scaled


@dataclass(frozen=True)
class RankSpace:
    """Per-layer, per-component rank grids."""

    grids: tuple[tuple[tuple[int, ...], ...], ...]
    formats: tuple[Format, ...] = field(default=())

    @classmethod
    def from_layers(cls, layers: Sequence[SuperNetLayer]) -> "RankSpace":
        return cls(tuple(l.grids for l in layers), tuple(l.format for l in layers))

    @property
    def max_genome(self) -> Genome:
        return tuple(tuple(g[-1] for g in layer) for layer in self.grids)

    @property
    def min_genome(self) -> Genome:
        return tuple(tuple(g[0] for g in layer) for layer in self.grids)

    @property
    def size(self) -> int:
        n = 1
        for layer in self.grids:
            for g in layer:
                n *= len(g)
        return n

    def contains(self, genome: Genome) -> bool:
        if len(genome) != len(self.grids):
            return False
        for entry, layer in zip(genome, self.grids):
            if len(entry) != len(layer) or any(v not in g for v, g in zip(entry, layer)):
                return False
        return True

    def random_genome(self, rng: np.random.Generator) -> Genome:
        return tuple(tuple(int(g[rng.integers(len(g))]) for g in layer) for layer in self.grids)

    def all_genomes(self) -> list[Genome]:
        per_layer = [list(itertools.product(*layer)) for layer in self.grids]
        return [tuple(g) for g in itertools.product(*per_layer)]

    @staticmethod
    def features(genome: Genome) -> list[float]:
        return [float(v) for entry in genome for v in entry]


def sample_genome(
    prev: Genome, space: RankSpace, rng: np.random.Generator, max_step: int = 3
) -> Genome:
    """Move each rank component by at most ``max_step`` grid positions."""
    if not space.contains(prev):
        raise ValueError(f"genome {prev} is not in the rank space")
    out = []
    for entry, layer in zip(prev, space.grids):
        new = []
        for v, grid in zip(entry, layer):
            idx = grid.index(v) + int(rng.integers(-max_step, max_step + 1))
            new.append(int(grid[min(max(idx, 0), len(grid) - 1)]))
        out.append(tuple(new))
    return tuple(out)


def sandwich_batch(
    space: RankSpace, prev: Genome, rng: np.random.Generator, config: SamplerConfig = SamplerConfig()
) -> list[Genome]:
    """Largest subnet, smallest subnet, then constrained random samples around ``prev``."""
    batch = [space.max_genome, space.min_genome]
    batch += [sample_genome(prev, space, rng, config.max_step) for _ in range(config.sandwich_random_count)]
    return batch


def layer_error(layer: SuperNetLayer, entry: Entry) -> float:
    if not np.any(layer.teacher):
        return 0.0
    return relative_error(layer.teacher, subnet_reconstruct(layer, entry))


def proxy_accuracy(genome: Genome, layers: Sequence[SuperNetLayer]) -> float:
    """``1 - mean(min(1, eps_l))`` over layers, eps from variance-matched slices."""
    if len(genome) != len(layers):
        raise ValueError("genome length does not match the number of layers")
    errs = [min(1.0, layer_error(layer, entry)) for layer, entry in zip(layers, genome)]
    return 1.0 - float(np.mean(errs))


class ProxyEvaluator:
    """Memoized :func:`proxy_accuracy`; per-layer errors are cached by entry."""

    def __init__(self, layers: Sequence[SuperNetLayer]):
        self.layers = list(layers)
        self._cache: dict[tuple[int, Entry], float] = {}

    def layer_error(self, index: int, entry: Entry) -> float:
        key = (index, tuple(entry))
        if key not in self._cache:
            self._cache[key] = min(1.0, layer_error(self.layers[index], entry))
        return self._cache[key]

    def __call__(self, genome: Genome) -> float:
        if len(genome) != len(self.layers):
            raise ValueError("genome length does not match the number of layers")
        errs = [self.layer_error(i, e) for i, e in enumerate(genome)]
        return 1.0 - float(np.mean(errs))


def genome_param_count(genome: Genome, layers: Sequence[SuperNetLayer]) -> int:
    return sum(
        param_count(l.format, l.factorized.shape, full_ranks(l.format, e)) for l, e in zip(layers, genome)
    )
