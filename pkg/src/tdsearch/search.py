"""Rank search: surrogate accuracy forest and evolutionary search over genomes."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .supernet import Genome, RankSpace

Predictor = Callable[[Sequence[Genome]], Sequence[float]]
CostFn = Callable[[Genome], tuple[float, float]]


# -- regression forest -------------------------------------------------------


@dataclass
class RegressionTree:
    """Array-encoded CART tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            feat = self.feature[node]
            inner = feat >= 0
            if not inner.any():
                return self.value[node]
            rows = np.nonzero(inner)[0]
            go_left = X[rows, feat[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value")}

    @classmethod
    def from_dict(cls, data: dict) -> "RegressionTree":
        return cls(
            np.asarray(data["feature"], dtype=np.int64),
            np.asarray(data["threshold"], dtype=float),
            np.asarray(data["left"], dtype=np.int64),
            np.asarray(data["right"], dtype=np.int64),
            np.asarray(data["value"], dtype=float),
        )


def _best_split(X, y, min_leaf):
    n = len(y)
    best = None
    total_sum, total_sq = y.sum(), np.square(y).sum()
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        xs, ys = X[order, j], y[order]
        csum = np.cumsum(ys)[:-1]
        csq = np.cumsum(np.square(ys))[:-1]
        n_left = np.arange(1, n)
        sse = (csq - csum**2 / n_left) + (
            (total_sq - csq) - (total_sum - csum) ** 2 / (n - n_left)
        )
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_leaf) & (n - n_left >= min_leaf)
        if not valid.any():
            continue
        sse = np.where(valid, sse, np.inf)
        k = int(np.argmin(sse))
        if best is None or sse[k] < best[0] - 1e-12:
            best = (sse[k], j, 0.5 * (xs[k] + xs[k + 1]))
    return best


def fit_tree(X: np.ndarray, y: np.ndarray, max_depth: int = 10, min_leaf: int = 1) -> RegressionTree:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            arr.append(v)
        return len(feature) - 1

    def grow(idx, depth):
        node = new_node()
        ys = y[idx]
        value[node] = float(ys.mean())
        if depth >= max_depth or len(idx) < 2 * min_leaf or np.ptp(ys) == 0.0:
            return node
        split = _best_split(X[idx], ys, min_leaf)
        if split is None:
            return node
        _, j, thr = split
        mask = X[idx, j] <= thr
        feature[node], threshold[node] = j, thr
        left[node] = grow(idx[mask], depth + 1)
        right[node] = grow(idx[~mask], depth + 1)
        return node

    grow(np.arange(len(y)), 0)
    return RegressionTree(
        np.array(feature, dtype=np.int64),
        np.array(threshold, dtype=float),
        np.array(left, dtype=np.int64),
        np.array(right, dtype=np.int64),
        np.array(value, dtype=float),
    )


@dataclass(frozen=True)
class ForestConfig:
    tree_count: int = 100
    max_depth: int = 10
    min_leaf: int = 1
    bootstrap: Optional[float] = 1.0
    seed: int = 0


@dataclass
class SurrogateForest:
    trees: list[RegressionTree]
    config: ForestConfig = field(default_factory=ForestConfig)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def predict_genomes(self, genomes: Sequence[Genome]) -> np.ndarray:
        return self.predict([RankSpace.features(g) for g in genomes])

    def to_dict(self) -> dict:
        return {"config": asdict(self.config), "trees": [t.to_dict() for t in self.trees]}

    @classmethod
    def from_dict(cls, data: dict) -> "SurrogateForest":
        return cls([RegressionTree.from_dict(t) for t in data["trees"]], ForestConfig(**data["config"]))


def fit_forest(X, y, config: ForestConfig = ForestConfig()) -> SurrogateForest:
    """Bagged regression trees; each tree has its own seeded bootstrap sample."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    if len(y) == 0:
        raise ValueError("cannot fit a forest on an empty dataset")
    if len(X) != len(y):
        raise ValueError("features and targets differ in length")
    trees = []
    for child in np.random.SeedSequence(config.seed).spawn(config.tree_count):
        if config.bootstrap:
            rng = np.random.default_rng(child)
            size = max(1, int(round(config.bootstrap * len(y))))
            idx = rng.integers(0, len(y), size=size)
        else:
            idx = np.arange(len(y))
        trees.append(fit_tree(X[idx], y[idx], config.max_depth, config.min_leaf))
    return SurrogateForest(trees, config)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties (nan if either side is constant)."""
    xs, ys = np.asarray(xs, dtype=float), np.asarray(ys, dtype=float)
    if xs.shape != ys.shape:
        raise ValueError("spearman needs sequences of equal length")
    if xs.size < 2:
        raise ValueError("spearman needs at least two points")
    rx, ry = rankdata(xs), rankdata(ys)
    rx, ry = rx - rx.mean(), ry - ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0.0:
        return float("nan")
    return float(rx @ ry) / denom


# -- dataset -----------------------------------------------------------------


@dataclass
class SurrogateDataset:
    genomes: list[Genome]
    scores: list[float]
    holdout: list[int]

    @property
    def train(self) -> list[int]:
        held = set(self.holdout)
        return [i for i in range(len(self.genomes)) if i not in held]

    def features(self, idx: Sequence[int]) -> np.ndarray:
        return np.array([RankSpace.features(self.genomes[i]) for i in idx], dtype=float)

    def targets(self, idx: Sequence[int]) -> np.ndarray:
        return np.array([self.scores[i] for i in idx], dtype=float)

    def to_dict(self) -> dict:
        return {
            "genomes": [[list(e) for e in g] for g in self.genomes],
            "scores": list(self.scores),
            "holdout": list(self.holdout),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SurrogateDataset":
        genomes = [tuple(tuple(e) for e in g) for g in data["genomes"]]
        return cls(genomes, [float(s) for s in data["scores"]], [int(i) for i in data["holdout"]])


def sample_dataset(
    space: RankSpace,
    n: int,
    evaluator: Callable[[Genome], float],
    rng: np.random.Generator,
    holdout_fraction: float = 0.05,
    jobs: int = 1,
) -> SurrogateDataset:
    """Uniformly sampled genomes (largest and smallest always included) with scores."""
    if n < 2:
        raise ValueError("the dataset needs at least the largest and smallest genomes")
    genomes = [space.max_genome, space.min_genome]
    genomes += [space.random_genome(rng) for _ in range(n - 2)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            scores = [float(s) for s in pool.map(evaluator, genomes)]
    else:
        scores = [float(evaluator(g)) for g in genomes]
    n_hold = int(round(holdout_fraction * n))
    n_hold = min(n_hold, n - 1)
    holdout = sorted(int(i) for i in rng.permutation(n)[:n_hold])
    return SurrogateDataset(genomes, scores, holdout)


def holdout_fidelity(forest: SurrogateForest, data: SurrogateDataset) -> float:
    idx = data.holdout
    if len(idx) < 2:
        return float("nan")
    return spearman(forest.predict(data.features(idx)), data.targets(idx))


# -- evolution ---------------------------------------------------------------


def objective(acc: float, energy: float, latency: float, gamma: float = 0.25) -> float:
    """``(1 - acc) * (energy * latency) ** gamma``; lower is better."""
    if energy <= 0 or latency <= 0:
        raise ValueError("energy and latency must be positive")
    return (1.0 - acc) * (energy * latency) ** gamma


@dataclass(frozen=True)
class EvolutionConfig:
    population: int = 200
    parent_count: int = 40
    mutation_count: int = 80
    mutation_prob: float = 0.5
    crossover_count: int = 80
    steps: int = 100
    gamma: float = 0.25

    def __post_init__(self):
        if self.parent_count + self.mutation_count + self.crossover_count != self.population:
            raise ValueError("parents + mutations + crossovers must equal the population size")
        if not 0.0 < self.mutation_prob <= 1.0:
            raise ValueError("mutation_prob must be in (0, 1]")
        if self.parent_count < 1 or self.steps < 1:
            raise ValueError("need at least one parent and one step")


def _mutate(genome: Genome, space: RankSpace, prob: float, rng) -> Genome:
    out = []
    for entry, layer in zip(genome, space.grids):
        new = []
        for v, grid in zip(entry, layer):
            if rng.random() < prob:
                v = grid[rng.integers(len(grid))]
            new.append(int(v))
        out.append(tuple(new))
    return tuple(out)


def _crossover(a: Genome, b: Genome, rng) -> Genome:
    return tuple(ea if rng.random() < 0.5 else eb for ea, eb in zip(a, b))


def evolve(
    space: RankSpace,
    predictor: Predictor,
    cost_fn: CostFn,
    config: EvolutionConfig,
    rng: np.random.Generator,
    initial: Optional[Sequence[Genome]] = None,
) -> tuple[Genome, list[dict]]:
    """Elitist evolutionary search minimizing :func:`objective`.

    ``predictor`` maps a list of genomes to accuracies; ``cost_fn`` maps one
    genome to its total (energy, latency).  Each step keeps the best
    ``parent_count`` distinct genomes and refills the population with
    mutants and uniform crossovers of random parents.
    """
    scores: dict[Genome, tuple[float, float, float, float]] = {}

    def evaluate(genomes):
        fresh = [g for g in dict.fromkeys(genomes) if g not in scores]
        if fresh:
            accs = predictor(fresh)
            for g, acc in zip(fresh, accs):
                acc = min(1.0, max(0.0, float(acc)))
                energy, latency = cost_fn(g)
                scores[g] = (objective(acc, energy, latency, config.gamma), acc, energy, latency)

    population = list(initial) if initial is not None else []
    population += [space.random_genome(rng) for _ in range(config.population - len(population))]
    population = population[: config.population]
    if not all(space.contains(g) for g in population):
        raise ValueError("initial population leaves the rank space")
    history = []
    for step in range(config.steps):
        evaluate(population)
        ranked = sorted(dict.fromkeys(population), key=lambda g: (scores[g][0], g))
        best = ranked[0]
        objs = [scores[g][0] for g in population]
        history.append(
            {
                "step": step,
                "best_objective": scores[best][0],
                "best_genome": [list(e) for e in best],
                "best_accuracy": scores[best][1],
                "best_energy": scores[best][2],
                "best_latency": scores[best][3],
                "mean_objective": float(np.mean(objs)),
                "unique": len(ranked),
            }
        )
        if step == config.steps - 1:
            return best, history
        parents = ranked[: config.parent_count]
        mutants = [
            _mutate(parents[rng.integers(len(parents))], space, config.mutation_prob, rng)
            for _ in range(config.mutation_count)
        ]
        children = [
            _crossover(parents[rng.integers(len(parents))], parents[rng.integers(len(parents))], rng)
            for _ in range(config.crossover_count)
        ]
        fill = [parents[k % len(parents)] for k in range(config.parent_count - len(parents))]
        population = parents + fill + mutants + children
    raise AssertionError("unreachable")
