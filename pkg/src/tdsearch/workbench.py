"""Pipeline configuration, orchestration, persistence and reporting.

A run goes through three levels: tensorization-shape search per matrix
size, rank search on a weight-sharing supernet, and distillation of the
chosen factorized student.  Every artifact is JSON (CSV for the report),
written as soon as its stage finishes and stamped with the config hash.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from .cost import AcceleratorConfig, CostRecord, layer_cost, model_cost
from .distill import DistillConfig, ToyTaskConfig, accuracy, compare_recipes, factorize_net, prepare_toy
from .factorize import Format, TensorizationShape, param_count
from .search import (
    EvolutionConfig,
    ForestConfig,
    SurrogateDataset,
    SurrogateForest,
    evolve,
    fit_forest,
    holdout_fidelity,
    sample_dataset,
)
from .shapes import CostRow, ShapeSpaceConfig, build_cost_table, generate_candidates, pareto_front, select_shape
from .supernet import (
    Genome,
    ProxyEvaluator,
    RankSpace,
    SamplerConfig,
    SuperNetLayer,
    build_layer,
    full_ranks,
    sandwich_batch,
    slice_subnet,
)

ARTIFACT_FILES = (
    "config.json",
    "shape_table.json",
    "cost_table.json",
    "surrogate.json",
    "evolution.json",
    "genome.json",
    "report.csv",
    "distill.json",
    "manifest.json",
)


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


# -- configuration -----------------------------------------------------------


def _toy_shape_space(fmt: Format = Format.CP) -> ShapeSpaceConfig:
    fmt = Format(fmt)
    if fmt is Format.CP:
        return ShapeSpaceConfig(fmt, (2, 3), 3, 8, (0.05, 0.5))
    return ShapeSpaceConfig(fmt, (4,), 3, 2, (0.05, 0.5))


def _toy_evolution() -> EvolutionConfig:
    return EvolutionConfig(population=40, parent_count=8, mutation_count=16, mutation_prob=0.5, crossover_count=16, steps=20)


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run depends on.

    ``out_dir`` and ``jobs`` only control where and how fast a run goes, so
    they are left out of :meth:`config_hash`.
    """

    layers: tuple[tuple[int, int], ...] = ((64, 64), (64, 64))
    weights_file: Optional[str] = None
    format: Format = Format.CP
    shape_space: ShapeSpaceConfig = field(default_factory=_toy_shape_space)
    accelerator: AcceleratorConfig = field(default_factory=AcceleratorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    evolution: EvolutionConfig = field(default_factory=_toy_evolution)
    distill: DistillConfig = field(default_factory=DistillConfig)
    task: ToyTaskConfig = field(default_factory=ToyTaskConfig)
    batch: int = 64
    dataset_size: int = 256
    supernet_ratio: float = 0.6
    seed: int = 0
    out_dir: str = "artifacts"
    jobs: int = 1

    def __post_init__(self):
        object.__setattr__(self, "format", Format(self.format))
        object.__setattr__(self, "layers", tuple(tuple(int(v) for v in l) for l in self.layers))
        if not self.layers:
            raise ValueError("the model needs at least one layer")
        if any(len(l) != 2 or min(l) < 1 for l in self.layers):
            raise ValueError(f"layer dimensions must be positive (M, N) pairs, got {self.layers}")
        if self.shape_space.format is not self.format:
            raise ValueError(f"shape_space.format {self.shape_space.format.value} differs from format {self.format.value}")
        if self.batch < 1 or self.jobs < 1:
            raise ValueError("batch and jobs must be >= 1")
        if self.dataset_size < 2:
            raise ValueError("dataset_size must be >= 2")
        if not 0 < self.supernet_ratio:
            raise ValueError("supernet_ratio must be positive")
        if not isinstance(self.seed, int):
            raise ValueError("seed must be an integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["format"] = self.format.value
        d["shape_space"]["format"] = self.shape_space.format.value
        return _jsonable(d)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        nested = {
            "shape_space": ShapeSpaceConfig,
            "accelerator": AcceleratorConfig,
            "sampler": SamplerConfig,
            "forest": ForestConfig,
            "evolution": EvolutionConfig,
            "distill": DistillConfig,
            "task": ToyTaskConfig,
        }
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        fmt = Format(kwargs.get("format", Format.CP))
        defaults = cls(format=fmt, shape_space=_toy_shape_space(fmt))
        for key, typ in nested.items():
            base = asdict(getattr(defaults, key))
            if key in kwargs:
                base.update(kwargs[key])
            if key == "shape_space":
                base["format"] = base.get("format", fmt.value)
                base = {k: tuple(v) if isinstance(v, list) else v for k, v in base.items()}
            kwargs[key] = typ(**base)
        if "layers" in kwargs:
            kwargs["layers"] = tuple(tuple(l) for l in kwargs["layers"])
        return cls(**kwargs)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("out_dir")
        d.pop("jobs")
        return hashlib.sha256(canonical_json(d).encode()).hexdigest()


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Format):
        return obj.value
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


def load_config(path: str | Path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise StageError("config", f"cannot read {path}: {exc.strerror}") from exc
    try:
        return PipelineConfig.from_dict(json.loads(text))
    except (json.JSONDecodeError, TypeError, ValueError) as exc:
        raise StageError("config", f"invalid config {path}: {exc}") from exc


def save_config(config: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


# -- weights file ------------------------------------------------------------


def write_weights(path: str | Path, matrices: Sequence[np.ndarray]) -> None:
    """uint64 count, then (M, N) per matrix, then row-major float64 data, all little-endian."""
    buf = io.BytesIO()
    buf.write(struct.pack("<Q", len(matrices)))
    for W in matrices:
        buf.write(struct.pack("<QQ", *W.shape))
    for W in matrices:
        buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def read_weights(path: str | Path) -> list[np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise ValueError(f"{path}: truncated header")
    (count,) = struct.unpack_from("<Q", data, 0)
    offset = 8
    if len(data) < offset + 16 * count:
        raise ValueError(f"{path}: truncated header")
    dims = [struct.unpack_from("<QQ", data, offset + 16 * i) for i in range(count)]
    offset += 16 * count
    expected = offset + 8 * sum(m * n for m, n in dims)
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    out = []
    for m, n in dims:
        out.append(np.frombuffer(data, dtype="<f8", count=m * n, offset=offset).reshape(m, n).astype(float))
        offset += 8 * m * n
    return out


# -- artifacts ---------------------------------------------------------------


@dataclass
class SearchArtifacts:
    config_hash: str
    shapes: dict[str, dict] = field(default_factory=dict)
    cost_tables: dict[str, list[CostRow]] = field(default_factory=dict)
    dataset: Optional[SurrogateDataset] = None
    forest: Optional[SurrogateForest] = None
    spearman: Optional[float] = None
    history: list[dict] = field(default_factory=list)
    genome: Optional[dict] = None
    distill: Optional[dict] = None


def _size_key(M: int, N: int) -> str:
    return f"{M}x{N}"


def write_json(out: Path, name: str, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(_jsonable(payload), indent=1, sort_keys=True) + "\n")


def read_json(out: Path, name: str) -> dict:
    return json.loads((Path(out) / name).read_text())


def write_manifest(out: Path, config_hash: str) -> None:
    files = {}
    for name in ARTIFACT_FILES:
        p = out / name
        if name != "manifest.json" and p.exists():
            files[name] = hashlib.sha256(p.read_bytes()).hexdigest()
    write_json(out, "manifest.json", {"config_hash": config_hash, "files": files})


# -- stages ------------------------------------------------------------------


def build_teacher(config: PipelineConfig):
    init = None
    if config.weights_file:
        try:
            init = read_weights(config.weights_file)
        except (OSError, ValueError) as exc:
            raise StageError("teacher", str(exc)) from exc
        if [tuple(W.shape) for W in init] != list(config.layers):
            raise StageError("teacher", f"weights file holds {[W.shape for W in init]}, config says {config.layers}")
    try:
        return prepare_toy(config.layers, config.task, config.seed, init)
    except ValueError as exc:
        raise StageError("teacher", str(exc)) from exc


def shape_search(config: PipelineConfig, teacher_layers: Sequence[np.ndarray], select: bool = True):
    """Level 1: cost table and (optionally) Pareto selection per distinct matrix size.

    The first layer of each size stands in for all layers of that size.
    """
    shapes, tables = {}, {}
    for idx, W in enumerate(teacher_layers):
        M, N = W.shape
        key = _size_key(M, N)
        if key in tables:
            continue
        cands = generate_candidates(M, N, config.shape_space)
        if not cands:
            raise StageError("generate_candidates", f"no tensorization shape for {key} with orders {config.shape_space.orders}")
        table = build_cost_table(W, cands, config.shape_space, config.accelerator, config.batch, config.seed, config.jobs)
        if not table:
            lo, hi = config.shape_space.compression_limits
            raise StageError(
                "enumerate_ranks",
                f"empty rank space for {key}: no multiple of {config.shape_space.rank_multiple} gives a compression ratio in [{lo}, {hi}]",
            )
        tables[key] = table
        entry = {"M": M, "N": N, "reference_layer": idx, "candidates": [[str(c.shape), c.entropy] for c in cands]}
        if select:
            front = pareto_front(table)
            best = select_shape(front)
            entry["front"] = [r.to_dict() for r in front]
            entry["selected"] = best.to_dict()
        shapes[key] = entry
    return shapes, tables


def _cost_table_payload(config_hash, tables):
    return {"config_hash": config_hash, "sizes": {k: [r.to_dict() for r in rows] for k, rows in tables.items()}}


def build_supernet(config: PipelineConfig, teacher_layers, shapes: dict) -> list[SuperNetLayer]:
    layers = []
    for idx, W in enumerate(teacher_layers):
        s = TensorizationShape.parse(shapes[_size_key(*W.shape)]["selected"]["shape"])
        try:
            layers.append(
                build_layer(
                    W,
                    config.format,
                    s,
                    config.shape_space.rank_multiple,
                    config.supernet_ratio,
                    seed=np.random.default_rng([config.seed, 2, idx]),
                )
            )
        except ValueError as exc:
            raise StageError("supernet", f"layer {idx}: {exc}") from exc
    return layers


class GenomeCost:
    """Exact per-layer cost of a genome, cached by (layer, rank entry)."""

    def __init__(self, layers: Sequence[SuperNetLayer], batch: int, accel: AcceleratorConfig):
        self.layers = list(layers)
        self.batch = batch
        self.accel = accel
        self._cache: dict[tuple[int, tuple], CostRecord] = {}

    def layer(self, index: int, entry) -> CostRecord:
        key = (index, tuple(entry))
        if key not in self._cache:
            self._cache[key] = layer_cost(slice_subnet(self.layers[index], entry), self.batch, self.accel)
        return self._cache[key]

    def __call__(self, genome: Genome) -> tuple[float, float]:
        energy, seconds, _ = model_cost([self.layer(i, e) for i, e in enumerate(genome)])
        return energy, seconds


def genome_breakdown(genome: Genome, layers, costs: GenomeCost, evaluator: ProxyEvaluator, forest) -> dict:
    rows = []
    for i, (layer, entry) in enumerate(zip(layers, genome)):
        f = layer.factorized
        ranks = full_ranks(f.format, entry)
        params = param_count(f.format, f.shape, ranks)
        rec = costs.layer(i, entry)
        rows.append(
            {
                "layer": i,
                "M": f.M,
                "N": f.N,
                "shape": str(f.shape),
                "ranks": list(ranks),
                "params": params,
                "ratio": params / (f.M * f.N),
                "energy": rec.energy,
                "latency": rec.seconds,
                "edp": rec.edp,
                "error": evaluator.layer_error(i, entry),
            }
        )
    energy, latency = costs(genome)
    return {
        "genome": [list(e) for e in genome],
        "format": layers[0].format.value,
        "proxy_accuracy": evaluator(genome),
        "predicted_accuracy": float(forest.predict_genomes([genome])[0]),
        "layers": rows,
        "energy": energy,
        "latency": latency,
        "edp": energy * latency,
    }


def rank_search(config: PipelineConfig, layers: Sequence[SuperNetLayer]):
    """Level 2: proxy dataset, surrogate forest, fidelity and evolution."""
    space = RankSpace.from_layers(layers)
    evaluator = ProxyEvaluator(layers)
    rng = np.random.default_rng([config.seed, 3])
    # sandwich samples warm the proxy cache and seed the initial population
    warm = sandwich_batch(space, space.max_genome, rng, config.sampler)
    dataset = sample_dataset(space, config.dataset_size, evaluator, rng, jobs=config.jobs)
    train = dataset.train
    forest = fit_forest(dataset.features(train), dataset.targets(train), dataclasses.replace(config.forest, seed=config.seed))
    rho = holdout_fidelity(forest, dataset)
    costs = GenomeCost(layers, config.batch, config.accelerator)
    initial = list(dict.fromkeys(warm))[: config.evolution.population]
    best, history = evolve(
        space, lambda gs: forest.predict_genomes(gs), costs, config.evolution, np.random.default_rng([config.seed, 4]), initial
    )
    return dataset, forest, rho, history, genome_breakdown(best, layers, costs, evaluator, forest)


def distill_stage(config: PipelineConfig, setup, genome_info: dict) -> dict:
    shapes = [TensorizationShape.parse(l["shape"]) for l in genome_info["layers"]]
    ranks = [tuple(l["ranks"]) for l in genome_info["layers"]]
    student = factorize_net(setup.teacher, Format(genome_info["format"]), shapes, ranks, seed=config.seed)
    results = compare_recipes(setup, student, config.distill)
    results["teacher"] = {"accuracy": accuracy(setup.teacher, *setup.holdout), "curves": []}
    return results


# -- reporting ---------------------------------------------------------------

REPORT_COLUMNS = (
    "layer",
    "shape",
    "ranks",
    "params",
    "ratio",
    "energy",
    "latency",
    "edp",
    "params_share",
    "energy_share",
    "latency_share",
)


def report_breakdown(genome_info: dict) -> list[dict]:
    """Per-layer rows plus a totals row whose EDP is total energy times total latency."""
    layers = genome_info.get("layers") if genome_info else None
    if not layers:
        raise StageError("report", "genome artifact has no per-layer breakdown")
    energy, latency, edp = model_cost(
        [CostRecord(energy=l["energy"], seconds=l["latency"], edp=l["edp"]) for l in layers]
    )
    params = sum(l["params"] for l in layers)
    dense = sum(l["M"] * l["N"] for l in layers)
    rows = []
    for l in layers:
        rows.append(
            {
                "layer": l["layer"],
                "shape": l["shape"],
                "ranks": "x".join(str(r) for r in l["ranks"]),
                "params": l["params"],
                "ratio": l["ratio"],
                "energy": l["energy"],
                "latency": l["latency"],
                "edp": l["edp"],
                "params_share": l["params"] / params,
                "energy_share": l["energy"] / energy,
                "latency_share": l["latency"] / latency,
            }
        )
    rows.append(
        {
            "layer": "total",
            "shape": "",
            "ranks": "",
            "params": params,
            "ratio": params / dense,
            "energy": energy,
            "latency": latency,
            "edp": edp,
            "params_share": 1.0,
            "energy_share": 1.0,
            "latency_share": 1.0,
        }
    )
    return rows


def write_report(out: Path, rows: list[dict]) -> None:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


# -- orchestration -----------------------------------------------------------


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        raise StageError(name, str(exc)) from exc


def run_pipeline(config: PipelineConfig, through: str = "distill") -> SearchArtifacts:
    """Run the levels up to ``through`` (one of cost-table, shape, rank, distill).

    Artifacts are written into ``config.out_dir`` as each stage completes,
    so a failing stage leaves the earlier ones on disk.
    """
    order = ("cost-table", "shape", "rank", "distill")
    if through not in order:
        raise ValueError(f"unknown stage {through!r}")
    stop = order.index(through)
    out = Path(config.out_dir)
    h = config.config_hash()
    art = SearchArtifacts(h)
    write_json(out, "config.json", config.to_dict() | {"out_dir": None, "jobs": None})
    try:
        setup = build_teacher(config)
        shapes, tables = _stage("shape_search", shape_search, config, setup.teacher.layers, select=stop >= 1)
        art.cost_tables = tables
        write_json(out, "cost_table.json", _cost_table_payload(h, tables))
        if stop == 0:
            return art
        art.shapes = shapes
        write_json(out, "shape_table.json", {"config_hash": h, "sizes": shapes})
        if stop == 1:
            return art
        layers = build_supernet(config, setup.teacher.layers, shapes)
        dataset, forest, rho, history, genome = _stage("rank_search", rank_search, config, layers)
        art.dataset, art.forest, art.spearman, art.history, art.genome = dataset, forest, rho, history, genome
        write_json(
            out,
            "surrogate.json",
            {"config_hash": h, "spearman": rho, "dataset": dataset.to_dict(), "forest": forest.to_dict()},
        )
        write_json(out, "evolution.json", {"config_hash": h, "history": history})
        write_json(out, "genome.json", {"config_hash": h} | genome)
        write_report(out, report_breakdown(genome))
        if stop == 2:
            return art
        art.distill = _stage("distill", distill_stage, config, setup, genome)
        write_json(out, "distill.json", {"config_hash": h} | art.distill)
        return art
    finally:
        write_manifest(out, h)


def run_distill_only(config: PipelineConfig) -> dict:
    """Level 3 from the ``genome.json`` already present in ``config.out_dir``."""
    out = Path(config.out_dir)
    path = out / "genome.json"
    if not path.exists():
        raise StageError("distill", f"no genome.json in {out}; run rank-evolve first")
    genome = read_json(out, "genome.json")
    h = config.config_hash()
    if genome.get("config_hash") != h:
        raise StageError("distill", "genome.json was produced by a different config")
    setup = build_teacher(config)
    result = _stage("distill", distill_stage, config, setup, genome)
    write_json(out, "distill.json", {"config_hash": h} | result)
    write_manifest(out, h)
    return result


def report_from_dir(out: str | Path) -> list[dict]:
    out = Path(out)
    if not (out / "genome.json").exists():
        raise StageError("report", f"no artifacts in {out} (genome.json missing)")
    rows = report_breakdown(read_json(out, "genome.json"))
    write_report(out, rows)
    return rows
