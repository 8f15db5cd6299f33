"""Two-stage distillation of factorized toy networks.

Networks are small tanh MLPs with a dense classifier head.  Hidden layers
are dense matrices or :class:`FactorizedLinear` layers evaluated through
their contraction plan, with gradients obtained by contracting the
upstream gradient against every other operand of the layer's einsum.
"""
from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional, Sequence, Union

import numpy as np

from .contraction import ContractionPlan, build_einsum, execute_plan, optimal_path
from .factorize import FactorizedLinear, Format, TensorizationShape, project
from .tensor import EinsumSpec, as_tensor

Layer = Union[np.ndarray, FactorizedLinear]


class TrainingDiverged(RuntimeError):
    pass


class ZeroNormRowWarning(UserWarning):
    pass


# -- losses ------------------------------------------------------------------


def cos_embed_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of ``1 - cos(a_i, b_i)`` and its gradient w.r.t. ``a``.

    A row where either side has zero norm contributes 1 and no gradient.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a2 = a.reshape(a.shape[0], -1) if a.ndim > 1 else a[None, :]
    b2 = b.reshape(a2.shape)
    na = np.linalg.norm(a2, axis=1)
    nb = np.linalg.norm(b2, axis=1)
    ok = (na > 0) & (nb > 0)
    if not ok.all():
        warnings.warn(f"{int((~ok).sum())} zero-norm rows in cosine loss", ZeroNormRowWarning, stacklevel=2)
    rows = len(a2)
    cos = np.zeros(rows)
    grad = np.zeros_like(a2)
    sa, sb = na[ok], nb[ok]
    dot = np.sum(a2[ok] * b2[ok], axis=1)
    cos[ok] = dot / (sa * sb)
    grad[ok] = -(b2[ok] / (sa * sb)[:, None] - (dot / (sa**3 * sb))[:, None] * a2[ok]) / rows
    return float(np.mean(1.0 - cos)), grad.reshape(a.shape)


def cos_embed_loss(a: np.ndarray, b: np.ndarray) -> float:
    return cos_embed_grad(a, b)[0]


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.atleast_2d(z)
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def logit_terms(y_s: np.ndarray, y_t: np.ndarray, tau: float) -> tuple[float, float]:
    """Batch-mean ``KL(softmax(y_t/tau) || softmax(y_s/tau))`` and ``CE(softmax(y_s), argmax y_t)``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    y_s, y_t = np.atleast_2d(as_tensor(y_s)), np.atleast_2d(as_tensor(y_t))
    if y_s.shape != y_t.shape:
        raise ValueError("student and teacher logits differ in shape")
    log_pt = _log_softmax(y_t / tau)
    log_ps = _log_softmax(y_s / tau)
    kl = float(np.mean(np.sum(np.exp(log_pt) * (log_pt - log_ps), axis=1)))
    labels = np.argmax(y_t, axis=1)
    ce = float(np.mean(-_log_softmax(y_s)[np.arange(len(labels)), labels]))
    return kl, ce


def logit_loss_grad(y_s: np.ndarray, y_t: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """``0.5 * KL + 0.5 * CE`` averaged over the batch, and its gradient w.r.t. ``y_s``."""
    kl, ce = logit_terms(y_s, y_t, tau)
    y_s, y_t = np.atleast_2d(as_tensor(y_s)), np.atleast_2d(as_tensor(y_t))
    n = len(y_s)
    onehot = np.eye(y_s.shape[1])[np.argmax(y_t, axis=1)]
    grad = 0.5 * (softmax(y_s / tau) - softmax(y_t / tau)) / tau + 0.5 * (softmax(y_s) - onehot)
    return 0.5 * kl + 0.5 * ce, grad / n


def logit_loss(y_s: np.ndarray, y_t: np.ndarray, tau: float) -> float:
    return logit_loss_grad(y_s, y_t, tau)[0]


def cross_entropy_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    logits = np.atleast_2d(as_tensor(logits))
    labels = np.asarray(labels)
    n = len(labels)
    loss = float(np.mean(-_log_softmax(logits)[np.arange(n), labels]))
    onehot = np.eye(logits.shape[1])[labels]
    return loss, (softmax(logits) - onehot) / n


# -- factorized layers -------------------------------------------------------


@lru_cache(maxsize=512)
def _cached_plan(inputs: tuple[str, ...], output: str, extents: tuple) -> ContractionPlan:
    return optimal_path(EinsumSpec(inputs, output, dict(extents)))


def _plan_for(spec: EinsumSpec) -> ContractionPlan:
    return _cached_plan(spec.inputs, spec.output, tuple(sorted(spec.extents.items())))


def _operand_cores(f: FactorizedLinear) -> list[tuple[int, float]]:
    """For each weight operand of :func:`build_einsum`: (core index, scale folded into it)."""
    p, q = len(f.shape.rows), len(f.shape.cols)
    s = f.scale
    if f.format is Format.CP:
        return [(0, s)] + [(1 + p + j, 1.0) for j in range(q)] + [(1 + k, 1.0) for k in range(p)]
    if f.format is Format.TUCKER:
        return [(1 + k, 1.0) for k in range(p)] + [(0, s)] + [(1 + p + j, 1.0) for j in range(q)]
    if f.format is Format.TTM:
        return [(k, s if k == p - 1 else 1.0) for k in range(p)]
    return [(0, s)]


def _input_view(f: FactorizedLinear, x: np.ndarray) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != f.M:
        raise ValueError(f"input of shape {x.shape} does not match a layer with {f.M} rows")
    if f.format is Format.DENSE:
        return x
    return x.reshape((x.shape[0],) + f.shape.rows)


def layer_forward(f: Layer, x: np.ndarray) -> np.ndarray:
    """``x @ W'`` evaluated on the layer's MAC-optimal contraction path."""
    if isinstance(f, np.ndarray):
        return as_tensor(x) @ f
    xs = _input_view(f, x)
    spec, ops = build_einsum(f, xs.shape[0])
    y = execute_plan(_plan_for(spec), [xs] + ops[1:])
    return y.reshape(xs.shape[0], f.N)


def _operand_grad(spec: EinsumSpec, k: int, grad_out: np.ndarray, ops: Sequence[np.ndarray]) -> np.ndarray:
    target = spec.inputs[k]
    others = [spec.inputs[j] for j in range(len(ops)) if j != k]
    present = set(spec.output).union(*others)
    kept = "".join(c for c in target if c in present)
    sub = EinsumSpec((spec.output,) + tuple(others), kept, spec.extents)
    g = execute_plan(_plan_for(sub), [grad_out] + [ops[j] for j in range(len(ops)) if j != k])
    if kept != target:
        view = [spec.extents[c] if c in kept else 1 for c in target]
        g = np.broadcast_to(g.reshape(view), spec.shape_of(target)).copy()
    return g


def layer_backward(f: Layer, x: np.ndarray, upstream_grad: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    """Gradients w.r.t. each stored core (in ``f.cores`` order) and w.r.t. ``x``."""
    g = as_tensor(upstream_grad)
    if isinstance(f, np.ndarray):
        x = as_tensor(x)
        return [x.T @ g], g @ f.T
    xs = _input_view(f, x)
    batch = xs.shape[0]
    if g.shape != (batch, f.N):
        raise ValueError(f"upstream gradient of shape {g.shape}, expected {(batch, f.N)}")
    spec, ops = build_einsum(f, batch)
    ops = [xs] + ops[1:]
    g_out = g.reshape(spec.shape_of(spec.output))
    core_grads: list[Optional[np.ndarray]] = [None] * len(f.cores)
    for k, (core_idx, factor) in enumerate(_operand_cores(f), start=1):
        grad = _operand_grad(spec, k, g_out, ops) * factor
        core_grads[core_idx] = grad.reshape(f.cores[core_idx].shape)
    grad_x = _operand_grad(spec, 0, g_out, ops).reshape(batch, f.M)
    return core_grads, grad_x


# -- toy networks ------------------------------------------------------------


@dataclass
class ToyNet:
    layers: list[Layer]
    head: np.ndarray

    def copy(self) -> "ToyNet":
        return copy.deepcopy(self)

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [(l.shape if isinstance(l, np.ndarray) else (l.M, l.N)) for l in self.layers]


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    logits: Optional[np.ndarray] = None


def forward(net: ToyNet, x: np.ndarray) -> ForwardCache:
    cache = ForwardCache()
    h = as_tensor(x)
    for layer in net.layers:
        cache.inputs.append(h)
        z = layer_forward(layer, h)
        h = np.tanh(z)
        cache.pre.append(z)
        cache.post.append(h)
    cache.logits = h @ net.head
    return cache


def backward(
    net: ToyNet,
    cache: ForwardCache,
    grad_logits: Optional[np.ndarray] = None,
    grad_pre: Optional[Sequence[Optional[np.ndarray]]] = None,
    grad_post: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> tuple[list[list[np.ndarray]], np.ndarray]:
    """Backpropagate loss gradients given on logits and/or hidden activations."""
    L = len(net.layers)
    grad_pre = list(grad_pre) if grad_pre is not None else [None] * L
    grad_post = list(grad_post) if grad_post is not None else [None] * L
    h_last = cache.post[-1]
    if grad_logits is not None:
        head_grad = h_last.T @ grad_logits
        g_h = grad_logits @ net.head.T
    else:
        head_grad = np.zeros_like(net.head)
        g_h = np.zeros_like(h_last)
    layer_grads: list[list[np.ndarray]] = [[] for _ in range(L)]
    for i in reversed(range(L)):
        if grad_post[i] is not None:
            g_h = g_h + grad_post[i]
        g_z = g_h * (1.0 - cache.post[i] ** 2)
        if grad_pre[i] is not None:
            g_z = g_z + grad_pre[i]
        layer_grads[i], g_h = layer_backward(net.layers[i], cache.inputs[i], g_z)
    return layer_grads, head_grad


def apply_update(net: ToyNet, layer_grads, head_grad, lr: float, train_head: bool = True) -> None:
    for i, (layer, grads) in enumerate(zip(net.layers, layer_grads)):
        if isinstance(layer, np.ndarray):
            net.layers[i] = layer - lr * grads[0]
        else:
            layer.cores = [c - lr * g for c, g in zip(layer.cores, grads)]
    if train_head:
        net.head = net.head - lr * head_grad


def accuracy(net: ToyNet, x: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(forward(net, x).logits, axis=1) == np.asarray(labels)))


def factorize_net(
    teacher: ToyNet,
    fmt: Format,
    shapes: Sequence[TensorizationShape],
    ranks: Sequence[Sequence[int]],
    seed: int = 0,
) -> ToyNet:
    """Student initialized by optimal layer-wise projection of the teacher's hidden layers."""
    layers = []
    for k, (W, s, r) in enumerate(zip(teacher.layers, shapes, ranks)):
        if not isinstance(W, np.ndarray):
            raise ValueError("teacher layers must be dense")
        f, _ = project(W, fmt, s, r, seed=np.random.default_rng([seed, k]))
        layers.append(f)
    return ToyNet(layers, teacher.head.copy())


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class DistillConfig:
    stage1_epochs: int = 8
    stage2_epochs: int = 8
    temperature: float = 2.0
    learning_rate: float = 0.1
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("batch size and learning rate must be positive")


RECIPES = ("two_stage", "logit_only", "finetune")


def _layerwise_loss(student_cache: ForwardCache, teacher_cache: ForwardCache):
    loss = 0.0
    g_pre, g_post = [], []
    for zs, zt, hs, ht in zip(student_cache.pre, teacher_cache.pre, student_cache.post, teacher_cache.post):
        lz, gz = cos_embed_grad(zs, zt)
        lh, gh = cos_embed_grad(hs, ht)
        loss += lz + lh
        g_pre.append(gz)
        g_post.append(gh)
    return loss, g_pre, g_post


def _stage_loss(stage: str, student: ToyNet, teacher_cache: ForwardCache, xb, yb, tau):
    cache = forward(student, xb)
    if stage == "layerwise":
        loss, g_pre, g_post = _layerwise_loss(cache, teacher_cache)
        return loss, cache, dict(grad_pre=g_pre, grad_post=g_post)
    if stage == "logit":
        loss, g = logit_loss_grad(cache.logits, teacher_cache.logits, tau)
    else:
        loss, g = cross_entropy_grad(cache.logits, yb)
    return loss, cache, dict(grad_logits=g)


def train_student(
    teacher: ToyNet,
    student: ToyNet,
    x: np.ndarray,
    labels: np.ndarray,
    config: DistillConfig,
    recipe: str = "two_stage",
) -> tuple[ToyNet, list[dict]]:
    """Train a copy of ``student`` with one of the recipes in :data:`RECIPES`.

    * ``two_stage``: layer-wise cosine alignment, then logit distillation
    * ``logit_only``: the second stage alone (``stage2_epochs`` epochs)
    * ``finetune``: cross-entropy on the ground-truth labels for
      ``stage1_epochs + stage2_epochs`` epochs, no teacher

    Curves hold one record per epoch plus an epoch-0 record per stage with
    the starting loss.
    """
    if recipe not in RECIPES:
        raise ValueError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")
    if teacher.dims != student.dims or teacher.head.shape != student.head.shape:
        raise ValueError("teacher and student topologies differ")
    total = config.stage1_epochs + config.stage2_epochs
    if recipe == "two_stage":
        stages = [("layerwise", config.stage1_epochs), ("logit", config.stage2_epochs)]
    elif recipe == "logit_only":
        stages = [("logit", config.stage2_epochs)]
    else:
        stages = [("ce", total)]
    student = student.copy()
    x = as_tensor(x)
    labels = np.asarray(labels)
    teacher_full = forward(teacher, x)
    rng = np.random.default_rng(config.seed)
    curves = []
    for stage, epochs in stages:
        if epochs == 0:
            continue
        loss0, _, _ = _stage_loss(stage, student, teacher_full, x, labels, config.temperature)
        curves.append({"stage": stage, "epoch": 0, "loss": loss0})
        for epoch in range(1, epochs + 1):
            order = rng.permutation(len(x))
            for start in range(0, len(x), config.batch_size):
                idx = order[start : start + config.batch_size]
                t_cache = ForwardCache(
                    pre=[z[idx] for z in teacher_full.pre],
                    post=[h[idx] for h in teacher_full.post],
                    logits=teacher_full.logits[idx],
                )
                loss, cache, grads = _stage_loss(stage, student, t_cache, x[idx], labels[idx], config.temperature)
                if not np.isfinite(loss):
                    raise TrainingDiverged(f"{recipe}/{stage}: loss became {loss} in epoch {epoch}")
                layer_grads, head_grad = backward(student, cache, **grads)
                apply_update(student, layer_grads, head_grad, config.learning_rate, train_head=stage != "layerwise")
            loss, _, _ = _stage_loss(stage, student, teacher_full, x, labels, config.temperature)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"{recipe}/{stage}: loss became {loss} in epoch {epoch}")
            curves.append({"stage": stage, "epoch": epoch, "loss": loss})
    return student, curves


def train_two_stage(teacher: ToyNet, student: ToyNet, x, labels, config: DistillConfig):
    return train_student(teacher, student, x, labels, config, "two_stage")


# -- synthetic task ----------------------------------------------------------


@dataclass
class GaussianTask:
    means: np.ndarray
    noise: float

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        k, dim = self.means.shape
        labels = rng.integers(0, k, size=n)
        x = self.means[labels] + self.noise * rng.standard_normal((n, dim))
        return x, labels


def make_gaussian_task(dim: int, classes: int = 4, separation: float = 1.0, noise: float = 1.0, seed: int = 0) -> GaussianTask:
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dim))
    means *= separation / np.linalg.norm(means, axis=1, keepdims=True)
    return GaussianTask(means, noise)


def init_teacher(dims: Sequence[tuple[int, int]], classes: int, rng: np.random.Generator) -> ToyNet:
    layers = [rng.standard_normal((m, n)) / np.sqrt(m) for m, n in dims]
    head = rng.standard_normal((dims[-1][1], classes)) / np.sqrt(dims[-1][1])
    return ToyNet(layers, head)


def train_teacher(
    net: ToyNet, x: np.ndarray, labels: np.ndarray, epochs: int, lr: float, batch_size: int, seed: int
) -> ToyNet:
    net = net.copy()
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), batch_size):
            idx = order[start : start + batch_size]
            cache = forward(net, x[idx])
            _, g = cross_entropy_grad(cache.logits, labels[idx])
            layer_grads, head_grad = backward(net, cache, grad_logits=g)
            apply_update(net, layer_grads, head_grad, lr)
    return net


@dataclass(frozen=True)
class ToyTaskConfig:
    """Synthetic classification task used to train a teacher and distill students.

    The teacher sees ``teacher_samples`` labelled points; students are
    trained on a smaller transfer set and scored on a separate holdout.
    """

    classes: int = 4
    separation: float = 3.0
    noise: float = 1.0
    teacher_samples: int = 4000
    teacher_epochs: int = 10
    teacher_lr: float = 0.1
    transfer_samples: int = 512
    holdout_samples: int = 4000

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        for name in ("teacher_samples", "transfer_samples", "holdout_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class ToySetup:
    teacher: ToyNet
    transfer: tuple[np.ndarray, np.ndarray]
    holdout: tuple[np.ndarray, np.ndarray]


def prepare_toy(
    dims: Sequence[tuple[int, int]],
    task_config: ToyTaskConfig,
    seed: int,
    init_layers: Optional[Sequence[np.ndarray]] = None,
) -> ToySetup:
    """Train a dense teacher on the Gaussian-cluster task and draw transfer/holdout sets."""
    for (m1, n1), (m2, _) in zip(dims, dims[1:]):
        if n1 != m2:
            raise ValueError(f"layer dimensions {dims} do not chain")
    task = make_gaussian_task(dims[0][0], task_config.classes, task_config.separation, task_config.noise, seed)
    rng = np.random.default_rng([seed, 1])
    net = init_teacher(dims, task_config.classes, rng)
    if init_layers is not None:
        if [tuple(W.shape) for W in init_layers] != [tuple(d) for d in dims]:
            raise ValueError("initial weights do not match the layer dimensions")
        net.layers = [as_tensor(W).copy() for W in init_layers]
    x, y = task.sample(task_config.teacher_samples, rng)
    teacher = train_teacher(net, x, y, task_config.teacher_epochs, task_config.teacher_lr, 32, seed)
    return ToySetup(teacher, task.sample(task_config.transfer_samples, rng), task.sample(task_config.holdout_samples, rng))


def compare_recipes(
    setup: ToySetup, student: ToyNet, config: DistillConfig, recipes: Sequence[str] = RECIPES
) -> dict[str, dict]:
    """Holdout accuracy and loss curves of each recipe from the same projected student."""
    xh, yh = setup.holdout
    out = {"projection": {"accuracy": accuracy(student, xh, yh), "curves": []}}
    for recipe in recipes:
        trained, curves = train_student(setup.teacher, student, *setup.transfer, config, recipe)
        out[recipe] = {"accuracy": accuracy(trained, xh, yh), "curves": curves}
    return out
