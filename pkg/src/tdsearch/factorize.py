"""Tensorize weight matrices and factorize them in CP, Tucker or TTM format.

A :class:`TensorizationShape` splits the ``M x N`` matrix into row factors
``m_1..m_p`` and column factors ``n_1..n_q``.  Ranks are plain integer
tuples whose meaning depends on the format:

* CP: ``(r,)``
* Tucker: one rank per tensorized axis, ``(r_1, ..., r_{p+q})``
* TTM: bond ranks ``(r_0, ..., r_p)`` with ``r_0 = r_p = 1``
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .tensor import as_tensor, frobenius, relative_error, variance_match_scale


class Format(str, enum.Enum):
    CP = "cp"
    TUCKER = "tucker"
    TTM = "ttm"
    DENSE = "dense"


@dataclass(frozen=True, order=True)
class TensorizationShape:
    rows: tuple[int, ...]
    cols: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(int(m) for m in self.rows))
        object.__setattr__(self, "cols", tuple(int(n) for n in self.cols))
        if not self.rows or not self.cols:
            raise ValueError("row and column factor lists must be nonempty")
        if any(v < 1 for v in self.rows + self.cols):
            raise ValueError(f"factors must be positive: {self}")

    @property
    def M(self) -> int:
        return math.prod(self.rows)

    @property
    def N(self) -> int:
        return math.prod(self.cols)

    @property
    def order(self) -> int:
        return len(self.rows) + len(self.cols)

    @property
    def dims(self) -> tuple[int, ...]:
        return self.rows + self.cols

    def __str__(self) -> str:
        return f"({','.join(map(str, self.rows))}|{','.join(map(str, self.cols))})"

    @classmethod
    def parse(cls, text: str) -> "TensorizationShape":
        rows, _, cols = text.strip("() ").partition("|")
        return cls(tuple(int(v) for v in rows.split(",")), tuple(int(v) for v in cols.split(",")))

    def check_matrix(self, M: int, N: int) -> None:
        if self.M != M or self.N != N:
            raise ValueError(f"shape {self} does not tensorize a {M}x{N} matrix")


Ranks = tuple[int, ...]


@dataclass
class FactorizedLinear:
    """One weight matrix in factorized form.

    ``cores`` layout per format:

    * CP: ``[lam (r,), A_1 (d_1, r), ..., A_d (d_d, r)]`` over ``shape.dims``
    * Tucker: ``[core (r_1..r_d), U_1 (d_1, r_1), ..., U_d (d_d, r_d)]``
    * TTM: ``[G_1, ..., G_p]`` with ``G_k`` of shape ``(r_{k-1}, m_k, n_k, r_k)``
    * dense: ``[W]``

    ``scale`` multiplies the reconstructed matrix.
    """

    format: Format
    shape: TensorizationShape
    ranks: Ranks
    cores: list[np.ndarray]
    scale: float = 1.0
    info: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.format = Format(self.format)
        self.ranks = tuple(int(r) for r in self.ranks)
        check_core_shapes(self.format, self.shape, self.ranks, self.cores)

    @property
    def M(self) -> int:
        return self.shape.M

    @property
    def N(self) -> int:
        return self.shape.N

    @property
    def param_count(self) -> int:
        return param_count(self.format, self.shape, self.ranks)


def expected_core_shapes(fmt: Format, shape: TensorizationShape, ranks: Ranks) -> list[tuple[int, ...]]:
    fmt = Format(fmt)
    dims = shape.dims
    if fmt is Format.CP:
        (r,) = ranks
        return [(r,)] + [(d, r) for d in dims]
    if fmt is Format.TUCKER:
        return [tuple(ranks)] + [(d, r) for d, r in zip(dims, ranks)]
    if fmt is Format.TTM:
        return [(ranks[k], m, n, ranks[k + 1]) for k, (m, n) in enumerate(zip(shape.rows, shape.cols))]
    return [(shape.M, shape.N)]


def check_core_shapes(fmt, shape, ranks, cores) -> None:
    validate_ranks(fmt, shape, ranks)
    want = expected_core_shapes(fmt, shape, ranks)
    got = [tuple(np.shape(c)) for c in cores]
    if want != got:
        raise ValueError(f"{Format(fmt).value} cores have shapes {got}, expected {want}")


def ttm_max_bonds(shape: TensorizationShape) -> Ranks:
    """Largest bond ranks allowed by the sequential unfoldings."""
    fused = [m * n for m, n in zip(shape.rows, shape.cols)]
    p = len(fused)
    return tuple(
        min(math.prod(fused[:k]), math.prod(fused[k:])) for k in range(p + 1)
    )


def max_ranks(fmt: Format, shape: TensorizationShape) -> Ranks:
    fmt = Format(fmt)
    if fmt is Format.CP:
        dims = shape.dims
        return (math.prod(dims) // max(dims),)
    if fmt is Format.TUCKER:
        return shape.dims
    if fmt is Format.TTM:
        return ttm_max_bonds(shape)
    return ()


def validate_ranks(fmt: Format, shape: TensorizationShape, ranks: Sequence[int]) -> None:
    fmt = Format(fmt)
    ranks = tuple(ranks)
    if fmt is Format.DENSE:
        if ranks:
            raise ValueError("dense format takes no ranks")
        return
    if any(r < 1 for r in ranks):
        raise ValueError(f"ranks must be >= 1, got {ranks}")
    if fmt is Format.CP:
        if len(ranks) != 1:
            raise ValueError(f"CP takes a single rank, got {ranks}")
    elif fmt is Format.TUCKER:
        if len(ranks) != shape.order:
            raise ValueError(f"Tucker needs {shape.order} ranks, got {len(ranks)}")
        if any(r > d for r, d in zip(ranks, shape.dims)):
            raise ValueError(f"Tucker ranks {ranks} exceed axis extents {shape.dims}")
    else:
        if len(shape.rows) != len(shape.cols):
            raise ValueError("TTM needs equal numbers of row and column factors")
        if len(ranks) != len(shape.rows) + 1:
            raise ValueError(f"TTM needs {len(shape.rows) + 1} bond ranks, got {len(ranks)}")
        if ranks[0] != 1 or ranks[-1] != 1:
            raise ValueError("TTM boundary ranks must be 1")
        bound = ttm_max_bonds(shape)
        if any(r > b for r, b in zip(ranks, bound)):
            raise ValueError(f"TTM bond ranks {ranks} exceed unfolding limits {bound}")


def param_count(fmt: Format, shape: TensorizationShape, ranks: Ranks) -> int:
    fmt = Format(fmt)
    if fmt is Format.DENSE:
        return shape.M * shape.N
    return sum(math.prod(s) for s in expected_core_shapes(fmt, shape, ranks))


def compression_ratio(f: FactorizedLinear) -> float:
    return f.param_count / (f.M * f.N)


# -- tensorization -----------------------------------------------------------


def _interleave(p: int) -> list[int]:
    return [ax for k in range(p) for ax in (k, p + k)]


def tensorize(W: np.ndarray, shape: TensorizationShape, fmt: Format = Format.TUCKER) -> np.ndarray:
    """Reshape ``W`` into the higher-order tensor that ``fmt`` factorizes.

    TTM fuses each ``(m_k, n_k)`` pair into one axis; the other formats use
    the plain ``(m_1..m_p, n_1..n_q)`` reshape.
    """
    W = as_tensor(W)
    if W.ndim != 2:
        raise ValueError("expected a matrix")
    shape.check_matrix(*W.shape)
    X = W.reshape(shape.dims)
    if Format(fmt) is Format.TTM:
        p = len(shape.rows)
        if len(shape.cols) != p:
            raise ValueError("TTM needs equal numbers of row and column factors")
        X = np.transpose(X, _interleave(p)).reshape([m * n for m, n in zip(shape.rows, shape.cols)])
    return np.ascontiguousarray(X)


def detensorize(X: np.ndarray, shape: TensorizationShape, fmt: Format = Format.TUCKER) -> np.ndarray:
    X = as_tensor(X)
    if Format(fmt) is Format.TTM:
        p = len(shape.rows)
        pairs = [v for m, n in zip(shape.rows, shape.cols) for v in (m, n)]
        X = X.reshape(pairs)
        X = np.transpose(X, np.argsort(_interleave(p)))
    return np.ascontiguousarray(X.reshape(shape.M, shape.N))


# -- multilinear helpers -----------------------------------------------------


def unfold(X: np.ndarray, mode: int) -> np.ndarray:
    return np.moveaxis(X, mode, 0).reshape(X.shape[mode], -1)


def mode_product(X: np.ndarray, U: np.ndarray, mode: int) -> np.ndarray:
    """``X x_mode U``: contract axis ``mode`` of X with the columns of U."""
    Y = np.tensordot(U, X, axes=(1, mode))
    return np.moveaxis(Y, 0, mode)


def khatri_rao(mats: Sequence[np.ndarray]) -> np.ndarray:
    """Column-wise Kronecker product; the last matrix varies fastest."""
    out = mats[0]
    for m in mats[1:]:
        out = (out[:, None, :] * m[None, :, :]).reshape(-1, out.shape[1])
    return out


def _leading_left_vectors(A: np.ndarray, r: int) -> np.ndarray:
    U, _, _ = np.linalg.svd(A, full_matrices=False)
    if U.shape[1] < r:
        U = np.hstack([U, np.zeros((U.shape[0], r - U.shape[1]))])
    return U[:, :r]


# -- TTM ---------------------------------------------------------------------


def decompose_ttm(W: np.ndarray, shape: TensorizationShape, ranks: Sequence[int]) -> FactorizedLinear:
    """TT-SVD of the pair-fused tensorization with the requested bond ranks."""
    ranks = tuple(int(r) for r in ranks)
    validate_ranks(Format.TTM, shape, ranks)
    X = tensorize(W, shape, Format.TTM)
    p = len(shape.rows)
    if not np.any(X):
        cores = [np.zeros(s) for s in expected_core_shapes(Format.TTM, shape, ranks)]
        return FactorizedLinear(Format.TTM, shape, ranks, cores)
    fused = X.shape
    cores = []
    rest = X.reshape(1, -1)
    for k in range(p - 1):
        mat = rest.reshape(ranks[k] * fused[k], -1)
        U, S, Vt = np.linalg.svd(mat, full_matrices=False)
        r = ranks[k + 1]
        keep = min(r, U.shape[1])
        Uk = np.zeros((mat.shape[0], r))
        Uk[:, :keep] = U[:, :keep]
        rest_k = np.zeros((r, mat.shape[1]))
        rest_k[:keep] = S[:keep, None] * Vt[:keep]
        cores.append(Uk.reshape(ranks[k], shape.rows[k], shape.cols[k], r))
        rest = rest_k
    cores.append(rest.reshape(ranks[p - 1], shape.rows[-1], shape.cols[-1], 1))
    return FactorizedLinear(Format.TTM, shape, ranks, cores)


# -- Tucker ------------------------------------------------------------------


def _tucker_core(X, factors):
    core = X
    for k, U in enumerate(factors):
        core = mode_product(core, U.T, k)
    return core


def _tucker_full(core, factors):
    X = core
    for k, U in enumerate(factors):
        X = mode_product(X, U, k)
    return X


def decompose_tucker(
    W: np.ndarray, shape: TensorizationShape, ranks: Sequence[int], hooi_sweeps: int = 3
) -> FactorizedLinear:
    """Truncated HOSVD followed by ``hooi_sweeps`` rounds of HOOI.

    After HOOI the core is rotated to be all-orthogonal so that factor
    columns stay ordered by mode energy; rank slicing relies on this.
    ``info["errors"]`` records the relative error after HOSVD and after
    each sweep.
    """
    ranks = tuple(int(r) for r in ranks)
    validate_ranks(Format.TUCKER, shape, ranks)
    X = tensorize(W, shape, Format.TUCKER)
    norm = frobenius(X)
    if norm == 0.0:
        cores = [np.zeros(s) for s in expected_core_shapes(Format.TUCKER, shape, ranks)]
        return FactorizedLinear(Format.TUCKER, shape, ranks, cores, info={"errors": [0.0]})

    def err(core):
        # orthonormal factors: ||X - X'||^2 = ||X||^2 - ||core||^2
        return math.sqrt(max(norm**2 - frobenius(core) ** 2, 0.0)) / norm

    factors = [_leading_left_vectors(unfold(X, k), r) for k, r in enumerate(ranks)]
    core = _tucker_core(X, factors)
    errors = [err(core)]
    for _ in range(hooi_sweeps):
        for k, r in enumerate(ranks):
            Y = X
            for j, U in enumerate(factors):
                if j != k:
                    Y = mode_product(Y, U.T, j)
            factors[k] = _leading_left_vectors(unfold(Y, k), r)
        core = _tucker_core(X, factors)
        errors.append(err(core))
    if hooi_sweeps:
        for k in range(len(ranks)):
            Q = _leading_left_vectors(unfold(core, k), ranks[k])
            core = mode_product(core, Q.T, k)
            factors[k] = factors[k] @ Q
    return FactorizedLinear(Format.TUCKER, shape, ranks, [core] + factors, info={"errors": errors})


# -- CP ----------------------------------------------------------------------


def _cp_full(lam, factors):
    lead = factors[0] * lam
    rest = khatri_rao(factors[1:]) if len(factors) > 1 else np.ones((1, lam.size))
    return (lead @ rest.T).reshape([f.shape[0] for f in factors])


_LSTSQ_BUDGET = 2e7


def _als_update(unfolded: np.ndarray, others: list[np.ndarray], r: int) -> np.ndarray:
    """Least-squares solve of ``unfolded ~= A @ khatri_rao(others).T`` for ``A``.

    Small problems go through an SVD-based solve of the Khatri-Rao system,
    which keeps full-rank fits exact; large ones use the Hadamard product
    of Gram matrices so the Khatri-Rao rows are never factorized.
    """
    kr = khatri_rao(others)
    if kr.shape[0] * r * r <= _LSTSQ_BUDGET:
        return np.linalg.lstsq(kr, unfolded.T, rcond=None)[0].T
    gram = np.ones((r, r))
    for A in others:
        gram *= A.T @ A
    return unfolded @ kr @ np.linalg.pinv(gram)


def decompose_cp(
    W: np.ndarray,
    shape: TensorizationShape,
    rank: int | Sequence[int],
    als_iters: int = 50,
    seed: int | np.random.Generator = 0,
    tol: float = 1e-7,
) -> FactorizedLinear:
    """CP by alternating least squares from a seeded Gaussian start.

    Factor columns are normalized into the weight vector after every mode
    update.  Iteration stops after ``als_iters`` sweeps or when a sweep
    improves the relative error by less than ``tol``.  Components are
    returned sorted by ``|lambda|`` descending; ``info["errors"]`` holds
    the error after each sweep.
    """
    r = int(rank if np.isscalar(rank) else tuple(rank)[0])
    validate_ranks(Format.CP, shape, (r,))
    X = tensorize(W, shape, Format.CP)
    dims = X.shape
    norm = frobenius(X)
    if norm == 0.0:
        cores = [np.zeros(s) for s in expected_core_shapes(Format.CP, shape, (r,))]
        return FactorizedLinear(Format.CP, shape, (r,), cores, info={"errors": [0.0]})
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    factors = [rng.standard_normal((d, r)) for d in dims]
    lam = np.ones(r)
    for k, A in enumerate(factors):
        n = np.linalg.norm(A, axis=0)
        factors[k] = A / n
    unfolded = [unfold(X, k) for k in range(len(dims))]
    errors: list[float] = []
    for _ in range(als_iters):
        for k in range(len(dims)):
            others = [factors[j] for j in range(len(dims)) if j != k]
            A = _als_update(unfolded[k], others, r)
            n = np.linalg.norm(A, axis=0)
            safe = np.where(n > 0, n, 1.0)
            factors[k] = A / safe
            lam = n
        errors.append(relative_error(X, _cp_full(lam, factors)))
        if len(errors) > 1 and errors[-2] - errors[-1] < tol:
            break
    order = np.argsort(-np.abs(lam), kind="stable")
    cores = [lam[order].copy()] + [np.ascontiguousarray(A[:, order]) for A in factors]
    return FactorizedLinear(Format.CP, shape, (r,), cores, info={"errors": errors})


# -- reconstruction and projection -------------------------------------------


def reconstruct_tensor(f: FactorizedLinear) -> np.ndarray:
    """Tensorized form of ``f`` (unscaled)."""
    if f.format is Format.CP:
        return _cp_full(f.cores[0], f.cores[1:])
    if f.format is Format.TUCKER:
        return _tucker_full(f.cores[0], f.cores[1:])
    if f.format is Format.TTM:
        out = np.ones((1, 1))
        for G in f.cores:
            r0, m, n, r1 = G.shape
            out = out @ G.reshape(r0, m * n * r1)
            out = out.reshape(-1, r1)
        return out.reshape([m * n for m, n in zip(f.shape.rows, f.shape.cols)])
    return f.cores[0]


def reconstruct(f: FactorizedLinear) -> np.ndarray:
    X = reconstruct_tensor(f)
    W = detensorize(X, f.shape, f.format) if f.format is not Format.DENSE else as_tensor(X)
    return W * f.scale


def decompose(
    W: np.ndarray,
    fmt: Format,
    shape: TensorizationShape,
    ranks: Sequence[int],
    *,
    seed: int | np.random.Generator = 0,
    hooi_sweeps: int = 3,
    als_iters: int = 50,
) -> FactorizedLinear:
    fmt = Format(fmt)
    if fmt is Format.CP:
        return decompose_cp(W, shape, ranks, als_iters=als_iters, seed=seed)
    if fmt is Format.TUCKER:
        return decompose_tucker(W, shape, ranks, hooi_sweeps=hooi_sweeps)
    if fmt is Format.TTM:
        return decompose_ttm(W, shape, ranks)
    W = as_tensor(W)
    shape.check_matrix(*W.shape)
    return FactorizedLinear(Format.DENSE, shape, (), [W.copy()])


def project(
    W: np.ndarray,
    fmt: Format,
    shape: TensorizationShape,
    ranks: Sequence[int],
    *,
    variance_match: bool = False,
    seed: int | np.random.Generator = 0,
    hooi_sweeps: int = 3,
    als_iters: int = 50,
) -> tuple[FactorizedLinear, float]:
    """Best-effort Frobenius projection of ``W`` onto a factorized format.

    Returns the factorization and its relative error.  With
    ``variance_match`` the factorization's ``scale`` is set so the
    reconstruction has the same variance as ``W``.
    """
    W = as_tensor(W)
    f = decompose(W, fmt, shape, ranks, seed=seed, hooi_sweeps=hooi_sweeps, als_iters=als_iters)
    if not np.any(W):
        return f, 0.0
    approx = reconstruct(f)
    if variance_match and np.var(approx) > 0 and np.var(W) > 0:
        approx, factor = variance_match_scale(W, approx)
        f = replace(f, scale=f.scale * factor)
    return f, relative_error(W, approx)
