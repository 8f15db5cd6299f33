"""Dense tensor helpers and a brute-force einsum reference.

Tensors are plain ``numpy.ndarray`` objects with dtype float64.  Every
function here returns a fresh C-contiguous array and never mutates its
inputs.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np


class DegenerateVarianceWarning(UserWarning):
    """Raised when variance matching is skipped for a constant tensor."""


def _contiguous(a: np.ndarray) -> np.ndarray:
    # np.ascontiguousarray would promote order-0 tensors to shape (1,)
    return np.require(a, requirements="C")


def as_tensor(data) -> np.ndarray:
    return _contiguous(np.asarray(data, dtype=np.float64))


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    new_shape = tuple(int(s) for s in new_shape)
    if any(s <= 0 for s in new_shape):
        raise ValueError(f"extents must be positive, got {new_shape}")
    if math.prod(new_shape) != t.size:
        raise ValueError(f"cannot reshape {t.shape} ({t.size} entries) to {new_shape}")
    return as_tensor(t).reshape(new_shape).copy()


def permute(t: np.ndarray, axis_order: Sequence[int]) -> np.ndarray:
    axis_order = tuple(int(a) for a in axis_order)
    if sorted(axis_order) != list(range(t.ndim)):
        raise ValueError(f"{axis_order} is not a permutation of 0..{t.ndim - 1}")
    return _contiguous(np.transpose(as_tensor(t), axis_order))


@dataclass(frozen=True)
class EinsumSpec:
    """A symbolic einsum equation with the extent of every index letter."""

    inputs: tuple[str, ...]
    output: str
    extents: Mapping[str, int] = field(hash=False)

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "extents", dict(self.extents))
        seen = set()
        for subs in self.inputs:
            if len(set(subs)) != len(subs):
                raise ValueError(f"repeated index within one operand: {subs!r}")
            seen.update(subs)
        if len(set(self.output)) != len(self.output):
            raise ValueError(f"repeated index in output: {self.output!r}")
        missing = set(self.output) - seen
        if missing:
            raise ValueError(f"output letters {sorted(missing)} appear in no input")
        for letter in seen:
            if letter not in self.extents:
                raise ValueError(f"no extent for index {letter!r}")
            if self.extents[letter] < 1:
                raise ValueError(f"extent of {letter!r} must be positive")

    @classmethod
    def from_shapes(cls, equation: str, shapes: Sequence[Sequence[int]]) -> "EinsumSpec":
        """Parse ``"ij,jk->ik"`` and infer extents from operand shapes."""
        lhs, _, rhs = equation.replace(" ", "").partition("->")
        inputs = lhs.split(",")
        if len(inputs) != len(shapes):
            raise ValueError(f"{len(inputs)} subscripts but {len(shapes)} operands")
        extents: dict[str, int] = {}
        for subs, shape in zip(inputs, shapes):
            if len(subs) != len(shape):
                raise ValueError(f"subscript {subs!r} does not match shape {tuple(shape)}")
            for letter, ext in zip(subs, shape):
                if extents.setdefault(letter, int(ext)) != int(ext):
                    raise ValueError(
                        f"index {letter!r} has conflicting extents {extents[letter]} and {ext}"
                    )
        return cls(tuple(inputs), rhs, extents)

    @property
    def equation(self) -> str:
        return ",".join(self.inputs) + "->" + self.output

    @property
    def letters(self) -> str:
        """All distinct letters, in order of first appearance."""
        return "".join(dict.fromkeys("".join(self.inputs) + self.output))

    def shape_of(self, subs: str) -> tuple[int, ...]:
        return tuple(self.extents[c] for c in subs)

    def check_operands(self, operands: Sequence[np.ndarray]) -> None:
        if len(operands) != len(self.inputs):
            raise ValueError(f"expected {len(self.inputs)} operands, got {len(operands)}")
        for subs, op in zip(self.inputs, operands):
            if tuple(np.shape(op)) != self.shape_of(subs):
                raise ValueError(
                    f"operand of shape {np.shape(op)} does not match {subs!r} {self.shape_of(subs)}"
                )


def einsum_naive(spec: EinsumSpec, operands: Sequence[np.ndarray]) -> np.ndarray:
    """Evaluate ``spec`` by summing the full product over every index value.

    Each operand is laid out on the joint grid of all index letters, the
    grids are multiplied elementwise and the non-output axes are summed.
    This touches ``prod(all extents)`` terms and is meant as a reference,
    not for production sizes.
    """
    spec.check_operands(operands)
    letters = spec.letters
    grid_shape = spec.shape_of(letters)
    total = np.ones(grid_shape)
    for subs, op in zip(spec.inputs, operands):
        order = sorted(range(len(subs)), key=lambda k: letters.index(subs[k]))
        aligned = np.transpose(as_tensor(op), order)
        view_shape = [spec.extents[c] if c in subs else 1 for c in letters]
        total = total * aligned.reshape(view_shape)
    summed = tuple(k for k, c in enumerate(letters) if c not in spec.output)
    reduced = total.sum(axis=summed) if summed else total
    kept = [c for c in letters if c in spec.output]
    return _contiguous(np.transpose(reduced, [kept.index(c) for c in spec.output]))


def contract_pair(a: np.ndarray, a_subs: str, b: np.ndarray, b_subs: str, out_subs: str) -> np.ndarray:
    """Contract two tensors as a batched matrix product.

    Letters are classified as batch (in both inputs and the output),
    contracted (in both inputs, not the output) or free (one input and the
    output).  Letters found in one input only and absent from the output
    are summed out before the product.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != len(a_subs) or b.ndim != len(b_subs):
        raise ValueError("subscripts do not match operand orders")
    for c in set(a_subs) & set(b_subs):
        if a.shape[a_subs.index(c)] != b.shape[b_subs.index(c)]:
            raise ValueError(f"index {c!r} has conflicting extents")
    if set(out_subs) - set(a_subs) - set(b_subs):
        raise ValueError(f"output {out_subs!r} has letters absent from both inputs")
    if len(set(out_subs)) != len(out_subs):
        raise ValueError(f"repeated index in output: {out_subs!r}")

    a, a_subs = _sum_private(a, a_subs, b_subs, out_subs)
    b, b_subs = _sum_private(b, b_subs, a_subs, out_subs)

    batch = [c for c in a_subs if c in b_subs and c in out_subs]
    summed = [c for c in a_subs if c in b_subs and c not in out_subs]
    a_free = [c for c in a_subs if c not in b_subs]
    b_free = [c for c in b_subs if c not in a_subs]
    ext = {c: a.shape[k] for k, c in enumerate(a_subs)}
    ext.update({c: b.shape[k] for k, c in enumerate(b_subs)})

    def size(letters):
        return math.prod(ext[c] for c in letters)

    a_mat = np.transpose(a, [a_subs.index(c) for c in batch + a_free + summed]).reshape(
        size(batch), size(a_free), size(summed)
    )
    b_mat = np.transpose(b, [b_subs.index(c) for c in batch + summed + b_free]).reshape(
        size(batch), size(summed), size(b_free)
    )
    prod = np.matmul(a_mat, b_mat)
    res_subs = batch + a_free + b_free
    prod = prod.reshape([ext[c] for c in res_subs])
    return _contiguous(np.transpose(prod, [res_subs.index(c) for c in out_subs]))


def _sum_private(t: np.ndarray, subs: str, other: str, out_subs: str):
    private = tuple(k for k, c in enumerate(subs) if c not in other and c not in out_subs)
    if not private:
        return t, subs
    return t.sum(axis=private), "".join(c for k, c in enumerate(subs) if k not in private)


def frobenius(t: np.ndarray) -> float:
    return float(np.sqrt(np.sum(np.square(t))))


def relative_error(w: np.ndarray, w_approx: np.ndarray) -> float:
    """Relative Frobenius error ``||W - W'|| / ||W||``."""
    w, w_approx = as_tensor(w), as_tensor(w_approx)
    if w.shape != w_approx.shape:
        raise ValueError(f"shape mismatch {w.shape} vs {w_approx.shape}")
    norm = frobenius(w)
    if norm == 0.0:
        raise ValueError("relative error is undefined for an all-zero reference")
    return frobenius(w - w_approx) / norm


def variance_match_scale(w: np.ndarray, w_approx: np.ndarray) -> tuple[np.ndarray, float]:
    """Rescale ``w_approx`` so its population variance equals that of ``w``.

    When either tensor is constant the approximation is returned unscaled
    with factor 1 and a :class:`DegenerateVarianceWarning` is emitted.
    """
    w, w_approx = as_tensor(w), as_tensor(w_approx)
    var_ref = float(np.var(w))
    var_apx = float(np.var(w_approx))
    if var_apx == 0.0 or var_ref == 0.0:
        warnings.warn("zero variance, skipping variance matching", DegenerateVarianceWarning, stacklevel=2)
        return w_approx.copy(), 1.0
    factor = math.sqrt(var_ref / var_apx)
    return w_approx * factor, factor
