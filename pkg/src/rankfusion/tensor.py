"""Dense order-M tensors and the multilinear primitives built on them.

Storage is a flat, row-major float64 buffer (last index varies fastest).
Mode-n unfoldings place mode n on the rows and enumerate the remaining modes
on the columns in ascending order, again with the last mode varying fastest.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import reduce
from typing import Sequence

import numpy as np


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class DenseTensor:
    """Immutable dense tensor.

    Parameters
    ----------
    shape : tuple of int
        Positive dimensions ``(d_1, ..., d_M)``.
    data : ndarray
        Flat row-major buffer of length ``prod(shape)``.
    """

    shape: tuple
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        shape = tuple(int(d) for d in self.shape)
        if len(shape) < 1:
            raise ValueError("tensor order must be at least 1")
        if any(d < 1 for d in shape):
            raise ValueError(f"dimensions must be positive, got {shape}")
        data = np.asarray(self.data, dtype=np.float64).ravel()
        if data.size != int(np.prod(shape)):
            raise ValueError(
                f"data length {data.size} does not match shape {shape} "
                f"(expected {int(np.prod(shape))})"
            )
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", _readonly(data))

    @classmethod
    def from_array(cls, array) -> "DenseTensor":
        array = np.asarray(array, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        return cls(array.shape, array.ravel())

    @classmethod
    def zeros(cls, shape) -> "DenseTensor":
        return cls(tuple(shape), np.zeros(int(np.prod(shape))))

    @property
    def order(self) -> int:
        return len(self.shape)

    @property
    def array(self) -> np.ndarray:
        """Read-only view with the tensor's shape."""
        return self.data.reshape(self.shape)

    def __mul__(self, c) -> "DenseTensor":
        return DenseTensor(self.shape, self.data * float(c))

    __rmul__ = __mul__

    def __sub__(self, other: "DenseTensor") -> "DenseTensor":
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        return DenseTensor(self.shape, self.data - other.data)

    def __add__(self, other: "DenseTensor") -> "DenseTensor":
        if self.shape != other.shape:
            raise ValueError(f"shape mismatch {self.shape} vs {other.shape}")
        return DenseTensor(self.shape, self.data + other.data)

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class CpFactors:
    """Weighted rank-r CP factor set.

    ``factors[m]`` has shape ``(d_m, r)``; its columns are the vectors
    w_m^i. ``weights`` holds one scalar per component.
    """

    weights: np.ndarray
    factors: tuple
    normalized: bool = False

    def __post_init__(self):
        weights = _readonly(np.asarray(self.weights, dtype=np.float64).ravel())
        factors = tuple(_readonly(np.atleast_2d(f)) for f in self.factors)
        if not factors:
            raise ValueError("need at least one factor matrix")
        r = weights.size
        for m, f in enumerate(factors):
            if f.ndim != 2 or f.shape[1] != r:
                raise ValueError(
                    f"factor {m} has shape {f.shape}, expected (d, {r})"
                )
        if self.normalized:
            for m, f in enumerate(factors):
                norms = np.linalg.norm(f, axis=0)
                if not np.allclose(norms, 1.0, rtol=0, atol=1e-9):
                    raise ValueError(f"factor {m} columns are not unit norm")
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "factors", factors)

    @property
    def rank(self) -> int:
        return self.weights.size

    @property
    def shape(self) -> tuple:
        return tuple(f.shape[0] for f in self.factors)


def outer_product(vectors: Sequence) -> DenseTensor:
    """Outer product ``v_1 ⊗ ... ⊗ v_M`` of a list of vectors."""
    if len(vectors) == 0:
        raise ValueError("outer_product needs at least one vector")
    vs = [np.asarray(v, dtype=np.float64).ravel() for v in vectors]
    if any(v.size == 0 for v in vs):
        raise ValueError("outer_product vectors must be nonempty")
    out = reduce(np.multiply.outer, vs)
    return DenseTensor.from_array(out)


def frobenius_norm(t: DenseTensor) -> float:
    # scale by the largest entry so tiny or huge values neither underflow nor overflow
    big = float(np.max(np.abs(t.data)))
    if big == 0.0 or not np.isfinite(big):
        return big
    scaled = t.data / big
    return big * float(np.sqrt(np.dot(scaled, scaled)))


def _check_mode(order: int, mode: int) -> int:
    if not isinstance(mode, (int, np.integer)) or not 0 <= mode < order:
        raise ValueError(f"mode {mode} out of range for order-{order} tensor")
    return int(mode)


def unfold(t: DenseTensor, mode: int) -> np.ndarray:
    """Mode-n matricization, shape ``(d_mode, prod of other dims)``."""
    mode = _check_mode(t.order, mode)
    return np.moveaxis(t.array, mode, 0).reshape(t.shape[mode], -1)


def fold(matrix, mode: int, shape) -> DenseTensor:
    """Inverse of :func:`unfold`."""
    shape = tuple(int(d) for d in shape)
    mode = _check_mode(len(shape), mode)
    rest = shape[:mode] + shape[mode + 1:]
    arr = np.asarray(matrix, dtype=np.float64).reshape((shape[mode],) + rest)
    return DenseTensor.from_array(np.moveaxis(arr, 0, mode))


def khatri_rao(a, b) -> np.ndarray:
    """Column-wise Kronecker product; row index is ``i_a * d_b + i_b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise ValueError(
            f"khatri_rao needs equal column counts, got {a.shape[1]} and {b.shape[1]}"
        )
    return (a[:, None, :] * b[None, :, :]).reshape(-1, a.shape[1])


def khatri_rao_all(matrices: Sequence) -> np.ndarray:
    """Khatri-Rao product of several matrices, first matrix slowest."""
    return reduce(khatri_rao, matrices)


def reconstruct(f: CpFactors) -> DenseTensor:
    """Dense tensor ``sum_i weights[i] * w_1^i ⊗ ... ⊗ w_M^i``."""
    first = f.factors[0] * f.weights[None, :]
    if len(f.factors) == 1:
        return DenseTensor.from_array(first.sum(axis=1))
    rest = khatri_rao_all(f.factors[1:])
    return DenseTensor(f.shape, (first @ rest.T).ravel())
