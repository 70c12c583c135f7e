"""Nuclear norm tools: the exact matrix norm and the Frobenius upper bound.

For an order-M tensor with dimensions d_1..d_M,

    ||X||_*  <=  sqrt(prod(d) / max(d)) * ||X||_F

which is cheap, convex and differentiable away from zero. The fused tensor
of a temporal fusion model is never materialized to evaluate it: its squared
Frobenius norm follows from the T x T Gram matrices of the per-modality
factor rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import DenseTensor, frobenius_norm


@dataclass(frozen=True)
class BoundReport:
    frobenius: float
    scale: float
    bound: float


def bound_scale(shape: Sequence[int]) -> float:
    """``sqrt(prod(shape) / max(shape))``."""
    shape = [int(d) for d in shape]
    return float(np.sqrt(np.prod(shape, dtype=np.float64) / max(shape)))


def nuclear_norm_matrix(m) -> float:
    """Sum of singular values of a 2-D array."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"expected a matrix, got an array of shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    if m.size == 0:
        return 0.0
    return float(np.linalg.svd(m, compute_uv=False).sum())


def nuclear_upper_bound(t) -> BoundReport:
    """Frobenius upper bound on the nuclear norm of an order >= 2 tensor.

    Accepts a :class:`DenseTensor` or anything ``np.asarray`` understands.
    """
    if not isinstance(t, DenseTensor):
        t = DenseTensor.from_array(np.asarray(t, dtype=np.float64))
    if t.order < 2:
        raise ValueError("the nuclear norm bound needs a tensor of order >= 2")
    fro = frobenius_norm(t)
    scale = bound_scale(t.shape)
    return BoundReport(frobenius=fro, scale=scale, bound=scale * fro)


def _gram_product(rows: Sequence[np.ndarray]) -> np.ndarray:
    first = np.asarray(rows[0], dtype=np.float64)
    T = first.shape[0]
    g = np.ones((T, T))
    for h in rows:
        h = np.asarray(h, dtype=np.float64)
        if h.ndim != 2 or h.shape[0] != T:
            raise ValueError(
                f"factor row counts differ: expected {T}, got shape {h.shape}"
            )
        g *= h @ h.T
    return g


def fused_frobenius_sq(hl, hv, ha) -> float:
    """Squared Frobenius norm of ``sum_t hl[t] ⊗ hv[t] ⊗ ha[t]``.

    The rows are the hidden vectors with the constant 1 already appended.
    Uses ``sum_{t,t'} <hl_t, hl_t'> <hv_t, hv_t'> <ha_t, ha_t'>``, so the
    cost is O(T^2 (d_l + d_v + d_a)) and nothing of size d_l*d_v*d_a is
    formed.
    """
    return float(_gram_product([hl, hv, ha]).sum())


def materialize_fusion(hl, hv, ha) -> DenseTensor:
    """Dense ``sum_t hl[t] ⊗ hv[t] ⊗ ha[t]``; for checks and rank analysis."""
    hl, hv, ha = (np.asarray(h, dtype=np.float64) for h in (hl, hv, ha))
    _gram_product([hl, hv, ha])
    return DenseTensor.from_array(np.einsum("ti,tj,tk->ijk", hl, hv, ha))


def append_one(h) -> np.ndarray:
    """Append a constant-1 column to a (..., d) array of hidden states."""
    h = np.asarray(h, dtype=np.float64)
    return np.concatenate([h, np.ones(h.shape[:-1] + (1,))], axis=-1)
