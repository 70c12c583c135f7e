"""LSTM encoder with hand-written backpropagation through time.

Gate rows of the stacked weight matrix are ordered input, forget, cell
candidate, output. Every array is float64; batches are ``(B, T, D)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


@dataclass
class LstmParams:
    """Stacked gate weights ``W`` of shape ``(4H, D + H)`` and biases ``b`` of shape ``(4H,)``."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        if self.W.ndim != 2 or self.W.shape[0] % 4:
            raise ValueError(f"W must be (4H, D+H), got {self.W.shape}")
        H = self.W.shape[0] // 4
        if self.W.shape[1] <= H:
            raise ValueError(f"W has {self.W.shape[1]} columns, needs more than H={H}")
        if self.b.shape != (4 * H,):
            raise ValueError(f"b must have shape ({4 * H},), got {self.b.shape}")

    @property
    def hidden_dim(self) -> int:
        return self.W.shape[0] // 4

    @property
    def input_dim(self) -> int:
        return self.W.shape[1] - self.hidden_dim

    @classmethod
    def init(cls, input_dim: int, hidden_dim: int, rng: np.random.Generator) -> "LstmParams":
        bound = 1.0 / np.sqrt(hidden_dim)
        W = rng.uniform(-bound, bound, (4 * hidden_dim, input_dim + hidden_dim))
        b = rng.uniform(-bound, bound, 4 * hidden_dim)
        return cls(W, b)


@dataclass
class LstmCache:
    X: np.ndarray
    H: np.ndarray  # (B, T+1, H), slot 0 holds h^0 = 0
    C: np.ndarray  # (B, T+1, H), slot 0 holds c^0 = 0
    gates: np.ndarray  # (B, T, 4H) post-activation


def forward_batch(p: LstmParams, X: np.ndarray) -> tuple[np.ndarray, LstmCache]:
    """Run the recurrence over a ``(B, T, D)`` batch; returns ``(B, T, H)`` states."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 3 or X.shape[2] != p.input_dim:
        raise ValueError(
            f"LSTM expects inputs of width {p.input_dim}, got array of shape {X.shape}"
        )
    B, T, D = X.shape
    Hd = p.hidden_dim
    Wx, Wh = p.W[:, :D], p.W[:, D:]
    H = np.zeros((B, T + 1, Hd))
    C = np.zeros((B, T + 1, Hd))
    gates = np.empty((B, T, 4 * Hd))
    # input projections do not depend on the recurrence
    pre_x = X @ Wx.T + p.b
    for t in range(T):
        z = pre_x[:, t] + H[:, t] @ Wh.T
        g = np.empty_like(z)
        g[:, :2 * Hd] = sigmoid(z[:, :2 * Hd])
        g[:, 2 * Hd:3 * Hd] = np.tanh(z[:, 2 * Hd:3 * Hd])
        g[:, 3 * Hd:] = sigmoid(z[:, 3 * Hd:])
        i, f, c_hat, o = np.split(g, 4, axis=1)
        C[:, t + 1] = f * C[:, t] + i * c_hat
        H[:, t + 1] = o * np.tanh(C[:, t + 1])
        gates[:, t] = g
    return H[:, 1:], LstmCache(X, H, C, gates)


def backward_batch(p: LstmParams, cache: LstmCache, dH: np.ndarray) -> tuple[LstmParams, np.ndarray]:
    """Backpropagate ``dH = dL/dh^t`` (shape ``(B, T, H)``) through time.

    Returns parameter gradients (as an :class:`LstmParams`) and ``dL/dX``.
    """
    X = cache.X
    B, T, D = X.shape
    Hd = p.hidden_dim
    Wx, Wh = p.W[:, :D], p.W[:, D:]
    dz_all = np.empty((B, T, 4 * Hd))
    dh_next = np.zeros((B, Hd))
    dc_next = np.zeros((B, Hd))
    for t in reversed(range(T)):
        i, f, c_hat, o = np.split(cache.gates[:, t], 4, axis=1)
        tc = np.tanh(cache.C[:, t + 1])
        dh = dH[:, t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dz = np.concatenate(
            [
                dc * c_hat * i * (1.0 - i),
                dc * cache.C[:, t] * f * (1.0 - f),
                dc * i * (1.0 - c_hat * c_hat),
                dh * tc * o * (1.0 - o),
            ],
            axis=1,
        )
        dz_all[:, t] = dz
        dh_next = dz @ Wh
        dc_next = dc * f
    dz_flat = dz_all.reshape(B * T, 4 * Hd)
    dWx = dz_flat.T @ X.reshape(B * T, D)
    dWh = dz_flat.T @ cache.H[:, :-1].reshape(B * T, Hd)
    grads = LstmParams(np.concatenate([dWx, dWh], axis=1), dz_flat.sum(axis=0))
    return grads, dz_all @ Wx


def lstm_forward(p: LstmParams, x) -> np.ndarray:
    """Hidden states ``h^1..h^T`` for a single ``(T, input_dim)`` sequence."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != p.input_dim:
        raise ValueError(f"expected a (T, {p.input_dim}) sequence, got shape {x.shape}")
    H, _ = forward_batch(p, x[None])
    return H[0]
