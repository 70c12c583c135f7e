"""Temporal tensor fusion, its baselines, the regularized loss, and gradients.

Four variants share the same per-modality LSTM encoders:

* ``t2fn``: ``M = sum_t [h_l^t;1] ⊗ [h_v^t;1] ⊗ [h_a^t;1]``, linear head on vec(M)
* ``tfn``: one outer product of the final appended-1 hidden states
* ``ef_lstm``: per-step feature concatenation, one LSTM, head on its last state
* ``lf_lstm``: three LSTMs, head on the concatenated last states

Only ``t2fn`` carries the rank regularizer, ``scale^2 * ||M||_F^2`` with
``scale^2 = prod(d) / max(d)`` over the fused dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import NamedTuple, Sequence

import numpy as np

from ..bounds import append_one, fused_frobenius_sq, materialize_fusion
from ..data import MODALITIES, MultimodalSequence
from ..tensor import CpFactors, DenseTensor
from .lstm import LstmParams, backward_batch, forward_batch, sigmoid


class Variant(str, Enum):
    T2FN = "t2fn"
    TFN = "tfn"
    EF_LSTM = "ef_lstm"
    LF_LSTM = "lf_lstm"


class DivergenceError(FloatingPointError):
    """Raised when the training loss stops being finite."""


# fixed stream ids so a modality's encoder init does not depend on the variant
_STREAM = {"lang": 0, "visual": 1, "acoustic": 2, "early": 3, "classifier": 4}


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream])))


def reg_scale_sq(shape: Sequence[int]) -> float:
    """Square of the nuclear-norm bound scale, ``prod(shape) / max(shape)``."""
    shape = [int(d) for d in shape]
    return float(math.prod(shape)) / max(shape)


@dataclass
class ModelParams:
    variant: Variant
    encoders: dict
    clf_w: np.ndarray
    clf_b: np.ndarray

    def __post_init__(self):
        self.variant = Variant(self.variant)
        self.clf_w = np.asarray(self.clf_w, dtype=np.float64).ravel()
        self.clf_b = np.asarray(self.clf_b, dtype=np.float64).reshape(1)
        want = ("early",) if self.variant is Variant.EF_LSTM else MODALITIES
        if tuple(self.encoders) != want:
            raise ValueError(f"{self.variant.value} needs encoders {want}, got {tuple(self.encoders)}")
        if self.clf_w.size != self.fused_dim:
            raise ValueError(
                f"classifier input {self.clf_w.size} does not match the "
                f"{self.variant.value} fused size {self.fused_dim}"
            )

    @property
    def hidden_dims(self) -> tuple:
        return tuple(e.hidden_dim for e in self.encoders.values())

    @property
    def input_dims(self) -> tuple:
        if self.variant is Variant.EF_LSTM:
            return (self.encoders["early"].input_dim,)
        return tuple(e.input_dim for e in self.encoders.values())

    @property
    def fused_shape(self) -> tuple:
        """Dimensions of the fused tensor (tensor variants only)."""
        if self.variant not in (Variant.T2FN, Variant.TFN):
            raise AttributeError(f"{self.variant.value} has no fused tensor")
        return tuple(h + 1 for h in self.hidden_dims)

    @property
    def fused_dim(self) -> int:
        if self.variant in (Variant.T2FN, Variant.TFN):
            return math.prod(h + 1 for h in self.hidden_dims)
        return sum(self.hidden_dims)

    def arrays(self) -> dict:
        """Named parameter arrays, in a fixed order. Values alias the model."""
        out = {}
        for name, enc in self.encoders.items():
            out[f"{name}.W"] = enc.W
            out[f"{name}.b"] = enc.b
        out["classifier.w"] = self.clf_w
        out["classifier.b"] = self.clf_b
        return out

    @classmethod
    def from_arrays(cls, variant, arrays: dict) -> "ModelParams":
        variant = Variant(variant)
        names = ("early",) if variant is Variant.EF_LSTM else MODALITIES
        encoders = {n: LstmParams(arrays[f"{n}.W"], arrays[f"{n}.b"]) for n in names}
        return cls(variant, encoders, arrays["classifier.w"], arrays["classifier.b"])

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.variant, {k: v.copy() for k, v in self.arrays().items()})

    def map(self, fn) -> "ModelParams":
        return ModelParams.from_arrays(self.variant, {k: fn(v) for k, v in self.arrays().items()})

    def check_dims(self, feature_dims: Sequence[int]) -> None:
        """Raise ``ValueError`` naming both sides if data dims do not fit the model."""
        feature_dims = tuple(int(d) for d in feature_dims)
        if self.variant is Variant.EF_LSTM:
            ok = (sum(feature_dims),) == self.input_dims
        else:
            ok = feature_dims == self.input_dims
        if not ok:
            raise ValueError(
                f"model {self.variant.value} expects input dims {self.input_dims}, "
                f"dataset has feature dims {feature_dims}"
            )


def init_model(variant, input_dims: Sequence[int], hidden_dims=(8, 8, 8), seed: int = 0) -> ModelParams:
    """Randomly initialized parameters.

    Encoders use PyTorch-style uniform(-1/sqrt(H), 1/sqrt(H)) weights. The
    random stream of each modality encoder depends only on ``seed`` and the
    modality, so variants built from one seed share their encoders.
    """
    variant = Variant(variant)
    input_dims = tuple(int(d) for d in input_dims)
    if isinstance(hidden_dims, int):
        hidden_dims = (hidden_dims,) * 3
    hidden_dims = tuple(int(h) for h in hidden_dims)
    if variant is Variant.EF_LSTM:
        encoders = {"early": LstmParams.init(sum(input_dims), hidden_dims[0], _rng(seed, _STREAM["early"]))}
    else:
        encoders = {
            name: LstmParams.init(d, h, _rng(seed, _STREAM[name]))
            for name, d, h in zip(MODALITIES, input_dims, hidden_dims)
        }
    proto = ModelParams(variant, encoders, np.zeros(_fused_dim(variant, encoders)), np.zeros(1))
    bound = 1.0 / math.sqrt(proto.fused_dim)
    proto.clf_w = _rng(seed, _STREAM["classifier"]).uniform(-bound, bound, proto.fused_dim)
    return proto


def _fused_dim(variant: Variant, encoders: dict) -> int:
    hs = [e.hidden_dim for e in encoders.values()]
    if variant in (Variant.T2FN, Variant.TFN):
        return math.prod(h + 1 for h in hs)
    return sum(hs)


@dataclass(frozen=True)
class FusedTensor:
    """Implicit ``sum_t a_l[t] ⊗ a_v[t] ⊗ a_a[t]`` from appended-1 factor rows."""

    factors: tuple

    @property
    def shape(self) -> tuple:
        return tuple(f.shape[1] for f in self.factors)

    @property
    def terms(self) -> int:
        return self.factors[0].shape[0]

    def frobenius_sq(self) -> float:
        return fused_frobenius_sq(*self.factors)

    def reg_value(self) -> float:
        return reg_scale_sq(self.shape) * self.frobenius_sq()

    def materialize(self) -> DenseTensor:
        return materialize_fusion(*self.factors)

    def as_cp(self) -> CpFactors:
        """Exact CP form with one unit-weight component per time step."""
        return CpFactors(np.ones(self.terms), [f.T for f in self.factors])


# ---------------------------------------------------------------------------
# batched forward / backward


class _Ctx(NamedTuple):
    caches: dict
    A: tuple  # appended-1 factors per modality (tensor variants)
    fused: np.ndarray  # (B, F) classifier inputs


def _stack(seqs: Sequence[MultimodalSequence]) -> tuple:
    return tuple(np.stack([getattr(s, m) for s in seqs]) for m in MODALITIES)


def _forward(p: ModelParams, feats: tuple) -> tuple[np.ndarray, _Ctx]:
    v = p.variant
    B = feats[0].shape[0]
    if feats[0].shape[1] == 0:
        raise ValueError("sequence length T must be positive")
    if v is Variant.EF_LSTM:
        H, cache = forward_batch(p.encoders["early"], np.concatenate(feats, axis=2))
        fused = H[:, -1]
        ctx = _Ctx({"early": cache}, (), fused)
    else:
        caches, hs = {}, []
        for name, X in zip(MODALITIES, feats):
            H, caches[name] = forward_batch(p.encoders[name], X)
            hs.append(H)
        if v is Variant.LF_LSTM:
            fused = np.concatenate([H[:, -1] for H in hs], axis=1)
            ctx = _Ctx(caches, (), fused)
        else:
            if v is Variant.TFN:
                A = tuple(append_one(H[:, -1:]) for H in hs)  # (B, 1, h+1)
            else:
                A = tuple(append_one(H) for H in hs)  # (B, T, h+1)
            fused = np.einsum("bti,btj,btk->bijk", *A).reshape(B, -1)
            ctx = _Ctx(caches, A, fused)
    logits = fused @ p.clf_w + p.clf_b[0]
    return logits, ctx


def _reg_values(A: tuple, scale_sq: float) -> tuple[np.ndarray, tuple]:
    grams = tuple(np.einsum("bti,bsi->bts", a, a) for a in A)
    return scale_sq * (grams[0] * grams[1] * grams[2]).sum(axis=(1, 2)), grams


def _backward(p: ModelParams, ctx: _Ctx, dlogits: np.ndarray, reg_coef: float, grams=None) -> ModelParams:
    """Gradients given ``dL/dlogit`` per example and the regularizer weight.

    ``reg_coef`` multiplies ``sum_b ||M_b||_F^2``; pass 0 to skip that path.
    """
    v = p.variant
    B = dlogits.shape[0]
    g_w = ctx.fused.T @ dlogits
    g_b = np.array([dlogits.sum()])
    dfused = dlogits[:, None] * p.clf_w[None, :]

    if v is Variant.EF_LSTM:
        cache = ctx.caches["early"]
        dH = np.zeros(cache.H[:, 1:].shape)
        dH[:, -1] = dfused
        enc, _ = backward_batch(p.encoders["early"], cache, dH)
        return ModelParams(v, {"early": enc}, g_w, g_b)

    if v is Variant.LF_LSTM:
        splits = np.cumsum(p.hidden_dims)[:-1]
        d_last = np.split(dfused, splits, axis=1)
    else:
        Al, Av, Aa = ctx.A
        dM = dfused.reshape((B,) + tuple(a.shape[2] for a in ctx.A))
        dA = [
            np.einsum("bijk,btj,btk->bti", dM, Av, Aa),
            np.einsum("bijk,bti,btk->btj", dM, Al, Aa),
            np.einsum("bijk,bti,btj->btk", dM, Al, Av),
        ]
        if reg_coef != 0.0:
            Gl, Gv, Ga = grams
            # d/dA_l sum_{t,s} Gl Gv Ga = 2 (Gv * Ga) A_l, and cyclically
            dA[0] = dA[0] + 2.0 * reg_coef * np.einsum("bts,bsi->bti", Gv * Ga, Al)
            dA[1] = dA[1] + 2.0 * reg_coef * np.einsum("bts,bsi->bti", Gl * Ga, Av)
            dA[2] = dA[2] + 2.0 * reg_coef * np.einsum("bts,bsi->bti", Gl * Gv, Aa)
        d_last = None

    encoders = {}
    for m, name in enumerate(MODALITIES):
        cache = ctx.caches[name]
        dH = np.zeros(cache.H[:, 1:].shape)
        if d_last is not None:
            dH[:, -1] = d_last[m]
        elif v is Variant.TFN:
            dH[:, -1] = dA[m][:, 0, :-1]
        else:
            dH = dA[m][:, :, :-1]
        encoders[name], _ = backward_batch(p.encoders[name], cache, dH)
    return ModelParams(v, encoders, g_w, g_b)


def bce_with_logits(logit, positive):
    """Numerically stable binary cross-entropy on raw logits."""
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(positive, dtype=np.float64)
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def loss(logit: float, y: float, reg_value: float = 0.0, lam: float = 0.0) -> float:
    """Cross-entropy of ``logit`` against the binarized label plus ``lam * reg_value``.

    Labels are binarized with ``y >= 0`` as the positive class.
    """
    return float(bce_with_logits(logit, float(y) >= 0.0)) + lam * reg_value


class LossReport(NamedTuple):
    loss: float
    bce: float
    reg: float  # mean unweighted regularizer value (0 for baselines)
    logits: np.ndarray


def _groups_by_length(seqs: Sequence[MultimodalSequence]) -> dict:
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(seqs):
        groups.setdefault(s.T, []).append(i)
    return groups


def loss_and_gradients(
    p: ModelParams,
    batch: Sequence[MultimodalSequence],
    reg_weight: float = 0.0,
    include_reg: bool | None = None,
) -> tuple[LossReport, ModelParams]:
    """Mean regularized loss over ``batch`` and its exact gradient.

    ``include_reg`` forces the regularizer gradient path on or off; by
    default it runs whenever ``reg_weight`` is nonzero.
    """
    if not batch:
        raise ValueError("empty batch")
    B = len(batch)
    tensor_reg = p.variant is Variant.T2FN
    if include_reg is None:
        include_reg = reg_weight != 0.0
    scale_sq = reg_scale_sq(p.fused_shape) if tensor_reg else 0.0

    logits = np.empty(B)
    total_bce = total_reg = 0.0
    grads = None
    for idx in _groups_by_length(batch).values():
        seqs = [batch[i] for i in idx]
        p.check_dims(seqs[0].dims)
        feats = _stack(seqs)
        y = np.array([s.positive for s in seqs], dtype=np.float64)
        z, ctx = _forward(p, feats)
        logits[idx] = z
        total_bce += float(bce_with_logits(z, y).sum())
        grams = None
        if tensor_reg:
            reg, grams = _reg_values(ctx.A, scale_sq)
            total_reg += float(reg.sum())
        dlogits = (sigmoid(z) - y) / B
        coef = reg_weight * scale_sq / B if (tensor_reg and include_reg) else 0.0
        g = _backward(p, ctx, dlogits, coef, grams)
        if grads is None:
            grads = g
        else:
            for (k, acc), new in zip(grads.arrays().items(), g.arrays().values()):
                acc += new
    bce = total_bce / B
    reg = total_reg / B
    value = bce + reg_weight * reg
    if not math.isfinite(value):
        raise DivergenceError(f"non-finite loss (bce={bce}, reg={reg})")
    return LossReport(value, bce, reg, logits), grads


def gradients(p: ModelParams, batch: Sequence[MultimodalSequence], cfg) -> ModelParams:
    """Gradient of the mean loss over ``batch`` with ``cfg.reg_weight``."""
    return loss_and_gradients(p, batch, cfg.reg_weight)[1]


def predict_logits(p: ModelParams, seqs: Sequence[MultimodalSequence], chunk: int = 256) -> np.ndarray:
    out = np.empty(len(seqs))
    for idx in _groups_by_length(seqs).values():
        for start in range(0, len(idx), chunk):
            part = idx[start:start + chunk]
            group = [seqs[i] for i in part]
            p.check_dims(group[0].dims)
            out[part] = _forward(p, _stack(group))[0]
    return out


def fused_tensor(p: ModelParams, s: MultimodalSequence) -> FusedTensor:
    """Implicit fused tensor of one sequence (``t2fn`` or ``tfn``)."""
    if p.variant not in (Variant.T2FN, Variant.TFN):
        raise ValueError(f"{p.variant.value} does not build a fused tensor")
    p.check_dims(s.dims)
    _, ctx = _forward(p, _stack([s]))
    return FusedTensor(tuple(a[0] for a in ctx.A))


def t2fn_forward(p: ModelParams, s: MultimodalSequence) -> tuple[FusedTensor, float]:
    if p.variant is not Variant.T2FN:
        raise ValueError(f"t2fn_forward needs a t2fn model, got {p.variant.value}")
    p.check_dims(s.dims)
    z, ctx = _forward(p, _stack([s]))
    return FusedTensor(tuple(a[0] for a in ctx.A)), float(z[0])


def baseline_forward(p: ModelParams, s: MultimodalSequence) -> float:
    if p.variant is Variant.T2FN:
        raise ValueError("baseline_forward takes tfn, ef_lstm or lf_lstm models")
    p.check_dims(s.dims)
    return float(_forward(p, _stack([s]))[0][0])


def final_hidden_states(p: ModelParams, s: MultimodalSequence) -> tuple:
    """Last hidden state of each encoder for one sequence."""
    p.check_dims(s.dims)
    feats = _stack([s])
    if p.variant is Variant.EF_LSTM:
        H, _ = forward_batch(p.encoders["early"], np.concatenate(feats, axis=2))
        return (H[0, -1],)
    return tuple(forward_batch(p.encoders[n], X)[0][0, -1] for n, X in zip(MODALITIES, feats))
