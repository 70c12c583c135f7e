"""Minibatch training loop, optimizers and accuracy evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..data import MultimodalSequence
from ..noise import NoiseKind, NoiseSpec, apply_noise
from .model import DivergenceError, ModelParams, Variant, loss_and_gradients, predict_logits

logger = logging.getLogger(__name__)

# salt separating evaluation noise draws from training draws
_EVAL_STREAM = 0x5EED


@dataclass(frozen=True)
class TrainConfig:
    reg_weight: float = 0.0
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = 5.0

    def __post_init__(self):
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be nonnegative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")


class Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        cfg = self.cfg
        self.t += 1
        c1 = 1.0 - cfg.beta1 ** self.t
        c2 = 1.0 - cfg.beta2 ** self.t
        for (k, w), g in zip(params.arrays().items(), grads.arrays().values()):
            m, v = self.m[k], self.v[k]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            w -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.eps)


class Sgd:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg

    def step(self, params: ModelParams, grads: ModelParams) -> None:
        for w, g in zip(params.arrays().values(), grads.arrays().values()):
            w -= self.cfg.learning_rate * g


def clip_by_global_norm(grads: ModelParams, max_norm: float | None) -> float:
    """Rescale ``grads`` in place to at most ``max_norm``; returns the original norm."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.arrays().values()))
    if max_norm is not None and norm > max_norm:
        for g in grads.arrays().values():
            g *= max_norm / norm
    return norm


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    bce: float
    reg: float
    train_accuracy: float
    valid_accuracy: float


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)
    best_epoch: int = 0


def eval_noise(noise: NoiseSpec | None, n: int) -> list:
    """Fixed per-sequence noise draws used whenever a dataset is evaluated."""
    if noise is None or noise.kind is NoiseKind.CLEAN:
        return [None] * n
    return [noise.derive(_EVAL_STREAM, i) for i in range(n)]


def _noisy(seqs: Sequence[MultimodalSequence], specs: Sequence) -> list:
    return [s if spec is None else apply_noise(s, spec) for s, spec in zip(seqs, specs)]


def evaluate(p: ModelParams, dataset: Sequence[MultimodalSequence], noise: NoiseSpec | None = None) -> float:
    """Binary accuracy; a logit of exactly 0 predicts the positive class."""
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    seqs = _noisy(dataset, eval_noise(noise, len(dataset)))
    return accuracy(predict_logits(p, seqs), [s.positive for s in seqs])


def accuracy(logits, positive) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    return float(np.mean((logits >= 0.0) == positive))


def train(
    p0: ModelParams,
    train_set: Sequence[MultimodalSequence],
    valid_set: Sequence[MultimodalSequence],
    cfg: TrainConfig,
    noise: NoiseSpec | None = None,
) -> TrainResult:
    """Optimize ``p0`` on ``train_set`` and keep the best-on-validation parameters.

    Training noise is redrawn for every sequence in every epoch; validation
    noise is drawn once per sequence. The regularizer only acts on ``t2fn``.
    Ties in validation accuracy keep the earlier epoch.

    Raises
    ------
    DivergenceError
        If the loss becomes non-finite.
    """
    if not train_set or not valid_set:
        raise ValueError("train and valid sets must be nonempty")
    params = p0.copy()
    opt = Adam(params, cfg) if cfg.optimizer == "adam" else Sgd(params, cfg)
    lam = cfg.reg_weight if params.variant is Variant.T2FN else 0.0
    valid = _noisy(valid_set, eval_noise(noise, len(valid_set)))
    valid_pos = [s.positive for s in valid]
    noisy_train = noise is not None and noise.kind is not NoiseKind.CLEAN

    best = params.copy()
    best_acc = -1.0
    best_epoch = 0
    history = []
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        order = np.random.Generator(
            np.random.Philox(np.random.SeedSequence([cfg.seed, epoch]))
        ).permutation(n)
        sums = np.zeros(3)
        train_logits = np.empty(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if noisy_train:
                batch = [apply_noise(train_set[i], noise.derive(epoch, int(i))) for i in idx]
            else:
                batch = [train_set[i] for i in idx]
            try:
                report, grads = loss_and_gradients(params, batch, lam)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}: {exc}") from None
            clip_by_global_norm(grads, cfg.grad_clip)
            opt.step(params, grads)
            sums += len(idx) * np.array([report.loss, report.bce, report.reg])
            train_logits[idx] = report.logits
        sums /= n
        train_acc = accuracy(train_logits, [train_set[i].positive for i in range(n)])
        valid_acc = accuracy(predict_logits(params, valid), valid_pos)
        history.append(EpochMetrics(epoch, *map(float, sums), train_acc, valid_acc))
        logger.debug("epoch %d loss %.5f valid acc %.4f", epoch, sums[0], valid_acc)
        if valid_acc > best_acc:
            best_acc, best_epoch = valid_acc, epoch
            best = params.copy()
    return TrainResult(best, history, best_epoch)
