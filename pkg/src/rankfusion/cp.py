"""CP decomposition by alternating least squares and the rank diagnostic.

The diagnostic fits CP models of increasing rank and records the relative
reconstruction error at each rank; the smallest rank whose error drops under
a threshold serves as a surrogate for the (intractable) true rank.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .tensor import CpFactors, DenseTensor, frobenius_norm, khatri_rao_all, unfold

logger = logging.getLogger(__name__)

RIDGE = 1e-9


@dataclass(frozen=True)
class AlsConfig:
    max_iters: int = 200
    tol: float = 1e-7
    seed: int = 0
    restarts: int = 3

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


@dataclass(frozen=True)
class RankCurve:
    """Relative CP reconstruction error as a function of the rank tried."""

    points: tuple

    def __post_init__(self):
        pts = tuple((int(r), float(e)) for r, e in self.points)
        ranks = [r for r, _ in pts]
        if any(b <= a for a, b in zip(ranks, ranks[1:])):
            raise ValueError("ranks must be strictly increasing")
        if any(e < 0 for _, e in pts):
            raise ValueError("epsilon values must be nonnegative")
        object.__setattr__(self, "points", pts)

    @property
    def ranks(self) -> list:
        return [r for r, _ in self.points]

    @property
    def errors(self) -> list:
        return [e for _, e in self.points]


class SurrogateRank(int):
    """An integer rank that remembers whether the rank sweep saturated."""

    saturated: bool

    def __new__(cls, value: int, saturated: bool = False):
        obj = super().__new__(cls, value)
        obj.saturated = saturated
        return obj

    def __repr__(self):
        flag = ", saturated" if self.saturated else ""
        return f"SurrogateRank({int(self)}{flag})"


@dataclass
class AlsRun:
    """Outcome of a single ALS run from one initialization."""

    factors: CpFactors
    epsilon: float
    history: list = field(default_factory=list)
    converged: bool = False


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def _normalize_columns(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(a, axis=0)
    safe = np.where(norms > 0, norms, 1.0)
    return a / safe, norms


def als_run(t: DenseTensor, r: int, cfg: AlsConfig, restart: int = 0) -> AlsRun:
    """Run ALS once from a seeded Gaussian start, tracking the error per sweep."""
    norm_x = frobenius_norm(t)
    order = t.order
    rng = _rng(cfg.seed, r, restart)
    factors = [_normalize_columns(rng.standard_normal((d, r)))[0] for d in t.shape]
    weights = np.ones(r)
    unfoldings = [unfold(t, n) for n in range(order)]

    history: list[float] = []
    converged = False
    for _ in range(cfg.max_iters):
        for n in range(order):
            others = [factors[m] for m in range(order) if m != n]
            gram = np.ones((r, r))
            for f in others:
                gram *= f.T @ f
            gram[np.diag_indices(r)] += RIDGE
            kr = khatri_rao_all(others) if others else np.ones((1, r))
            # gram is SPD after the ridge; solve for the rows of the new factor
            updated = np.linalg.solve(gram, (unfoldings[n] @ kr).T).T
            factors[n], weights = _normalize_columns(updated)
        # kr still holds the product for the last mode
        resid = unfoldings[-1] - (factors[-1] * weights) @ kr.T
        eps = float(np.linalg.norm(resid)) / norm_x
        done = bool(history) and abs(history[-1] - eps) < cfg.tol
        history.append(eps)
        if done:
            converged = True
            break

    return AlsRun(_finalize(weights, factors), history[-1], history, converged)


def _unit(d: int, r: int) -> np.ndarray:
    e = np.zeros((d, r))
    e[0, :] = 1.0
    return e


def _finalize(weights: np.ndarray, factors: list) -> CpFactors:
    # a vanished column contributes nothing; give it a unit direction and
    # zero weight so the normalized invariant holds
    dead = weights == 0
    for f in factors:
        dead |= np.linalg.norm(f, axis=0) == 0
    weights = np.where(dead, 0.0, weights)
    factors = [np.where(dead[None, :], _unit(*f.shape), f) for f in factors]
    return CpFactors(weights, factors, normalized=True)


def cp_als(t: DenseTensor, r: int, cfg: AlsConfig | None = None) -> tuple[CpFactors, float]:
    """Fit a rank-``r`` CP model by alternating least squares.

    Parameters
    ----------
    t : DenseTensor
        Tensor to decompose. Must have finite entries.
    r : int
        Number of rank-1 components.
    cfg : AlsConfig, optional
        Iteration budget, stopping tolerance, seed and number of restarts.

    Returns
    -------
    factors : CpFactors
        Best factors over all restarts, with unit-norm columns.
    epsilon : float
        Relative error ``||reconstruct(factors) - t||_F / ||t||_F``.
    """
    cfg = cfg or AlsConfig()
    if int(r) < 1:
        raise ValueError(f"rank must be positive, got {r}")
    r = int(r)
    if not np.all(np.isfinite(t.data)):
        raise ValueError("tensor has non-finite entries")
    if frobenius_norm(t) == 0.0:
        return CpFactors(np.zeros(r), [_unit(d, r) for d in t.shape], normalized=True), 0.0

    best = None
    for restart in range(cfg.restarts):
        run = als_run(t, r, cfg, restart)
        if best is None or run.epsilon < best.epsilon:
            best = run
    return best.factors, best.epsilon


def rank_curve(t: DenseTensor, ranks: Sequence[int], cfg: AlsConfig | None = None) -> RankCurve:
    """Relative CP error at each rank, reported as a running minimum."""
    cfg = cfg or AlsConfig()
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise ValueError("ranks must be nonempty")
    if any(b <= a for a, b in zip(ranks, ranks[1:])):
        raise ValueError("ranks must be strictly increasing")
    points = []
    running = np.inf
    for r in ranks:
        _, eps = cp_als(t, r, cfg)
        running = min(running, eps)
        points.append((r, running))
    return RankCurve(tuple(points))


def surrogate_rank(curve: RankCurve, threshold: float = 0.05) -> SurrogateRank:
    """Smallest rank in ``curve`` whose error is at most ``threshold``.

    When no rank qualifies the largest rank tried is returned with
    ``saturated`` set.
    """
    if not curve.points:
        raise ValueError("empty rank curve")
    for r, eps in curve.points:
        if eps <= threshold:
            return SurrogateRank(r)
    return SurrogateRank(curve.points[-1][0], saturated=True)


class CurveSummary(NamedTuple):
    ranks: list
    mean: np.ndarray
    std: np.ndarray


def mean_curve(curves: Sequence[RankCurve]) -> CurveSummary:
    """Pointwise mean and standard deviation of curves over shared ranks."""
    if not curves:
        raise ValueError("no curves to average")
    ranks = curves[0].ranks
    if any(c.ranks != ranks for c in curves):
        raise ValueError("curves were evaluated on different rank grids")
    errs = np.array([c.errors for c in curves])
    return CurveSummary(ranks, errs.mean(axis=0), errs.std(axis=0))
