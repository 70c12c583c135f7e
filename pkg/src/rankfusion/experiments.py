"""Experiment grids: CP rank analysis of fused tensors and accuracy under imperfection.

Both grids produce plain row dicts; :func:`write_csv` writes them atomically
with a fixed header. Rows are always emitted in canonical sorted order, so
results do not depend on how many worker processes ran the grid.
"""

from __future__ import annotations

import csv
import io
import itertools
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .cp import AlsConfig, RankCurve, mean_curve, rank_curve, surrogate_rank
from .data import MultimodalSequence
from .neural.checkpoint import save_checkpoint
from .neural.model import DivergenceError, ModelParams, Variant, fused_tensor, init_model
from .neural.train import TrainConfig, evaluate, train
from .noise import NOISE_LEVELS, NoiseKind, NoiseSpec, apply_noise

logger = logging.getLogger(__name__)

GAUSSIAN = "gaussian"
NOREG = "t2fn_noreg"

RANK_COLUMNS = ("kind", "p", "seed", "r", "epsilon")
RANK_MEAN_COLUMNS = ("kind", "p", "r", "epsilon_mean", "epsilon_std", "n_seeds")
RANK_SUMMARY_COLUMNS = ("kind", "p", "seed", "surrogate_rank", "saturated")
ACCURACY_COLUMNS = ("variant", "kind", "p", "lambda", "seed", "accuracy", "valid_accuracy", "best_epoch", "status")
EPOCH_COLUMNS = ("variant", "kind", "p", "lambda", "seed", "epoch", "loss", "bce", "reg", "train_accuracy", "valid_accuracy")


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    """Write ``rows`` under a fixed header via a temp file and rename."""
    path = Path(path)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="raise")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _cell(row[k]) for k in columns})
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def noise_cells(kinds: Sequence[str], levels: Sequence[float]) -> list[tuple[str, float]]:
    """(kind, p) pairs; ``clean`` and ``gaussian`` are level-free and use one p."""
    cells = []
    for kind in kinds:
        if kind == NoiseKind.CLEAN.value:
            cells.append((kind, 0.0))
        elif kind == GAUSSIAN:
            cells.append((kind, 1.0))
        else:
            NoiseKind(kind)
            cells.extend((kind, float(p)) for p in levels)
    return cells


# ---------------------------------------------------------------------------
# rank analysis


def gaussian_like(s: MultimodalSequence, seed: int) -> MultimodalSequence:
    """Replace every modality with i.i.d. Gaussian entries of matching RMS."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    feats = []
    for f in s.features:
        rms = float(np.sqrt(np.mean(f * f))) or 1.0
        feats.append(rms * rng.standard_normal(f.shape))
    return MultimodalSequence(*feats, label=s.label)


def perturb(s: MultimodalSequence, kind: str, p: float, seed: int, index: int) -> MultimodalSequence:
    if kind == GAUSSIAN:
        return gaussian_like(s, int(NoiseSpec(seed=seed).derive(index).seed))
    return apply_noise(s, NoiseSpec(kind, p, seed).derive(index))


def sequence_rank_curve(params: ModelParams, s: MultimodalSequence, ranks, als: AlsConfig) -> RankCurve:
    return rank_curve(fused_tensor(params, s).materialize(), ranks, als)


@dataclass(frozen=True)
class RankJob:
    kind: str
    p: float
    seed: int


def _rank_cell(params: ModelParams, seqs, job: RankJob, ranks, als: AlsConfig) -> RankCurve:
    curves = [
        sequence_rank_curve(params, perturb(s, job.kind, job.p, job.seed, i), ranks, replace(als, seed=job.seed))
        for i, s in enumerate(seqs)
    ]
    summary = mean_curve(curves)
    return RankCurve(tuple(zip(summary.ranks, summary.mean.tolist())))


def _run_rank_job(args):
    return _rank_cell(*args)


@dataclass
class RankAnalysis:
    curves: dict  # RankJob -> mean-over-sequences RankCurve

    def rows(self) -> list[dict]:
        out = []
        for job in sorted(self.curves, key=_rank_key):
            for r, eps in self.curves[job].points:
                out.append({"kind": job.kind, "p": job.p, "seed": job.seed, "r": r, "epsilon": eps})
        return out

    def mean_rows(self) -> list[dict]:
        out = []
        for (kind, p), jobs in itertools.groupby(sorted(self.curves, key=_rank_key), key=lambda j: (j.kind, j.p)):
            jobs = list(jobs)
            summary = mean_curve([self.curves[j] for j in jobs])
            for r, m, s in zip(summary.ranks, summary.mean, summary.std):
                out.append({"kind": kind, "p": p, "r": r, "epsilon_mean": float(m), "epsilon_std": float(s), "n_seeds": len(jobs)})
        return out

    def surrogate_rows(self, threshold: float) -> list[dict]:
        out = []
        for job in sorted(self.curves, key=_rank_key):
            sr = surrogate_rank(self.curves[job], threshold)
            out.append({"kind": job.kind, "p": job.p, "seed": job.seed, "surrogate_rank": int(sr), "saturated": sr.saturated})
        return out

    def mean_surrogate(self, kind: str, p: float, threshold: float) -> float:
        vals = [r["surrogate_rank"] for r in self.surrogate_rows(threshold) if r["kind"] == kind and r["p"] == p]
        if not vals:
            raise KeyError(f"no rank results for ({kind}, {p})")
        return float(np.mean(vals))

    def mean_errors(self, kind: str, p: float) -> np.ndarray:
        return mean_curve([c for j, c in self.curves.items() if j.kind == kind and j.p == p]).mean


_KIND_ORDER = {"clean": 0, "random_drop": 1, "structured_drop": 2, GAUSSIAN: 3}


def _rank_key(job: RankJob):
    return (_KIND_ORDER.get(job.kind, 9), job.kind, job.p, job.seed)


def rank_analysis(
    params: ModelParams,
    seqs: Sequence[MultimodalSequence],
    kinds: Sequence[str] = ("clean", "random_drop", "structured_drop"),
    levels: Sequence[float] = NOISE_LEVELS,
    seeds: Sequence[int] = (0,),
    ranks: Sequence[int] | None = None,
    als: AlsConfig | None = None,
    jobs: int = 1,
) -> RankAnalysis:
    """CP rank curves of the fused tensors of ``seqs`` for every noise cell and seed.

    Each sequence's fused tensor gets its own rank curve; the curve stored for
    a (kind, p, seed) cell is the pointwise mean over the sequences. The
    default rank grid is 1..T.
    """
    if params.variant not in (Variant.T2FN, Variant.TFN):
        raise ValueError("rank analysis needs a model with a fused tensor (t2fn or tfn)")
    if not seqs:
        raise ValueError("no sequences to analyse")
    als = als or AlsConfig()
    ranks = list(ranks) if ranks is not None else list(range(1, seqs[0].T + 1))
    todo = [RankJob(k, p, int(s)) for (k, p) in noise_cells(kinds, levels) for s in seeds]
    args = [(params, list(seqs), job, ranks, als) for job in todo]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            curves = list(pool.map(_run_rank_job, args))
    else:
        curves = [_run_rank_job(a) for a in args]
    return RankAnalysis(dict(zip(todo, curves)))


# ---------------------------------------------------------------------------
# prediction under imperfection


@dataclass(frozen=True)
class TrainJob:
    variant: str  # a Variant value or NOREG
    kind: str
    p: float
    lam: float
    seed: int

    @property
    def tag(self) -> str:
        return f"{self.variant}_{self.kind}_p{self.p:g}_lam{self.lam:g}_s{self.seed}"


@dataclass
class TrainOutcome:
    job: TrainJob
    accuracy: float
    valid_accuracy: float
    best_epoch: int
    status: str
    epochs: list = field(default_factory=list)
    params: ModelParams | None = None


def train_jobs(variants, kinds, levels, lambdas, seeds) -> list[TrainJob]:
    """Expand the grid; only ``t2fn`` sweeps lambda, everything else runs at 0."""
    out = set()
    for variant, (kind, p), seed in itertools.product(variants, noise_cells(kinds, levels), seeds):
        if variant == Variant.T2FN.value:
            lams = lambdas
        else:
            if variant != NOREG:
                Variant(variant)
            lams = [0.0]
        for lam in lams:
            out.add(TrainJob(variant, kind, float(p), float(lam), int(seed)))
    return sorted(out, key=_train_key)


_VARIANT_ORDER = {"t2fn": 0, NOREG: 1, "tfn": 2, "ef_lstm": 3, "lf_lstm": 4}


def _train_key(job: TrainJob):
    return (_VARIANT_ORDER.get(job.variant, 9), job.variant, _KIND_ORDER.get(job.kind, 9), job.p, job.lam, job.seed)


def run_train_job(job: TrainJob, split, cfg: TrainConfig, hidden_dims=(8, 8, 8)) -> TrainOutcome:
    """Train one grid cell and score it on the test split under the same noise."""
    variant = Variant.T2FN if job.variant == NOREG else Variant(job.variant)
    lam = 0.0 if job.variant == NOREG else job.lam
    noise = NoiseSpec(job.kind, job.p, job.seed)
    p0 = init_model(variant, split.dims, hidden_dims, seed=job.seed)
    try:
        res = train(p0, split.train, split.valid, replace(cfg, reg_weight=lam, seed=job.seed), noise=noise)
    except DivergenceError as exc:
        logger.warning("%s diverged: %s", job.tag, exc)
        return TrainOutcome(job, math.nan, math.nan, 0, "diverged")
    acc = evaluate(res.params, split.test, noise)
    best = res.history[res.best_epoch - 1]
    return TrainOutcome(job, acc, best.valid_accuracy, res.best_epoch, "ok", res.history, res.params)


def _run_train(args):
    return run_train_job(*args)


def prediction_grid(split, jobs_list: Sequence[TrainJob], cfg: TrainConfig, hidden_dims=(8, 8, 8), jobs: int = 1) -> list[TrainOutcome]:
    args = [(job, split, cfg, hidden_dims) for job in jobs_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_train, args))
    else:
        outcomes = [_run_train(a) for a in args]
    return sorted(outcomes, key=lambda o: _train_key(o.job))


def accuracy_rows(outcomes: Sequence[TrainOutcome]) -> list[dict]:
    return [
        {
            "variant": o.job.variant, "kind": o.job.kind, "p": o.job.p, "lambda": o.job.lam,
            "seed": o.job.seed, "accuracy": o.accuracy, "valid_accuracy": o.valid_accuracy,
            "best_epoch": o.best_epoch, "status": o.status,
        }
        for o in outcomes
    ]


def epoch_rows(outcomes: Sequence[TrainOutcome]) -> list[dict]:
    rows = []
    for o in outcomes:
        for m in o.epochs:
            rows.append({
                "variant": o.job.variant, "kind": o.job.kind, "p": o.job.p, "lambda": o.job.lam,
                "seed": o.job.seed, "epoch": m.epoch, "loss": m.loss, "bce": m.bce, "reg": m.reg,
                "train_accuracy": m.train_accuracy, "valid_accuracy": m.valid_accuracy,
            })
    return rows


def save_checkpoints(outcomes: Sequence[TrainOutcome], directory) -> list[Path]:
    directory = Path(directory)
    paths = []
    for o in outcomes:
        if o.params is None:
            continue
        path = directory / f"{o.job.tag}.npz"
        save_checkpoint(path, o.params, meta={
            "kind": o.job.kind, "p": o.job.p, "lambda": o.job.lam, "seed": o.job.seed,
            "train_variant": o.job.variant,
        })
        paths.append(path)
    return paths


def select_regularized(rows: Sequence[dict]) -> list[dict]:
    """Per (kind, p, seed), the ``t2fn`` row with lambda > 0 and best validation accuracy.

    Ties go to the smaller lambda. Rows may come from :func:`accuracy_rows` or
    from a parsed ``metrics.csv``.
    """
    best: dict = {}
    for row in rows:
        if row["variant"] != "t2fn" or float(row["lambda"]) <= 0 or row["status"] != "ok":
            continue
        key = (row["kind"], float(row["p"]), int(row["seed"]))
        cand = (float(row["valid_accuracy"]), -float(row["lambda"]))
        if key not in best or cand > best[key][0]:
            best[key] = (cand, row)
    return [best[k][1] for k in sorted(best)]


def mean_accuracy(rows: Sequence[dict], variant: str, kind: str, p: float, lam: float | None = None) -> float:
    vals = [
        float(r["accuracy"]) for r in rows
        if r["variant"] == variant and r["kind"] == kind and float(r["p"]) == p
        and (lam is None or float(r["lambda"]) == lam) and r["status"] == "ok"
    ]
    if not vals:
        raise KeyError(f"no rows for {variant} {kind} p={p} lambda={lam}")
    return float(np.mean(vals))
