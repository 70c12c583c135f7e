"""Multimodal sequences, a low-rank synthetic generator, and MMSEQ file IO.

MMSEQ is a line-oriented UTF-8 text format::

    MMSEQ 1 <n_sequences> [<n_train> <n_valid> <n_test>]
    SEQ <T> <D_l> <D_v> <D_a> <label>
    <T lines of D_l numbers>      # language rows
    <T lines of D_v numbers>      # visual rows
    <T lines of D_a numbers>      # acoustic rows
    SEQ ...

Numbers are written with Python's shortest round-trip ``repr`` so a
write/read cycle is bit-exact. The optional split counts on the header
partition the sequences, in file order, into train/valid/test.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

MODALITIES = ("lang", "visual", "acoustic")
LABEL_RANGE = 3.0
MAGIC = "MMSEQ"
FORMAT_VERSION = 1


class MmseqParseError(ValueError):
    """Malformed MMSEQ content; ``lineno`` is 1-based."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


@dataclass(eq=False)
class MultimodalSequence:
    """Aligned language/visual/acoustic feature rows with a sentiment label.

    ``masks`` maps modality name to a boolean ``T x D`` array marking entries
    that a noise model dropped. It is diagnostic only and never fed to a model.
    """

    lang: np.ndarray
    visual: np.ndarray
    acoustic: np.ndarray
    label: float
    masks: dict | None = field(default=None, repr=False)

    def __post_init__(self):
        mats = []
        for name in MODALITIES:
            m = np.asarray(getattr(self, name), dtype=np.float64)
            if m.ndim != 2:
                raise ValueError(f"{name} must be a T x D matrix, got shape {m.shape}")
            if not np.all(np.isfinite(m)):
                raise ValueError(f"{name} has non-finite features")
            mats.append(m)
            object.__setattr__(self, name, m)
        Ts = {m.shape[0] for m in mats}
        if len(Ts) != 1:
            raise ValueError(f"modalities disagree on sequence length: {sorted(Ts)}")
        if mats[0].shape[0] < 1:
            raise ValueError("sequence length must be positive")
        self.label = float(self.label)
        if not (math.isfinite(self.label) and abs(self.label) <= LABEL_RANGE):
            raise ValueError(f"label {self.label} outside [-3, 3]")

    @property
    def T(self) -> int:
        return self.lang.shape[0]

    @property
    def dims(self) -> tuple:
        return tuple(getattr(self, m).shape[1] for m in MODALITIES)

    @property
    def features(self) -> tuple:
        return tuple(getattr(self, m) for m in MODALITIES)

    @property
    def positive(self) -> bool:
        return self.label >= 0.0

    def same_as(self, other: "MultimodalSequence") -> bool:
        """Bit-level equality of features and label (masks ignored)."""
        return (
            self.label == other.label
            and all(np.array_equal(a, b) for a, b in zip(self.features, other.features))
        )


@dataclass
class DatasetSplit:
    train: list
    valid: list
    test: list

    def __post_init__(self):
        for name in ("train", "valid", "test"):
            if not getattr(self, name):
                raise ValueError(f"{name} split is empty")

    def __iter__(self) -> Iterator[list]:
        return iter((self.train, self.valid, self.test))

    @property
    def dims(self) -> tuple:
        return self.train[0].dims

    def all(self) -> list:
        return [*self.train, *self.valid, *self.test]


@dataclass(frozen=True)
class SynthSpec:
    """Parameters of the synthetic low-rank multimodal generator.

    Each sequence follows a latent random walk in ``latent_rank`` dimensions;
    every modality is a fixed linear image of the walk plus small Gaussian
    observation noise. ``emission_scale`` sets the feature magnitude; the
    default drives the LSTM gates into their saturating range. The label is
    a squashed linear functional of the time-averaged latent state, kept at
    least ``label_margin`` away from 0.
    """

    n_train: int = 300
    n_valid: int = 50
    n_test: int = 100
    T: int = 20
    dims: tuple = (8, 8, 8)
    latent_rank: int = 3
    label_margin: float = 0.5
    seed: int = 0
    walk_step: float = 0.1
    obs_noise: float = 0.01
    emission_scale: float = 3.0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        object.__setattr__(self, "dims", dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ValueError(f"need three positive feature dims, got {dims}")
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            raise ValueError("every split needs at least one sequence")
        if self.T < 1:
            raise ValueError("T must be positive")
        if not 1 <= self.latent_rank <= min(dims):
            raise ValueError(
                f"latent_rank must satisfy 1 <= k <= min(D_l, D_v, D_a) = {min(dims)}, "
                f"got k={self.latent_rank}"
            )
        if not 0 < self.label_margin < LABEL_RANGE:
            raise ValueError("label_margin must lie in (0, 3)")
        if self.walk_step < 0 or self.obs_noise < 0:
            raise ValueError("walk_step and obs_noise must be nonnegative")
        if not self.emission_scale > 0:
            raise ValueError("emission_scale must be positive")


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(list(key))))


def generate(spec: SynthSpec = SynthSpec(), max_attempts_per_sequence: int = 200) -> DatasetSplit:
    """Draw a train/valid/test split from the latent low-rank model.

    Raises
    ------
    RuntimeError
        If rejection sampling cannot fill a balanced split within the
        attempt budget (e.g. a margin that is almost never met).
    """
    k = spec.latent_rank
    struct = _rng(spec.seed, 0)
    maps = [spec.emission_scale * struct.standard_normal((d, k)) / np.sqrt(k) for d in spec.dims]
    direction = struct.standard_normal(k)
    direction /= np.linalg.norm(direction)
    # 3 * tanh(s) >= margin  <=>  |s| >= atanh(margin / 3)
    s_min = math.atanh(spec.label_margin / LABEL_RANGE)

    rng = _rng(spec.seed, 1)
    splits = []
    for n in (spec.n_train, spec.n_valid, spec.n_test):
        want = {True: (n + 1) // 2, False: n // 2}
        seqs: list[MultimodalSequence] = []
        attempts = 0
        while len(seqs) < n:
            attempts += 1
            if attempts > max_attempts_per_sequence * n:
                raise RuntimeError(
                    f"could not reach label margin {spec.label_margin} with balanced "
                    f"classes after {attempts - 1} draws"
                )
            z = rng.standard_normal(k) + np.cumsum(
                spec.walk_step * rng.standard_normal((spec.T, k)), axis=0
            )
            obs = [z @ W.T + spec.obs_noise * rng.standard_normal((spec.T, W.shape[0])) for W in maps]
            s = float(direction @ z.mean(axis=0))
            if abs(s) < s_min:
                continue
            label = LABEL_RANGE * math.tanh(s)
            positive = label >= 0
            if want[positive] == 0:
                continue
            want[positive] -= 1
            seqs.append(MultimodalSequence(*obs, label=label))
        splits.append(seqs)
    return DatasetSplit(*splits)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_dataset(path, split: DatasetSplit) -> None:
    """Write ``split`` as MMSEQ, atomically (temp file + rename)."""
    path = Path(path)
    seqs = split.all()
    lines = [f"{MAGIC} {FORMAT_VERSION} {len(seqs)} {len(split.train)} {len(split.valid)} {len(split.test)}"]
    for s in seqs:
        dl, dv, da = s.dims
        lines.append(f"SEQ {s.T} {dl} {dv} {da} {_fmt(s.label)}")
        for m in s.features:
            lines.extend(" ".join(_fmt(v) for v in row) for row in m)
    _atomic_write_text(path, "\n".join(lines) + "\n")


def _atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _ints(tokens, lineno, what):
    try:
        return [int(t) for t in tokens]
    except ValueError:
        raise MmseqParseError(lineno, f"expected integers in {what}, got {' '.join(tokens)!r}") from None


def read_dataset(path) -> DatasetSplit:
    """Parse an MMSEQ file.

    Files without split counts on the header are divided in file order with
    the default 300:50:100 proportions (each split gets at least one
    sequence).
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise MmseqParseError(1, "empty file, expected MMSEQ header")

    head = lines[0].split()
    if len(head) not in (3, 6) or head[0] != MAGIC:
        raise MmseqParseError(1, f"bad header {lines[0]!r}, expected 'MMSEQ 1 <n> [<train> <valid> <test>]'")
    version, n, *counts = _ints(head[1:], 1, "header")
    if version != FORMAT_VERSION:
        raise MmseqParseError(1, f"unsupported MMSEQ version {version}")
    if n < 3:
        raise MmseqParseError(1, f"need at least 3 sequences to form splits, header says {n}")
    if counts and (sum(counts) != n or min(counts) < 1):
        raise MmseqParseError(1, f"split counts {counts} do not partition {n} sequences")

    seqs = []
    pos = 1
    for index in range(n):
        if pos >= len(lines):
            raise MmseqParseError(pos + 1, f"truncated file: expected SEQ block {index + 1} of {n}")
        lineno = pos + 1
        tok = lines[pos].split()
        if len(tok) != 6 or tok[0] != "SEQ":
            raise MmseqParseError(lineno, f"expected 'SEQ <T> <D_l> <D_v> <D_a> <label>', got {lines[pos]!r}")
        T, *dims = _ints(tok[1:5], lineno, "SEQ header")
        try:
            label = float(tok[5])
        except ValueError:
            raise MmseqParseError(lineno, f"bad label {tok[5]!r}") from None
        if T < 1 or min(dims) < 1:
            raise MmseqParseError(lineno, f"SEQ block {index + 1}: T and dims must be positive")
        pos += 1
        mats = []
        for name, d in zip(MODALITIES, dims):
            rows = []
            for t in range(T):
                if pos >= len(lines):
                    raise MmseqParseError(
                        pos + 1,
                        f"truncated file in SEQ block {index + 1} (header line {lineno}): "
                        f"{name} has {t} of {T} rows",
                    )
                parts = lines[pos].split()
                if not parts or parts[0] == "SEQ":
                    raise MmseqParseError(
                        pos + 1,
                        f"SEQ block {index + 1} (header line {lineno}): {name} has {t} rows, header says T={T}",
                    )
                if len(parts) != d:
                    raise MmseqParseError(
                        pos + 1,
                        f"SEQ block {index + 1}: {name} row has {len(parts)} values, expected {d}",
                    )
                try:
                    rows.append([float(v) for v in parts])
                except ValueError:
                    raise MmseqParseError(pos + 1, f"non-numeric value in {name} row") from None
                pos += 1
            mats.append(np.array(rows, dtype=np.float64))
        try:
            seqs.append(MultimodalSequence(*mats, label=label))
        except ValueError as exc:
            raise MmseqParseError(lineno, f"SEQ block {index + 1}: {exc}") from None
    if pos != len(lines):
        raise MmseqParseError(pos + 1, f"unexpected content after {n} sequences")

    if not counts:
        n_valid = max(1, round(n * 50 / 450))
        n_test = max(1, round(n * 100 / 450))
        counts = [n - n_valid - n_test, n_valid, n_test]
    a, b, _ = counts
    return DatasetSplit(seqs[:a], seqs[a:a + b], seqs[a + b:])
