"""Imperfection models: independent entry drops and whole time-step drops.

A dropped entry is set to 0 and the sequence keeps its length; the model
never sees which entries were dropped.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import MODALITIES, MultimodalSequence


class NoiseKind(str, Enum):
    CLEAN = "clean"
    RANDOM_DROP = "random_drop"
    STRUCTURED_DROP = "structured_drop"


NOISE_LEVELS = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class NoiseSpec:
    kind: NoiseKind = NoiseKind.CLEAN
    p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if not 0.0 <= float(self.p) <= 1.0:
            raise ValueError(f"drop probability must lie in [0, 1], got {self.p}")
        object.__setattr__(self, "p", float(self.p))

    def derive(self, *key: int) -> "NoiseSpec":
        """Same kind and level with a seed derived from ``(seed, *key)``."""
        state = np.random.SeedSequence([self.seed, *key]).generate_state(1, np.uint64)[0]
        return NoiseSpec(self.kind, self.p, int(state))


def drop_masks(dims_T: tuple, n: NoiseSpec) -> dict:
    """Boolean drop masks (True = dropped) for a sequence of the given shape.

    ``dims_T`` is ``(T, (D_l, D_v, D_a))``.
    """
    T, dims = dims_T
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(n.seed)))
    masks = {}
    for name, d in zip(MODALITIES, dims):
        if n.kind is NoiseKind.RANDOM_DROP:
            masks[name] = rng.random((T, d)) < n.p
        elif n.kind is NoiseKind.STRUCTURED_DROP:
            steps = rng.random(T) < n.p
            masks[name] = np.repeat(steps[:, None], d, axis=1)
        else:
            masks[name] = np.zeros((T, d), dtype=bool)
    return masks


def apply_noise(s: MultimodalSequence, n: NoiseSpec) -> MultimodalSequence:
    """Return a copy of ``s`` with entries zeroed according to ``n``.

    ``random_drop`` zeroes each scalar entry of each modality independently
    with probability ``n.p``; ``structured_drop`` zeroes, independently for
    each modality, entire time steps with probability ``n.p``. Labels are
    untouched and the drop masks are attached to the result.
    """
    if n.kind is NoiseKind.CLEAN or n.p == 0.0:
        masks = {name: np.zeros(f.shape, dtype=bool) for name, f in zip(MODALITIES, s.features)}
        return MultimodalSequence(*(f.copy() for f in s.features), label=s.label, masks=masks)
    masks = drop_masks((s.T, s.dims), n)
    feats = [np.where(masks[name], 0.0, f) for name, f in zip(MODALITIES, s.features)]
    return MultimodalSequence(*feats, label=s.label, masks=masks)
