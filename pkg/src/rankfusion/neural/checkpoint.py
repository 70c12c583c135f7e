"""Model checkpoints as versioned ``.npz`` containers.

Layout (every entry is a NumPy array inside one uncompressed zip):

``__format__``
    string ``"rankfusion-checkpoint"``
``__version__``
    int64 scalar, currently 1
``__variant__``
    string, one of ``t2fn``, ``tfn``, ``ef_lstm``, ``lf_lstm``
``__input_dims__`` / ``__hidden_dims__``
    int64 vectors
``<encoder>.W``, ``<encoder>.b``
    LSTM weights per encoder (``lang``/``visual``/``acoustic`` or ``early``)
``classifier.w``, ``classifier.b``
    linear head
``meta.<key>``
    optional free-form strings (training provenance)
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .model import ModelParams

FORMAT = "rankfusion-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    path = Path(path)
    entries = {
        "__format__": np.array(FORMAT),
        "__version__": np.array(VERSION, dtype=np.int64),
        "__variant__": np.array(params.variant.value),
        "__input_dims__": np.array(params.input_dims, dtype=np.int64),
        "__hidden_dims__": np.array(params.hidden_dims, dtype=np.int64),
    }
    entries.update(params.arrays())
    for k, v in (meta or {}).items():
        entries[f"meta.{k}"] = np.array(str(v))
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **entries)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    """Return the parameters and the ``meta`` strings stored at ``path``."""
    try:
        with np.load(path, allow_pickle=False) as z:
            entries = {k: z[k] for k in z.files}
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: not a readable checkpoint ({exc})") from None
    if str(entries.get("__format__", "")) != FORMAT:
        raise CheckpointError(f"{path}: missing or wrong format tag")
    version = int(entries["__version__"])
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arrays = {k: v for k, v in entries.items() if not k.startswith(("__", "meta."))}
    try:
        params = ModelParams.from_arrays(str(entries["__variant__"]), arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: inconsistent parameters ({exc})") from None
    if tuple(entries["__input_dims__"]) != params.input_dims or tuple(entries["__hidden_dims__"]) != params.hidden_dims:
        raise CheckpointError(f"{path}: recorded dims disagree with parameter shapes")
    meta = {k[len("meta."):]: str(v) for k, v in entries.items() if k.startswith("meta.")}
    return params, meta
