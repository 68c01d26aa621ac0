"""Checkpoints: a key-value manifest plus one TBF1 file per tensor."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import tbf
from .config import format_kv, read_kv
from .errors import FormatError


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict) -> Path:
    """Write ``path`` (manifest) and ``<stem>.<name>.tbf`` next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = dict(meta)
    for name in sorted(arrays):
        fname = f"{path.stem}.{name}.tbf"
        tbf.save(path.parent / fname, arrays[name])
        entries[f"tensor.{name}"] = fname
    path.write_text(format_kv(entries))
    return path


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    path = Path(path)
    entries = read_kv(path)
    meta, arrays = {}, {}
    for key, value in entries.items():
        if key.startswith("tensor."):
            f = path.parent / value
            if not f.is_file():
                raise FormatError(f"checkpoint tensor file missing: {f}")
            arrays[key[len("tensor.") :]] = tbf.load(f)
        else:
            meta[key] = value
    return meta, arrays
