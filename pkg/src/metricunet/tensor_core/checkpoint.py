"""Checkpoint container.

A checkpoint is a numpy ``.npz`` archive: one member per parameter, keyed by
its UTF-8 name and holding little-endian float32 data with its shape, plus an
integer ``__format_version__`` member.
"""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
_VERSION_KEY = "__format_version__"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray]) -> None:
    payload = {name: np.asarray(a).astype("<f4") for name, a in arrays.items()}
    if _VERSION_KEY in payload:
        raise ValueError(f"parameter name {_VERSION_KEY!r} is reserved")
    payload[_VERSION_KEY] = np.array(FORMAT_VERSION, dtype="<i4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(Path(path), allow_pickle=False) as archive:
        if _VERSION_KEY not in archive.files:
            raise ValueError(f"{path}: missing format version")
        version = int(archive[_VERSION_KEY])
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint format version {version}")
        return {name: archive[name] for name in archive.files if name != _VERSION_KEY}
