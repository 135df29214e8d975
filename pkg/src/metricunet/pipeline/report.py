"""Qualitative overlays (binary PGM) and plain-text summaries of result CSVs."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..sampling import contour_map

GT_LEVEL = 255
PRED_LEVEL = 0
BOTH_LEVEL = 128


def write_pgm(path: str | Path, image: np.ndarray) -> None:
    """Binary (P5) 8-bit PGM."""
    image = np.asarray(image, dtype=np.uint8)
    if image.ndim != 2:
        raise ValueError(f"PGM images are 2-d, got shape {image.shape}")
    h, w = image.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def overlay(image: np.ndarray, gt: np.ndarray, pred: np.ndarray) -> np.ndarray:
    """Grey image (levels 16-224) with ground-truth contour white, predicted black, shared mid-grey."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    out = (16 + scaled * 208).round().astype(np.uint8)
    g = contour_map(np.asarray(gt, dtype=np.uint8))
    p = contour_map(np.asarray(pred, dtype=np.uint8))
    out[g] = GT_LEVEL
    out[p] = PRED_LEVEL
    out[g & p] = BOTH_LEVEL
    return out


def write_overlays(
    out_dir: str | Path, case_id: str, volume: np.ndarray, gt: np.ndarray, pred: np.ndarray, n_slices: int = 3
) -> list[Path]:
    """Overlays for ``n_slices`` evenly spaced slices through the ground-truth extent."""
    zs = np.flatnonzero(gt.any(axis=(1, 2)))
    if zs.size == 0:
        zs = np.arange(volume.shape[0])
    picks = np.unique(np.linspace(zs[0], zs[-1], n_slices + 2)[1:-1].round().astype(int))
    paths = []
    for z in picks:
        path = Path(out_dir) / f"{case_id}_z{z:03d}.pgm"
        write_pgm(path, overlay(volume[z], gt[z], pred[z]))
        paths.append(path)
    return paths


def summarize_csv(path: str | Path) -> str:
    """Fixed-width text rendering of a CSV file."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        return ""
    widths = [max(len(r[i]) if i < len(r) else 0 for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(cell.ljust(w) for cell, w in zip(r, widths)).rstrip() for r in rows)
