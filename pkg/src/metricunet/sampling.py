"""Online voxel tuple sampling.

Each sampler turns one image's label map (and, for focal hard sampling, the
predicted foreground probability) into a :class:`TupleBatch`: ``k`` anchors
drawn without replacement from an anchor pool, each paired with ``m``
positives and ``m`` negatives drawn with replacement. Anchors and positives
always carry label 1, negatives label 0. Sampling has no learnable state.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ValidationError

STRATEGIES = ("random", "focal_hard", "contour")


@dataclass
class SamplingConfig:
    strategy: str = "random"
    k: int = 20
    m: int = 1
    tau: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown sampler {self.strategy!r}; expected one of {STRATEGIES}")
        if self.k < 0:
            raise ValidationError(f"k must be >= 0, got {self.k}")
        if self.m < 1:
            raise ValidationError(f"m must be >= 1, got {self.m}")
        if not 0.0 < self.tau < 1.0:
            raise ValidationError(f"tau must lie in (0, 1), got {self.tau}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> SamplingConfig:
        cfg = cls(**d)
        cfg.validate()
        return cfg


def _empty_coords(*lead: int) -> np.ndarray:
    return np.zeros((*lead, 2), dtype=np.intp)


@dataclass
class TupleBatch:
    """Sampled coordinates for one image.

    ``anchors`` is ``(K, 2)``; ``positives`` and ``negatives`` are ``(K, m, 2)``
    arrays of (row, col) indices into the image's feature map.
    """

    image_index: int
    anchors: np.ndarray = field(default_factory=lambda: _empty_coords(0))
    positives: np.ndarray = field(default_factory=lambda: _empty_coords(0, 1))
    negatives: np.ndarray = field(default_factory=lambda: _empty_coords(0, 1))
    strategy: str = ""

    def __len__(self) -> int:
        return len(self.anchors)

    @property
    def m(self) -> int:
        return self.positives.shape[1]

    def is_empty(self) -> bool:
        return len(self.anchors) == 0

    def check_labels(self, labels: np.ndarray) -> bool:
        """True when every anchor/positive has label 1 and every negative label 0."""
        if self.is_empty():
            return True
        a = labels[self.anchors[:, 0], self.anchors[:, 1]]
        p = labels[self.positives[..., 0], self.positives[..., 1]]
        n = labels[self.negatives[..., 0], self.negatives[..., 1]]
        return bool((a == 1).all() and (p == 1).all() and (n == 0).all())


def _check_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValidationError(f"label map must be 2-d, got shape {labels.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("label map must be binary")
    return labels


def _rng(cfg: SamplingConfig, rng: np.random.Generator | None) -> np.random.Generator:
    return rng if rng is not None else np.random.default_rng(cfg.seed)


def _draw(
    anchor_pool: np.ndarray,
    positive_pool: np.ndarray,
    negative_pool: np.ndarray,
    shape: tuple[int, int],
    cfg: SamplingConfig,
    rng: np.random.Generator,
    image_index: int,
) -> TupleBatch:
    """Draw a batch from flat-index pools (each sorted ascending)."""
    m = cfg.m
    empty = TupleBatch(image_index, _empty_coords(0), _empty_coords(0, m), _empty_coords(0, m), cfg.strategy)
    if cfg.k == 0 or anchor_pool.size == 0 or negative_pool.size == 0:
        return empty
    n_anchor = min(cfg.k, anchor_pool.size)
    anchors = rng.choice(anchor_pool, size=n_anchor, replace=False)

    # Positives exclude the anchor itself; an anchor alone in its pool pairs with itself.
    pos = np.empty((n_anchor, m), dtype=np.intp)
    slot = np.searchsorted(positive_pool, anchors)
    in_pool = (slot < positive_pool.size) & (positive_pool[np.minimum(slot, positive_pool.size - 1)] == anchors)
    for a in range(n_anchor):
        size = positive_pool.size - int(in_pool[a])
        if size == 0:
            pos[a] = anchors[a]
            continue
        r = rng.integers(0, size, size=m)
        if in_pool[a]:
            r = r + (r >= slot[a])
        pos[a] = positive_pool[r]
    neg = negative_pool[rng.integers(0, negative_pool.size, size=(n_anchor, m))]

    def coords(flat: np.ndarray) -> np.ndarray:
        return np.stack(np.unravel_index(flat, shape), axis=-1).astype(np.intp)

    return TupleBatch(image_index, coords(anchors), coords(pos), coords(neg), cfg.strategy)


def _pools(labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    flat = labels.reshape(-1)
    return np.flatnonzero(flat == 1), np.flatnonzero(flat == 0)


def sample_random(
    labels: np.ndarray,
    cfg: SamplingConfig,
    rng: np.random.Generator | None = None,
    image_index: int = 0,
) -> TupleBatch:
    """Anchors and positives uniformly from foreground voxels, negatives from background."""
    labels = _check_binary(labels)
    positives, negatives = _pools(labels)
    return _draw(positives, positives, negatives, labels.shape, cfg, _rng(cfg, rng), image_index)


def hard_sample_mask(prob: np.ndarray, labels: np.ndarray, tau: float = 0.1) -> np.ndarray:
    """Binary map of voxels whose prediction error ``|prob - label|`` exceeds ``tau``."""
    prob = np.asarray(prob)
    labels = np.asarray(labels)
    if prob.shape != labels.shape:
        raise ValidationError(f"prob shape {prob.shape} != labels shape {labels.shape}")
    if prob.size and (np.nanmin(prob) < 0.0 or np.nanmax(prob) > 1.0 or np.isnan(prob).any()):
        raise ValidationError("prob must lie in [0, 1]")
    return (np.abs(prob - labels) > tau).astype(np.uint8)


def sample_focal_hard(
    prob: np.ndarray,
    labels: np.ndarray,
    cfg: SamplingConfig,
    rng: np.random.Generator | None = None,
    image_index: int = 0,
) -> TupleBatch:
    """Anchors from mispredicted foreground voxels; partners as in :func:`sample_random`."""
    labels = _check_binary(labels)
    hard = hard_sample_mask(prob, labels, cfg.tau)
    anchor_pool = np.flatnonzero((hard.reshape(-1) == 1) & (labels.reshape(-1) == 1))
    positives, negatives = _pools(labels)
    return _draw(anchor_pool, positives, negatives, labels.shape, cfg, _rng(cfg, rng), image_index)


def contour_map(labels: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 4-neighbour in the background.

    Voxels outside the image count as background.
    """
    labels = _check_binary(labels)
    fg = labels.astype(bool)
    padded = np.pad(fg, 1, constant_values=False)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    return fg & ~interior


def extract_contour(labels: np.ndarray) -> set[tuple[int, int]]:
    rows, cols = np.nonzero(contour_map(labels))
    return set(zip(rows.tolist(), cols.tolist()))


def sample_contour(
    labels: np.ndarray,
    cfg: SamplingConfig,
    rng: np.random.Generator | None = None,
    image_index: int = 0,
) -> TupleBatch:
    """Anchors and positives from the foreground contour, negatives from background."""
    labels = _check_binary(labels)
    contour = np.flatnonzero(contour_map(labels).reshape(-1))
    _, negatives = _pools(labels)
    return _draw(contour, contour, negatives, labels.shape, cfg, _rng(cfg, rng), image_index)


def sample(
    cfg: SamplingConfig,
    labels: np.ndarray,
    prob: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
    image_index: int = 0,
) -> TupleBatch:
    """Dispatch to the sampler named by ``cfg.strategy``."""
    cfg.validate()
    if cfg.strategy == "random":
        return sample_random(labels, cfg, rng, image_index)
    if cfg.strategy == "contour":
        return sample_contour(labels, cfg, rng, image_index)
    if prob is None:
        raise ValidationError("focal_hard sampling needs the predicted probability map")
    return sample_focal_hard(prob, labels, cfg, rng, image_index)


def write_tuples_csv(batches: Iterable[TupleBatch], path: str | Path) -> None:
    """Debug dump: one row per sampled coordinate (image_index, i, j, role)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_index", "i", "j", "role"])
        for b in batches:
            for a in range(len(b)):
                writer.writerow([b.image_index, *b.anchors[a].tolist(), "anchor"])
                for p in b.positives[a]:
                    writer.writerow([b.image_index, *p.tolist(), "positive"])
                for n in b.negatives[a]:
                    writer.writerow([b.image_index, *n.tolist(), "negative"])
