"""Patch batching, the SGD training loop, and slice-wise inference."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..data import crop_patch, sample_patch_origins, slice_stack
from ..errors import DimensionError, ValidationError
from ..losses import LossBreakdown, LossConfig, total_loss
from ..network import ModelState, forward
from ..sampling import TupleBatch, sample
from ..tensor_core import no_grad, poly_lr, sgd_step
from .config import TrainConfig

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iter", "lr", "ce", "metric_r", "metric_h", "metric_c", "total", "tuple_counts")
_STRATEGY_COLUMN = {"random": "metric_r", "focal_hard": "metric_h", "contour": "metric_c"}


class PatchSource:
    """Fixed pool of patch origins per image, visited in a seeded shuffled order.

    Image ``i`` gets ``per_image`` origins from its own RNG stream, so the pool
    does not depend on how many other images there are. Batches walk through
    successive seeded permutations of the pool.
    """

    def __init__(
        self,
        volumes: Sequence[np.ndarray],
        labels: Sequence[np.ndarray],
        size: int,
        channels: int,
        per_image: int = 500,
        seed: int = 0,
    ) -> None:
        if len(volumes) != len(labels) or not volumes:
            raise ValidationError("need one label volume per image and at least one image")
        self.volumes = list(volumes)
        self.labels = list(labels)
        self.size = size
        self.channels = channels
        chunks = []
        for i, vol in enumerate(self.volumes):
            if vol.shape != self.labels[i].shape:
                raise ValidationError(f"image {i}: label shape {self.labels[i].shape} != volume {vol.shape}")
            rng = np.random.default_rng([seed, i])
            origins = sample_patch_origins(vol.shape, per_image, size, channels, rng)
            chunks.append(np.concatenate([np.full((per_image, 1), i), origins], axis=1))
        self.origins = np.concatenate(chunks)
        self.seed = seed
        self._perms: dict[int, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.origins)

    def _perm(self, epoch: int) -> np.ndarray:
        if epoch not in self._perms:
            self._perms = {epoch: np.random.default_rng([self.seed, 1 << 20, epoch]).permutation(len(self))}
        return self._perms[epoch]

    def batch(self, iteration: int, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        inputs = np.empty((batch_size, self.channels, self.size, self.size), dtype=np.float32)
        labels = np.empty((batch_size, self.size, self.size), dtype=np.uint8)
        total = len(self)
        for b in range(batch_size):
            pos = iteration * batch_size + b
            v, z, y, x = self.origins[self._perm(pos // total)[pos % total]]
            inp, lab = crop_patch(self.volumes[v], self.labels[v], (z, y, x), self.size, self.channels)
            inputs[b] = inp
            labels[b] = lab
        return inputs, labels


def sample_tuples(
    loss_cfg: LossConfig, labels: np.ndarray, prob: np.ndarray, seed: int, iteration: int
) -> list[list[TupleBatch]]:
    """Run every configured sampler on every image of the batch."""
    out = []
    for s_idx, cfg in enumerate(loss_cfg.strategies):
        rng = np.random.default_rng([seed, iteration, s_idx])
        out.append([sample(cfg, labels[b], prob[b], rng, image_index=b) for b in range(len(labels))])
    return out


def training_step(
    model: ModelState,
    inputs: np.ndarray,
    labels: np.ndarray,
    loss_cfg: LossConfig,
    lr: float,
    sampler_seed: int,
    iteration: int,
) -> LossBreakdown:
    sep = loss_cfg.sep_mode
    out = forward(model, inputs, sep=sep)
    tuples = sample_tuples(loss_cfg, labels, out.prob, sampler_seed, iteration)
    parts = total_loss(out.logits, labels, out.embedding, tuples, loss_cfg, sep=sep)
    model.zero_grad()
    parts.total.backward()
    trainable = model.trainable()
    sgd_step([p.tensor for p in trainable], None, lr)
    return parts


def _log_row(iteration: int, lr: float, parts: LossBreakdown, loss_cfg: LossConfig) -> dict:
    row = {"iter": iteration, "lr": lr, "ce": float(parts.ce.data), "metric_r": "", "metric_h": "", "metric_c": ""}
    for cfg, value in zip(loss_cfg.strategies, parts.metric_per_strategy):
        row[_STRATEGY_COLUMN[cfg.strategy]] = float(value.data)
    row["total"] = float(parts.total.data)
    row["tuple_counts"] = ";".join(str(c) for c in parts.tuple_counts)
    return row


@dataclass
class TrainResult:
    log: list[dict]
    best_iter: int
    best_score: float | None
    step_times: list[float] = field(default_factory=list)


def train_network(
    model: ModelState,
    source: PatchSource,
    loss_cfg: LossConfig,
    train_cfg: TrainConfig,
    validate: Callable[[ModelState], float] | None = None,
    log_path: str | Path | None = None,
    step_hook: Callable[[int, LossBreakdown], None] | None = None,
) -> TrainResult:
    """Train ``model`` in place with SGD and a poly learning-rate schedule.

    When ``validate`` is given it is called every ``val_interval`` iterations
    and after the last one; the parameters with the best score are restored at
    the end.
    """
    loss_cfg.validate()
    train_cfg.validate()
    model.train()
    rows: list[dict] = []
    times: list[float] = []
    best_score: float | None = None
    best_iter = train_cfg.max_iters - 1
    best_state: dict[str, np.ndarray] | None = None
    sampler_seed = train_cfg.seed + 104729
    for it in range(train_cfg.max_iters):
        lr = poly_lr(it, train_cfg.max_iters, train_cfg.base_lr, train_cfg.poly_power)
        inputs, labels = source.batch(it, train_cfg.batch_size)
        t0 = time.perf_counter()
        parts = training_step(model, inputs, labels, loss_cfg, lr, sampler_seed, it)
        times.append(time.perf_counter() - t0)
        rows.append(_log_row(it, lr, parts, loss_cfg))
        if step_hook is not None:
            step_hook(it, parts)
        if not np.isfinite(rows[-1]["total"]):
            raise FloatingPointError(f"loss became non-finite at iteration {it}")
        last = it == train_cfg.max_iters - 1
        if validate is not None and ((train_cfg.val_interval and (it + 1) % train_cfg.val_interval == 0) or last):
            score = float(validate(model))
            model.train()
            log.info("iter %d: validation score %.4f", it, score)
            if best_score is None or score > best_score:
                best_score, best_iter = score, it
                best_state = {k: v.copy() for k, v in model.state_arrays().items()}
        if it % 50 == 0 or last:
            log.info("iter %d lr %.5f ce %.4f total %.4f", it, lr, rows[-1]["ce"], rows[-1]["total"])
    if best_state is not None:
        model.load_state_arrays(best_state)
    if log_path is not None:
        write_training_log(rows, log_path)
    return TrainResult(rows, best_iter, best_score, times)


def write_training_log(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_training_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def infer(model: ModelState, region: np.ndarray, batch: int = 8) -> np.ndarray:
    """Segment a ``(Z, Y, X)`` region slice by slice; returns a uint8 mask of the same shape."""
    region = np.asarray(region)
    if region.ndim != 3:
        raise DimensionError(f"infer: expected a (Z, Y, X) region, got shape {region.shape}")
    factor = 2**model.spec.levels
    if region.shape[1] % factor or region.shape[2] % factor:
        raise DimensionError(
            f"infer: in-plane size {region.shape[1]}x{region.shape[2]} must be divisible by {factor}; "
            f"pad the region (see infer_padded)"
        )
    channels = model.spec.in_channels
    previous = model.mode
    model.eval()
    out = np.empty(region.shape, dtype=np.uint8)
    try:
        with no_grad():
            for start in range(0, region.shape[0], batch):
                zs = range(start, min(start + batch, region.shape[0]))
                stack = np.stack([slice_stack(region, z, channels) for z in zs])
                logits = forward(model, stack).logits.data
                out[start : start + len(zs)] = (logits[:, 1] > logits[:, 0]).astype(np.uint8)
    finally:
        model.mode = previous
    return out


def infer_padded(model: ModelState, volume: np.ndarray, batch: int = 8) -> np.ndarray:
    """:func:`infer` on an arbitrary-size volume, edge-padding in-plane as needed."""
    factor = 2**model.spec.levels
    _, ny, nx = volume.shape
    py, px = (-ny) % factor, (-nx) % factor
    padded = np.pad(volume, ((0, 0), (0, py), (0, px)), mode="edge") if py or px else volume
    return infer(model, padded, batch)[:, :ny, :nx]
