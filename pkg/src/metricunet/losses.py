"""Voxel-metric loss, cross-entropy, and their weighted multi-task sum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .network import ModelState, head_parameter_names, trunk_parameter_names
from .sampling import SamplingConfig, TupleBatch
from .tensor_core import Tensor, add, scale, softmax_cross_entropy


@dataclass
class LossConfig:
    sigma: float = 0.7
    epsilon: float = 0.01
    beta: float = 0.1
    lam: float = 0.01
    strategies: list[SamplingConfig] = field(default_factory=list)
    sep_mode: bool = False
    use_pair_term: bool = True

    def validate(self) -> None:
        if not self.sigma > 0:
            raise ValidationError(f"sigma must be > 0, got {self.sigma}")
        if self.epsilon < 0 or self.beta < 0 or self.lam < 0:
            raise ValidationError("epsilon, beta and lambda must be non-negative")
        for s in self.strategies:
            s.validate()

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "epsilon": self.epsilon,
            "beta": self.beta,
            "lambda": self.lam,
            "strategies": [s.to_dict() for s in self.strategies],
            "sep_mode": self.sep_mode,
            "use_pair_term": self.use_pair_term,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LossConfig:
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        d["strategies"] = [SamplingConfig.from_dict(s) for s in d.get("strategies", [])]
        cfg = cls(**d)
        cfg.validate()
        return cfg


@dataclass
class LossBreakdown:
    ce: Tensor
    metric_per_strategy: list[Tensor]
    tuple_counts: list[int]
    total: Tensor
    sep: bool = False

    def values(self) -> dict[str, float]:
        return {
            "ce": float(self.ce.data),
            "metric": [float(m.data) for m in self.metric_per_strategy],
            "total": float(self.total.data),
        }


def _gather_indices(
    batches: Sequence[TupleBatch], n: int, h: int, w: int
) -> tuple[np.ndarray, ...]:
    """Flatten tuple batches into index arrays.

    Returns (triplet anchor, triplet positive, triplet negative, pair anchor,
    pair positive), each an array of flat indices into an ``(N*H*W,)`` grid.
    Every anchor forms ``m * m`` triplets (each positive against each
    negative) and ``m`` pairs.
    """
    ta, tp, tn, pa, pp = [], [], [], [], []
    for b in batches:
        if b.is_empty():
            continue
        if not 0 <= b.image_index < n:
            raise IndexError(f"tuple batch image_index {b.image_index} outside batch of {n}")
        for role, arr in (("anchor", b.anchors), ("positive", b.positives), ("negative", b.negatives)):
            bad = (arr[..., 0] < 0) | (arr[..., 0] >= h) | (arr[..., 1] < 0) | (arr[..., 1] >= w)
            if bad.any():
                pos = np.argwhere(bad)[0]
                raise IndexError(
                    f"{role} coordinate {arr[tuple(pos)].tolist()} of tuple {int(pos[0])} "
                    f"(image {b.image_index}) outside {h}x{w}"
                )
        base = b.image_index * h * w
        a = base + b.anchors[:, 0] * w + b.anchors[:, 1]
        p = base + b.positives[..., 0] * w + b.positives[..., 1]
        q = base + b.negatives[..., 0] * w + b.negatives[..., 1]
        m = p.shape[1]
        ta.append(np.repeat(a, m * m))
        tp.append(np.repeat(p, m, axis=1).reshape(-1))
        tn.append(np.tile(q, (1, m)).reshape(-1))
        pa.append(np.repeat(a, m))
        pp.append(p.reshape(-1))
    if not ta:
        empty = np.zeros(0, dtype=np.intp)
        return empty, empty, empty, empty, empty
    return tuple(np.concatenate(x) for x in (ta, tp, tn, pa, pp))


def metric_loss(
    embedding: Tensor,
    tuples: Sequence[TupleBatch],
    sigma: float = 0.7,
    epsilon: float = 0.01,
    beta: float = 0.1,
    use_pair_term: bool = True,
) -> Tensor:
    """Hinged triplet loss plus optional hinged positive-pair loss.

    ``mean_t max(0, |a-p|^2 - |a-n|^2 + sigma)`` over triplets, plus
    ``beta * mean_p max(0, |a-p|^2 - epsilon)`` over anchor-positive pairs,
    with squared Euclidean distances between raw embedding vectors. No tuples
    gives an exact zero that sends no gradient.
    """
    n, d, h, w = embedding.shape
    ta, tp, tn, pa, pp = _gather_indices(tuples, n, h, w)
    dtype = embedding.dtype
    if ta.size == 0:
        return Tensor.from_op(np.zeros((), dtype=dtype), (embedding,), lambda g: None)

    flat = embedding.data.transpose(0, 2, 3, 1).reshape(-1, d)
    diff_ap = flat[ta] - flat[tp]
    diff_an = flat[ta] - flat[tn]
    trip = (diff_ap * diff_ap).sum(axis=1) - (diff_an * diff_an).sum(axis=1) + sigma
    active_t = trip > 0
    n_trip = ta.size
    value = np.maximum(trip, 0).sum(dtype=np.float64) / n_trip
    if use_pair_term:
        diff_pair = flat[pa] - flat[pp]
        pair = (diff_pair * diff_pair).sum(axis=1) - epsilon
        active_p = pair > 0
        n_pair = pa.size
        value += beta * np.maximum(pair, 0).sum(dtype=np.float64) / n_pair

    def backward(g: np.ndarray) -> None:
        gs = float(g)
        grad = np.zeros_like(flat)
        c = (2.0 * gs / n_trip) * active_t[:, None]
        # d/da = 2(a-p) - 2(a-n); d/dp = -2(a-p); d/dn = 2(a-n)
        np.add.at(grad, ta, (c * (diff_ap - diff_an)).astype(dtype))
        np.add.at(grad, tp, (-c * diff_ap).astype(dtype))
        np.add.at(grad, tn, (c * diff_an).astype(dtype))
        if use_pair_term:
            cp = (2.0 * gs * beta / n_pair) * active_p[:, None]
            np.add.at(grad, pa, (cp * diff_pair).astype(dtype))
            np.add.at(grad, pp, (-cp * diff_pair).astype(dtype))
        embedding.accumulate_grad(np.ascontiguousarray(grad.reshape(n, h, w, d).transpose(0, 3, 1, 2)))

    return Tensor.from_op(np.asarray(value, dtype=dtype), (embedding,), backward)


def total_loss(
    logits: Tensor,
    labels: np.ndarray,
    embedding: Tensor,
    tuple_batches_per_strategy: Sequence[Sequence[TupleBatch]],
    cfg: LossConfig,
    sep: bool = False,
) -> LossBreakdown:
    """Cross-entropy plus ``lambda`` times the sum of per-strategy metric losses.

    With ``lambda == 0`` (or no strategies) the total *is* the cross-entropy
    tensor; the metric values are still computed for reporting.
    """
    if len(tuple_batches_per_strategy) != len(cfg.strategies):
        raise ValidationError(
            f"got tuples for {len(tuple_batches_per_strategy)} strategies, config has {len(cfg.strategies)}"
        )
    ce = softmax_cross_entropy(logits, labels)
    metrics = [
        metric_loss(embedding, batches, cfg.sigma, cfg.epsilon, cfg.beta, cfg.use_pair_term)
        for batches in tuple_batches_per_strategy
    ]
    counts = [sum(len(b) for b in batches) for batches in tuple_batches_per_strategy]
    if cfg.lam == 0 or not metrics:
        total = ce
    else:
        summed = metrics[0]
        for extra in metrics[1:]:
            summed = add(summed, extra)
        total = add(ce, scale(summed, cfg.lam))
    return LossBreakdown(ce=ce, metric_per_strategy=metrics, tuple_counts=counts, total=total, sep=sep)


def collect_gradients(model: ModelState) -> dict[str, np.ndarray]:
    """Copy of every trainable parameter's gradient (zeros where none arrived)."""
    return {
        name: (np.zeros_like(p.data) if p.grad is None else p.grad.copy())
        for name, p in model.params.items()
        if p.trainable
    }


def route_gradients_sep(model: ModelState, loss_parts: LossBreakdown) -> dict[str, np.ndarray]:
    """Backpropagate a loss computed on a separated forward pass.

    The forward pass must have been run with ``sep=True``: the segmentation
    head then reads a detached embedding, so cross-entropy updates only the
    head while the metric losses, which read the embedding directly, update
    only the trunk.
    """
    if not loss_parts.sep:
        raise ValidationError("loss was not computed from a separated forward pass")
    model.zero_grad()
    loss_parts.total.backward()
    return collect_gradients(model)


def part_gradients(model: ModelState, loss: Tensor) -> dict[str, np.ndarray]:
    """Gradients of one loss term alone; the graph is kept for further terms."""
    model.zero_grad()
    if loss.requires_grad:
        loss.backward(retain_graph=True)
    grads = collect_gradients(model)
    model.zero_grad()
    return grads


__all__ = [
    "LossBreakdown",
    "LossConfig",
    "collect_gradients",
    "head_parameter_names",
    "metric_loss",
    "part_gradients",
    "route_gradients_sep",
    "total_loss",
    "trunk_parameter_names",
]
