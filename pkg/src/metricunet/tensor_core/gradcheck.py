from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def gradient_check(
    op_closure: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    eps: float = 1e-6,
    atol: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central finite differences.

    ``op_closure`` must rebuild the graph from ``inputs`` on every call and
    return a scalar. The relative error of one entry is
    ``|analytic - numeric| / max(|analytic|, |numeric|, atol)``; the floor keeps
    entries whose true gradient is zero from dividing by round-off. With
    ``max_entries`` only that many randomly chosen entries per input are
    perturbed. Returns the maximum relative error over all checked entries.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("gradient_check requires float64 tensors")
        t.requires_grad = True
        t.zero_grad()
    out = op_closure()
    out.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, grad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(op_closure().data)
            flat[i] = orig - eps
            f_minus = float(op_closure().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = float(grad.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), atol)
            worst = max(worst, err)
    return worst
