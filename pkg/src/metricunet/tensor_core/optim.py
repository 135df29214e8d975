from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ValidationError
from .tensor import Tensor


def poly_lr(iteration: int, max_iter: int, base_lr: float = 0.01, power: float = 0.9) -> float:
    """``base_lr * (1 - iteration / max_iter) ** power``."""
    if max_iter <= 0:
        raise ValidationError(f"max_iter must be positive, got {max_iter}")
    if not 0 <= iteration <= max_iter:
        raise ValidationError(f"iteration {iteration} outside [0, {max_iter}]")
    return base_lr * (1.0 - iteration / max_iter) ** power


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None] | None, lr: float) -> None:
    """In-place ``p <- p - lr * g``. ``grads=None`` uses each tensor's ``.grad``.

    Parameters whose gradient is ``None`` are left untouched.
    """
    if lr < 0:
        raise ValidationError(f"learning rate must be non-negative, got {lr}")
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ValidationError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is None:
            continue
        p.data -= p.data.dtype.type(lr) * g
