"""Differentiable layer operations used by the segmentation networks.

All image tensors are laid out ``[N, C, H, W]``.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError, ValidationError
from .tensor import Tensor


def _require_4d(name: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise DimensionError(f"{name}: expected a 4-d tensor, got shape {t.shape}")


def _shifted(xh: np.ndarray, i: int, j: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Contiguous (N*Ho*Wo, C) view of the padded NHWC input at kernel offset (i, j)."""
    c = xh.shape[-1]
    return np.ascontiguousarray(xh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :]).reshape(-1, c)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation. ``weight`` is ``[F, C, kh, kw]``.

    Evaluated as a sum over kernel offsets of (N*Ho*Wo, C) @ (C, F) matmuls on
    a channels-last copy of the input, which avoids materialising im2col.
    """
    _require_4d("conv2d input", x)
    _require_4d("conv2d weight", weight)
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"conv2d: input channels (axis 1) = {c} but weight channels (axis 1) = {wc}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"conv2d: bias shape {bias.shape} does not match filters (axis 0) = {f}")
    if stride < 1 or padding < 0:
        raise ValidationError(f"conv2d: invalid stride={stride} padding={padding}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if hp < kh or wp < kw:
        raise DimensionError(f"conv2d: padded input {hp}x{wp} (axes 2,3) smaller than kernel {kh}x{kw}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    offsets = [divmod(k, kw) for k in range(kh * kw)]

    xh = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xh[:, padding : padding + h, padding : padding + w, :] = x.data.transpose(0, 2, 3, 1)
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0).reshape(kh * kw, c, f))
    out = np.zeros((n * ho * wo, f), dtype=x.dtype)
    for k, (i, j) in enumerate(offsets):
        out += _shifted(xh, i, j, stride, ho, wo) @ wk[k]
    if bias is not None:
        out += bias.data
    out_data = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))

    def backward(g: np.ndarray) -> None:
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, f)
        if weight.requires_grad:
            dw = np.empty((kh * kw, c, f), dtype=x.dtype)
            for k, (i, j) in enumerate(offsets):
                dw[k] = _shifted(xh, i, j, stride, ho, wo).T @ gm
            weight.accumulate_grad(np.ascontiguousarray(dw.reshape(kh, kw, c, f).transpose(3, 2, 0, 1)))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(gm.sum(axis=0))
        if x.requires_grad:
            dcols = np.matmul(gm[None], wk.transpose(0, 2, 1)).reshape(kh * kw, n, ho, wo, c)
            dxh = np.zeros((n, hp, wp, c), dtype=x.dtype)
            for k, (i, j) in enumerate(offsets):
                dxh[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += dcols[k]
            dx = dxh[:, padding : padding + h, padding : padding + w, :].transpose(0, 3, 1, 2)
            x.accumulate_grad(np.ascontiguousarray(dx))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out_data, parents, backward)


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 2, kernel: int = 2) -> Tensor:
    """Transposed convolution with ``kernel == stride`` (non-overlapping up-sampling).

    ``weight`` is ``[C_in, F, k, k]``; each input pixel expands into a k-by-k
    output block.
    """
    _require_4d("transposed_conv2d input", x)
    _require_4d("transposed_conv2d weight", weight)
    if kernel != stride:
        raise ValidationError(f"transposed_conv2d supports kernel == stride only (got {kernel}, {stride})")
    n, c, h, w = x.shape
    wc, f, kh, kw = weight.shape
    if wc != c:
        raise DimensionError(f"transposed_conv2d: input channels (axis 1) = {c} but weight in-channels (axis 0) = {wc}")
    if kh != kernel or kw != kernel:
        raise DimensionError(f"transposed_conv2d: weight kernel {kh}x{kw} (axes 2,3) != {kernel}")
    if bias is not None and bias.shape != (f,):
        raise DimensionError(f"transposed_conv2d: bias shape {bias.shape} does not match filters = {f}")
    k = kernel
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wmat = weight.data.reshape(c, f * k * k)
    out = (xm @ wmat).reshape(n, h, w, f, k, k).transpose(0, 3, 1, 4, 2, 5).reshape(n, f, h * k, w * k)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out_data = np.ascontiguousarray(out)

    def backward(g: np.ndarray) -> None:
        gm = g.reshape(n, f, h, k, w, k).transpose(0, 2, 4, 1, 3, 5).reshape(-1, f * k * k)
        if x.requires_grad:
            dx = (gm @ wmat.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
            x.accumulate_grad(np.ascontiguousarray(dx))
        if weight.requires_grad:
            weight.accumulate_grad((xm.T @ gm).reshape(c, f, k, k))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out_data, parents, backward)


def maxpool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling.

    The backward pass routes the gradient to the first maximal element of
    each window in row-major order.
    """
    _require_4d("maxpool2d input", x)
    if kernel != stride:
        raise ValidationError("maxpool2d supports kernel == stride only")
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise DimensionError(f"maxpool2d: spatial size {h}x{w} (axes 2,3) not divisible by {kernel}")
    k = kernel
    ho, wo = h // k, w // k
    windows = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray) -> None:
        dwin = np.zeros((n, c, ho, wo, k * k), dtype=x.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        x.accumulate_grad(dx)

    return Tensor.from_op(np.ascontiguousarray(out), (x,), backward)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch statistics are used and the running buffers
    are updated in place with an exponential moving average (the running
    variance uses the unbiased batch estimate). Eval mode uses the buffers.
    """
    _require_4d("batchnorm2d input", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")
    dt = x.dtype.type
    if training:
        m = n * h * w
        mean = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        unbiased = var * (m / (m - 1)) if m > 1 else var
        running_var *= 1.0 - momentum
        running_var += momentum * unbiased
    else:
        m = None
        mean = running_mean.astype(x.dtype)
        centered = x.data - mean.reshape(1, c, 1, 1)
        var = running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
    xhat = centered * inv_std.reshape(1, c, 1, 1)
    out = xhat * gamma.data.reshape(1, c, 1, 1) + beta.data.reshape(1, c, 1, 1)

    def backward(g: np.ndarray) -> None:
        if gamma.requires_grad:
            gamma.accumulate_grad((g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            beta.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if not x.requires_grad:
            return
        dxhat = g * gamma.data.reshape(1, c, 1, 1)
        if training:
            sum_d = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
            dx = (inv_std.reshape(1, c, 1, 1) / m) * (m * dxhat - sum_d - xhat * sum_dx)
        else:
            dx = dxhat * inv_std.reshape(1, c, 1, 1)
        x.accumulate_grad(dx.astype(x.dtype, copy=False))

    return Tensor.from_op(out, (x, gamma, beta), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = x.data * mask

    def backward(g: np.ndarray) -> None:
        x.accumulate_grad(g * mask)

    return Tensor.from_op(out, (x,), backward)


def concat(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Concatenate two tensors along ``axis`` (all other axes must agree)."""
    if a.ndim != b.ndim:
        raise DimensionError(f"concat: rank mismatch {a.shape} vs {b.shape}")
    axis = axis % a.ndim
    for ax in range(a.ndim):
        if ax != axis and a.shape[ax] != b.shape[ax]:
            raise DimensionError(f"concat: axis {ax} differs ({a.shape[ax]} vs {b.shape[ax]})")
    split = a.shape[axis]
    out = np.concatenate([a.data, b.data], axis=axis)

    def backward(g: np.ndarray) -> None:
        ga, gb = np.split(g, [split], axis=axis)
        a.accumulate_grad(np.ascontiguousarray(ga))
        b.accumulate_grad(np.ascontiguousarray(gb))

    return Tensor.from_op(out, (a, b), backward)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over batch and voxels of ``-log softmax(logits)[true class]``.

    ``logits`` is ``[N, 2, H, W]``; ``labels`` is an ``[N, H, W]`` array of 0/1.
    """
    _require_4d("softmax_cross_entropy logits", logits)
    n, c, h, w = logits.shape
    if c != 2:
        raise DimensionError(f"softmax_cross_entropy: expected 2 channels on axis 1, got {c}")
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise DimensionError(f"softmax_cross_entropy: labels shape {labels.shape} != {(n, h, w)}")
    if not np.isin(labels, (0, 1)).all():
        raise ValidationError("softmax_cross_entropy: labels must be binary (0/1)")
    lab = labels.astype(np.intp)
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=1)) + zmax[:, 0]
    true_logit = np.take_along_axis(z, lab[:, None], axis=1)[:, 0]
    count = n * h * w
    loss = (lse - true_logit).sum(dtype=np.float64) / count

    def backward(g: np.ndarray) -> None:
        p = softmax(z, axis=1)
        onehot = np.zeros_like(z)
        np.put_along_axis(onehot, lab[:, None], 1.0, axis=1)
        logits.accumulate_grad(((p - onehot) * (g.reshape(()) / count)).astype(z.dtype, copy=False))

    return Tensor.from_op(np.asarray(loss, dtype=z.dtype), (logits,), backward)
