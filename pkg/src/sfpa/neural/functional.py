"""Differentiable layer operations on NCHW tensors."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor, ensure_tensor


def _im2col(xp: np.ndarray, k: int, s: int, ho: int, wo: int) -> np.ndarray:
    """Patches of a padded input as ``(C, k, k, N, Ho, Wo)``."""
    n, c = xp.shape[:2]
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for a in range(k):
        for b in range(k):
            cols[:, a, b] = xp[:, :, a : a + s * ho : s, b : b + s * wo : s].transpose(1, 0, 2, 3)
    return cols


def _col2im(cols: np.ndarray, padded_hw: tuple[int, int], k: int, s: int) -> np.ndarray:
    """Scatter-add ``(C, k, k, N, Ho, Wo)`` patches back into ``(N, C, Hp, Wp)``."""
    c, _, _, n, ho, wo = cols.shape
    out = np.zeros((n, c) + tuple(padded_hw), dtype=cols.dtype)
    for a in range(k):
        for b in range(k):
            out[:, :, a : a + s * ho : s, b : b + s * wo : s] += cols[:, a, b].transpose(1, 0, 2, 3)
    return out


def conv_output_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation; ``weight`` is ``(F, C, k, k)``."""
    n, c, h, w = x.shape
    f, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d weight {weight.shape} incompatible with input {x.shape}")
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(w, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d input {x.shape} too small for kernel {k}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo).reshape(c * k * k, -1)
    w2 = weight.data.reshape(f, -1)
    out = (w2 @ cols).reshape(f, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)
    hp, wp = xp.shape[2:]

    def back(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(f, -1)
        dw = (g2 @ cols.T).reshape(weight.shape)
        dcols = (w2.T @ g2).reshape(c, k, k, n, ho, wo)
        dxp = _col2im(dcols, (hp, wp), k, stride)
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        grads = [dx, dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back)


def conv_transpose_output_size(size: int, k: int, s: int, p: int) -> int:
    return (size - 1) * s - 2 * p + k


def conv_transpose2d(
    x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0
) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is ``(C_in, C_out, k, k)``."""
    n, c, h, w = x.shape
    cw, f, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv_transpose2d weight {weight.shape} incompatible with input {x.shape}")
    hf, wf = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d padding removes the whole output")
    x2 = x.data.transpose(1, 0, 2, 3).reshape(c, -1)
    w2 = weight.data.reshape(c, f * k * k)
    cols = (w2.T @ x2).reshape(f, k, k, n, h, w)
    full = _col2im(cols, (hf, wf), k, stride)
    out = full[:, :, padding : padding + ho, padding : padding + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, f, 1, 1)
    out = np.ascontiguousarray(out)

    def back(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        gcols = _im2col(gp, k, stride, h, w).reshape(f * k * k, -1)
        dx = (w2 @ gcols).reshape(c, n, h, w).transpose(1, 0, 2, 3)
        dw = (x2 @ gcols.T).reshape(weight.shape)
        grads = [np.ascontiguousarray(dx), dw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor.from_op(out, parents, back)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation; batch statistics in training, running ones otherwise.

    The running buffers are updated in place during training.
    """
    c = x.shape[1]
    shape = (1, c, 1, 1)
    g_ = gamma.data.reshape(shape)
    if not training:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(shape)) * inv.reshape(shape)
        out = g_ * xhat + beta.data.reshape(shape)

        def back_eval(g):
            return (g * g_ * inv.reshape(shape), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

        return Tensor.from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), back_eval)

    m = x.size // c
    mu = x.data.mean(axis=(0, 2, 3))
    var = x.data.var(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(shape)) * inv.reshape(shape)
    out = g_ * xhat + beta.data.reshape(shape)
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * (m / max(m - 1, 1))

    def back(g):
        dxhat = g * g_
        sum_d = dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        sum_dx = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
        dx = inv.reshape(shape) / m * (m * dxhat - sum_d - xhat * sum_dx)
        return (dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return Tensor.from_op(out, (x, gamma, beta), back)


def dropout(
    x: Tensor,
    rate: float,
    rng: Optional[np.random.Generator] = None,
    training: bool = True,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Inverted dropout. Identity outside training or at rate 0."""
    if not training or rate <= 0.0:
        return x
    if mask is None:
        if rng is None:
            raise ValueError("dropout in training mode needs an rng or an explicit mask")
        mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor.from_op(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)
    return Tensor.from_op(out, (x,), lambda g: (np.where(pos, g, slope * g),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return Tensor.from_op(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor.from_op(y, (x,), lambda g: (g * y * (1.0 - y),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [ensure_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor.from_op(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def max_pool2d(x: Tensor, kernel: int = 2) -> Tensor:
    """Non-overlapping max pooling; the gradient goes to the first maximum of each window."""
    n, c, h, w = x.shape
    if h % kernel or w % kernel:
        raise ShapeError(f"max_pool kernel {kernel} does not divide input {h}x{w}")
    ho, wo = h // kernel, w // kernel
    win = x.data.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        dwin = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(dwin, arg[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx,)

    return Tensor.from_op(out, (x,), back)


def upsample_nearest2d(x: Tensor, scale: int = 2) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, scale, axis=2), scale, axis=3)
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),))


def noise_concat(x: Tensor, rng: Optional[np.random.Generator], training: bool, std: float = 1.0) -> Tensor:
    """Append one Gaussian noise channel (zeros outside training)."""
    n, _, h, w = x.shape
    if training and rng is not None:
        z = rng.normal(0.0, std, size=(n, 1, h, w)).astype(x.dtype)
    else:
        z = np.zeros((n, 1, h, w), dtype=x.dtype)
    return concat([x, Tensor(z)], axis=1)


def bce_with_logits(logits: Tensor, target: float) -> Tensor:
    """Mean binary cross-entropy of ``sigmoid(logits)`` against a constant label."""
    z = logits.data
    # log(1 + e^z) - t z, written to stay finite for large |z|
    loss = np.logaddexp(0.0, z) - target * z
    n = z.size
    p = _sigmoid(z)
    return Tensor.from_op(np.asarray(loss.mean(), dtype=z.dtype), (logits,), lambda g: (g * (p - target) / n,))


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    return (pred - target).abs().mean()
