"""Differentiable primitives over NCHW tensors.

Each function computes its forward result with numpy and registers a
closure returning the gradient for each input.  Reduction order inside
every kernel is fixed, so results do not depend on how many BLAS threads run.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor

# Names of kernels whose backward pass is deliberately corrupted.  Only the
# self-test negative controls touch this.
FAULTS: set[str] = set()


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def sum_all(a: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g.reshape(()), a.shape).astype(a.dtype),)

    return Tensor._from_op(np.asarray(a.data.sum(), dtype=a.dtype), (a,), backward, "sum")


def relu(x: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return Tensor._from_op(out, (x,), lambda g: (g * mask,), "relu")


def _check_4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects an NCHW tensor, got shape {x.shape}")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _check_4d(a, "concat_channels")
    _check_4d(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"cannot concatenate {a.shape} and {b.shape} along channels")
    ca = a.shape[1]

    def backward(g):
        return g[:, :ca], g[:, ca:]

    out = np.concatenate([a.data, b.data], axis=1)
    return Tensor._from_op(out, (a, b), backward, "concat")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    _check_4d(x, "slice_channels")

    def backward(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return Tensor._from_op(x.data[:, start:stop], (x,), backward, "slice")


def _im2col(x: np.ndarray, kh: int, kw: int, ph: int = 0, pw: int = 0) -> np.ndarray:
    """Zero-pad ``x`` by (ph, pw) and unfold it.

    Rows are output pixels (n, i, j); columns are ordered (a, b, channel).
    """
    n, c, h, w = x.shape
    hp, wp = h + 2 * ph, w + 2 * pw
    ho, wo = hp - kh + 1, wp - kw + 1
    xn = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xn[:, ph:ph + h, pw:pw + w, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=x.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, :, a, b, :] = xn[:, a:a + ho, b:b + wo, :]
    return cols.reshape(n * ho * wo, kh * kw * c)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: str = "same") -> Tensor:
    """Stride-1 cross-correlation.

    ``padding`` is ``"same"`` (zero padding of k//2, odd kernels only) or
    ``"valid"`` (no padding).
    """
    _check_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be (K, C, kH, kW), got {weight.shape}")
    n, c, h, w = x.shape
    k, cw, kh, kw = weight.shape
    if c != cw:
        raise ShapeError(f"conv2d: input has {c} channels but weight expects {cw}")
    if bias is not None and bias.shape != (k,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match {k} output channels")
    if padding == "same":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError("same padding needs an odd kernel")
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph = pw = 0
    else:
        raise ConfigError(f"unknown padding mode {padding!r}")
    ho, wo = h + 2 * ph - kh + 1, w + 2 * pw - kw + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: {kh}x{kw} kernel leaves an empty output on a {h}x{w} input")

    cols = _im2col(x.data, kh, kw, ph, pw)
    wmat = weight.data.transpose(0, 2, 3, 1).reshape(k, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, k).transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        grad_w = (gm.T @ cols).reshape(k, kh, kw, c).transpose(0, 3, 1, 2)
        if "conv2d" in FAULTS:
            grad_w = -grad_w
        grad_b = gm.sum(axis=0) if bias is not None else None
        grad_x = None
        if x.requires_grad:
            # full correlation of the upstream gradient with the flipped kernel
            gcols = _im2col(g, kh, kw, kh - 1 - ph, kw - 1 - pw)
            wflip = weight.data[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(c, -1)
            grad_x = (gcols @ wflip.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv2d")


def conv_transpose2x2(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Stride-2 transposed convolution with a 2x2 kernel; doubles H and W.

    ``weight`` has shape (K_out, C_in, 2, 2).  Windows do not overlap, so
    each input pixel writes its own 2x2 output block.
    """
    _check_4d(x, "conv_transpose2x2")
    if weight.ndim != 4 or weight.shape[2:] != (2, 2):
        raise ConfigError(f"transposed convolution needs a 2x2 kernel, got {weight.shape}")
    n, c, h, w = x.shape
    k = weight.shape[0]
    if weight.shape[1] != c:
        raise ShapeError(f"conv_transpose2x2: input has {c} channels but weight expects {weight.shape[1]}")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, c)
    wm = weight.data.transpose(1, 0, 2, 3).reshape(c, k * 4)
    out = (xm @ wm).reshape(n, h, w, k, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(n, k, 2 * h, 2 * w)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gb = g.reshape(n, k, h, 2, w, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, k * 4)
        grad_x = (gb @ wm.T).reshape(n, h, w, c).transpose(0, 3, 1, 2)
        grad_w = (xm.T @ gb).reshape(c, k, 2, 2).transpose(1, 0, 2, 3)
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return grad_x, grad_w, grad_b

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, parents, backward, "conv_transpose2x2")


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling, stride 2.  Ties go to the first element in row-major order."""
    _check_4d(x, "max_pool2x2")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max_pool2x2 needs even H and W, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        routed = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(routed, idx[..., None], g[..., None], axis=-1)
        grad = routed.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (grad,)

    return Tensor._from_op(np.ascontiguousarray(out), (x,), backward, "max_pool2x2")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: Optional[float] = 0.1,
    eps: float = 1e-5,
    num_batches: int = 0,
) -> Tensor:
    """Per-channel batch normalisation.

    In training mode the batch mean and (biased) variance over N, H, W are
    used and the running buffers are updated in place; ``momentum=None``
    switches to a cumulative average over ``num_batches + 1`` batches.
    Eval mode is a fixed affine map built from the running buffers.
    """
    _check_4d(x, "batch_norm")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,):
        raise ShapeError(f"batch_norm: parameters sized for {gamma.shape[0]} channels, input has {c}")
    axes = (0, 2, 3)
    if not training:
        scale = gamma.data / np.sqrt(running_var + eps)
        shift = beta.data - running_mean * scale
        out = x.data * scale[None, :, None, None] + shift[None, :, None, None]
        xhat = (x.data - running_mean[None, :, None, None]) / np.sqrt(running_var + eps)[None, :, None, None]

        def backward_eval(g):
            return (
                g * scale[None, :, None, None],
                (g * xhat).sum(axis=axes),
                g.sum(axis=axes),
            )

        return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward_eval, "batch_norm")

    mean = x.data.mean(axis=axes)
    var = x.data.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    m = x.data.size // c

    rate = (1.0 / (num_batches + 1)) if momentum is None else momentum
    running_mean *= 1.0 - rate
    running_mean += rate * mean
    running_var *= 1.0 - rate
    running_var += rate * var

    def backward(g):
        g_gamma = (g * xhat).sum(axis=axes)
        g_beta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data[None, :, None, None]
            gx = (inv_std[None, :, None, None] / m) * (
                m * gxhat
                - gxhat.sum(axis=axes)[None, :, None, None]
                - xhat * (gxhat * xhat).sum(axis=axes)[None, :, None, None]
            )
        return gx, g_gamma, g_beta

    return Tensor._from_op(out.astype(x.dtype, copy=False), (x, gamma, beta), backward, "batch_norm")


def mse_loss(prediction: Tensor, target: Tensor) -> Tensor:
    """(1 / 2N) * sum ||target - prediction||^2 with N the batch size."""
    if prediction.shape != target.shape:
        raise ShapeError(f"mse_loss: prediction {prediction.shape} vs target {target.shape}")
    n = prediction.shape[0] if prediction.ndim else 1
    diff = prediction.data - target.data
    value = np.asarray((diff * diff).sum() / (2.0 * n), dtype=prediction.dtype)

    def backward(g):
        gp = (g * diff / n).astype(prediction.dtype, copy=False)
        return gp, -gp

    return Tensor._from_op(value, (prediction, target), backward, "mse_loss")
