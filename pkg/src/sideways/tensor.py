"""Dense forward kernels and hand-written vector-Jacobian products.

Tensors are plain numpy arrays. Spatial kernels take ``(H, W, C)`` or a
batched ``(N, H, W, C)`` layout; kernels are ``(kh, kw, Cin, Cout)``.
Every kernel checks its output for non-finite values.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PRECISIONS = {"single": np.float32, "double": np.float64}


class DimensionError(ValueError):
    """Raised when an operand has the wrong shape along a named axis."""

    def __init__(self, op, axis, expected, got):
        self.op, self.axis, self.expected, self.got = op, axis, expected, got
        super().__init__(f"{op}: axis '{axis}' expected {expected}, got {got}")


class NonFiniteError(FloatingPointError):
    pass


def dtype_of(precision: str):
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValueError(f"unknown precision {precision!r}; use 'single' or 'double'") from None


def as_tensor(x, precision="double") -> np.ndarray:
    arr = np.asarray(x, dtype=dtype_of(precision))
    check_finite(arr, "as_tensor")
    return arr


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{where}: non-finite values in output")
    return arr


def _batched(x, op):
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(op, "rank", "3 (H,W,C) or 4 (N,H,W,C)", x.ndim)


def _check_kernel(op, x, kernel, cin_axis_size):
    if kernel.ndim != 4:
        raise DimensionError(op, "kernel rank", 4, kernel.ndim)
    if kernel.shape[2] != cin_axis_size:
        raise DimensionError(op, "Cin", kernel.shape[2], cin_axis_size)


def _check_upstream(op, got, expected):
    for name, a, b in zip(("N", "H", "W", "Cout"), got, expected):
        if a != b:
            raise DimensionError(op, f"upstream {name}", b, a)


def _check_stride(op, stride):
    if not (isinstance(stride, (int, np.integer)) and stride > 0):
        raise DimensionError(op, "stride", "positive int", stride)


def conv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return math.ceil(size / stride)
    if padding == "valid":
        if size < k:
            raise DimensionError("conv2d", "spatial", f">= {k}", size)
        return (size - k) // stride + 1
    raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")


def _same_pads(size, k, stride):
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    lo = total // 2
    return lo, total - lo


def _pads(h, w, kh, kw, stride, padding):
    if padding == "same":
        return _same_pads(h, kh, stride), _same_pads(w, kw, stride)
    return (0, 0), (0, 0)


def _windows(xp, kh, kw, stride, ho, wo):
    # (N, Ho, Wo, C, kh, kw) view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _scatter(upstream, kernel, stride, hp, wp):
    """Adjoint of the windowed gather: spreads ``upstream @ kernel[i, j].T``."""
    n, ho, wo, _ = upstream.shape
    kh, kw, cin, _ = kernel.shape
    out = np.zeros((n, hp, wp, cin), dtype=np.result_type(upstream, kernel))
    for i in range(kh):
        for j in range(kw):
            out[:, i : i + (ho - 1) * stride + 1 : stride, j : j + (wo - 1) * stride + 1 : stride] += (
                upstream @ kernel[i, j].T
            )
    return out


def conv2d_forward(x, kernel, stride=1, padding="same"):
    x4, squeeze = _batched(np.asarray(x), "conv2d_forward")
    _check_kernel("conv2d_forward", x4, kernel, x4.shape[3])
    _check_stride("conv2d_forward", stride)
    kh, kw = kernel.shape[:2]
    n, h, w, _ = x4.shape
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    (pt, pb), (pl, pr) = _pads(h, w, kh, kw, stride, padding)
    xp = np.pad(x4, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x4
    win = _windows(xp, kh, kw, stride, ho, wo)
    out = np.tensordot(win, kernel, axes=([3, 4, 5], [2, 0, 1]))
    check_finite(out, "conv2d_forward")
    return out[0] if squeeze else out


def conv2d_vjp(x, kernel, upstream, stride=1, padding="same"):
    """Returns ``(grad_input, grad_kernel)`` for ``sum(conv2d(x, kernel) * upstream)``."""
    x4, squeeze = _batched(np.asarray(x), "conv2d_vjp")
    g4, _ = _batched(np.asarray(upstream), "conv2d_vjp")
    _check_kernel("conv2d_vjp", x4, kernel, x4.shape[3])
    kh, kw, _, cout = kernel.shape
    n, h, w, _ = x4.shape
    ho, wo = conv_output_size(h, kh, stride, padding), conv_output_size(w, kw, stride, padding)
    _check_upstream("conv2d_vjp", g4.shape, (n, ho, wo, cout))
    (pt, pb), (pl, pr) = _pads(h, w, kh, kw, stride, padding)
    xp = np.pad(x4, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if pt + pb + pl + pr else x4
    win = _windows(xp, kh, kw, stride, ho, wo)
    gk = np.tensordot(win, g4, axes=([0, 1, 2], [0, 1, 2]))  # (C, kh, kw, Cout)
    gk = gk.transpose(1, 2, 0, 3)
    gxp = _scatter(g4, kernel, stride, xp.shape[1], xp.shape[2])
    gx = gxp[:, pt : pt + h, pl : pl + w]
    check_finite(gx, "conv2d_vjp")
    check_finite(gk, "conv2d_vjp")
    return (gx[0] if squeeze else gx), np.ascontiguousarray(gk)


def deconv_output_size(size: int, k: int, stride: int, padding: str) -> int:
    if padding == "same":
        return size * stride
    return (size - 1) * stride + k


def _deconv_crop(out_size, k, stride, padding):
    if padding == "same":
        lo, _ = _same_pads(out_size, k, stride)
        return lo
    return 0


def deconv2d_forward(x, kernel, stride=1, padding="same"):
    """Transposed convolution; inverts the shape map of :func:`conv2d_forward`."""
    x4, squeeze = _batched(np.asarray(x), "deconv2d_forward")
    _check_kernel("deconv2d_forward", x4, kernel, x4.shape[3])
    _check_stride("deconv2d_forward", stride)
    kh, kw, _, _ = kernel.shape
    n, h, w, _ = x4.shape
    ho, wo = deconv_output_size(h, kh, stride, padding), deconv_output_size(w, kw, stride, padding)
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    # scatter with the (Cout, Cin)-transposed kernel so each input pixel maps Cin -> Cout
    full = _scatter(x4, kernel.transpose(0, 1, 3, 2), stride, hp, wp)
    t, l = _deconv_crop(ho, kh, stride, padding), _deconv_crop(wo, kw, stride, padding)
    out = full[:, t : t + ho, l : l + wo]
    check_finite(out, "deconv2d_forward")
    return out[0] if squeeze else out


def deconv2d_vjp(x, kernel, upstream, stride=1, padding="same"):
    x4, squeeze = _batched(np.asarray(x), "deconv2d_vjp")
    g4, _ = _batched(np.asarray(upstream), "deconv2d_vjp")
    _check_kernel("deconv2d_vjp", x4, kernel, x4.shape[3])
    kh, kw, _, cout = kernel.shape
    n, h, w, _ = x4.shape
    ho, wo = deconv_output_size(h, kh, stride, padding), deconv_output_size(w, kw, stride, padding)
    _check_upstream("deconv2d_vjp", g4.shape, (n, ho, wo, cout))
    hp, wp = (h - 1) * stride + kh, (w - 1) * stride + kw
    t, l = _deconv_crop(ho, kh, stride, padding), _deconv_crop(wo, kw, stride, padding)
    gfull = np.zeros((n, hp, wp, cout), dtype=g4.dtype)
    gfull[:, t : t + ho, l : l + wo] = g4
    win = _windows(gfull, kh, kw, stride, h, w)  # (N, H, W, Cout, kh, kw)
    gx = np.tensordot(win, kernel, axes=([3, 4, 5], [3, 0, 1]))
    gk = np.tensordot(win, x4, axes=([0, 1, 2], [0, 1, 2]))  # (Cout, kh, kw, Cin)
    gk = gk.transpose(1, 2, 3, 0)
    check_finite(gx, "deconv2d_vjp")
    check_finite(gk, "deconv2d_vjp")
    return (gx[0] if squeeze else gx), np.ascontiguousarray(gk)


def relu_forward(x):
    return np.maximum(x, 0)


def relu_vjp(x, upstream):
    # subgradient 0 at exactly 0
    return np.where(x > 0, upstream, 0).astype(np.result_type(x, upstream), copy=False)


def global_avg_pool_forward(x):
    x4, squeeze = _batched(np.asarray(x), "global_avg_pool_forward")
    out = x4.mean(axis=(1, 2))
    return out[0] if squeeze else out


def global_avg_pool_vjp(x, upstream):
    x4, squeeze = _batched(np.asarray(x), "global_avg_pool_vjp")
    g = np.asarray(upstream).reshape(x4.shape[0], x4.shape[3])
    h, w = x4.shape[1:3]
    gx = np.broadcast_to(g[:, None, None, :] / (h * w), x4.shape).copy()
    return gx[0] if squeeze else gx


def linear_forward(x, weight, bias=None):
    x = np.asarray(x)
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError("linear_forward", "features", weight.shape[0], x.shape[-1])
    out = x @ weight
    if bias is not None:
        out = out + bias
    return check_finite(out, "linear_forward")


def linear_vjp(x, weight, upstream, bias=None):
    """Returns ``(grad_input, grad_weight, grad_bias)``; grad_bias is None without a bias."""
    x = np.asarray(x)
    g = np.asarray(upstream)
    if g.shape[-1] != weight.shape[1]:
        raise DimensionError("linear_vjp", "outputs", weight.shape[1], g.shape[-1])
    x2, g2 = x.reshape(-1, x.shape[-1]), g.reshape(-1, g.shape[-1])
    gw = x2.T @ g2
    gb = g2.sum(axis=0) if bias is not None else None
    gx = g @ weight.T
    return check_finite(gx, "linear_vjp"), check_finite(gw, "linear_vjp"), gb


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits, label):
    """Cross-entropy of softmax(logits) against integer labels, averaged over the batch.

    ``logits`` is ``(C,)`` with a scalar label or ``(N, C)`` with ``N`` labels.
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z2 = logits[None] if single else logits
    labels = np.atleast_1d(np.asarray(label))
    n, c = z2.shape
    if labels.shape != (n,):
        raise DimensionError("softmax_xent", "labels", (n,), labels.shape)
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"softmax_xent: label out of range [0, {c}): {labels.tolist()}")
    m = z2.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z2 - m).sum(axis=-1))
    rows = np.arange(n)
    loss = float(np.mean(lse - z2[rows, labels]))
    grad = softmax(z2)
    grad[rows, labels] -= 1
    grad /= n
    check_finite(grad, "softmax_xent")
    return loss, (grad[0] if single else grad)


def mse(pred, target):
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise DimensionError("mse", "shape", pred.shape, target.shape)
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, check_finite(2.0 * diff / diff.size, "mse")
