"""Dense tensor kernels: forward and backward passes for every layer primitive.

Tensors are plain ``numpy.ndarray`` values in row-major ``(N, C, H, W)``
layout. Kernels keep the dtype of their floating inputs (``float32`` by
default) so the same code can be run in ``float64`` for gradient checks.
Padding is zero-fill; resizing uses half-pixel centres (align_corners=False).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Return ``data`` as a contiguous rank 1-4 real array of ``dtype``."""
    arr = np.asarray(data, dtype=dtype)
    if not 1 <= arr.ndim <= 4:
        raise ShapeError(f"tensor rank must be 1-4, got shape {arr.shape}")
    if 0 in arr.shape:
        raise ShapeError(f"tensor extents must be positive, got {arr.shape}")
    return np.ascontiguousarray(arr)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _check4(x, name="input"):
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got {x.shape}")


def _pad(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _windows(x, kh, kw, stride, padding):
    """Strided view of shape (N, C, Ho, Wo, kh, kw) over the padded input."""
    xp = _pad(x, padding)
    if kh > xp.shape[2] or kw > xp.shape[3]:
        raise ShapeError(
            f"kernel {kh}x{kw} exceeds padded extent {xp.shape[2]}x{xp.shape[3]}")
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def _scatter_windows(gwin, x_shape, stride, padding):
    """Adjoint of ``_windows``: sum window gradients back onto the input grid.

    ``gwin`` has shape (N, C, Ho, Wo, kh, kw).
    """
    n, c, h, w = x_shape
    _, _, ho, wo, kh, kw = gwin.shape
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gwin.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gwin[..., i, j]
    if padding:
        gxp = gxp[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(gxp)


# -- convolution -------------------------------------------------------------

def conv2d(x, kernel, bias, stride=1, padding=0):
    """Cross-correlate ``x`` (N, Cin, H, W) with ``kernel`` (Cout, Cin, kh, kw)."""
    _check4(x)
    _check4(kernel, "kernel")
    if kernel.shape[1] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {kernel.shape[1]} input channels, input has {x.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({kernel.shape[0]},)")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be positive and padding nonnegative")
    kh, kw = kernel.shape[2:]
    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, kernel, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, Cout
    out = out.transpose(0, 3, 1, 2) + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward(x, kernel, grad_out, stride=1, padding=0, need_input_grad=True):
    """Return ``(grad_x, grad_kernel, grad_bias)``; grad_x is None if not needed."""
    kh, kw = kernel.shape[2:]
    win = _windows(x, kh, kw, stride, padding)
    grad_kernel = np.tensordot(grad_out, win, axes=([0, 2, 3], [0, 2, 3]))
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        gcols = np.tensordot(grad_out, kernel, axes=([1], [0]))  # N, Ho, Wo, Cin, kh, kw
        grad_x = _scatter_windows(gcols.transpose(0, 3, 1, 2, 4, 5), x.shape, stride, padding)
    return grad_x, grad_kernel.astype(x.dtype, copy=False), grad_bias.astype(x.dtype, copy=False)


def depthwise_conv2d(x, kernel, stride=1, padding=0):
    """One ``kh x kw`` filter per channel; ``kernel`` has shape (C, 1, kh, kw)."""
    _check4(x)
    _check4(kernel, "depthwise kernel")
    if kernel.shape[0] != x.shape[1] or kernel.shape[1] != 1:
        raise ShapeError(
            f"depthwise kernel {kernel.shape} does not match {x.shape[1]} channels")
    win = _windows(x, kernel.shape[2], kernel.shape[3], stride, padding)
    out = np.einsum("nchwij,cij->nchw", win, kernel[:, 0], optimize=True)
    return np.ascontiguousarray(out, dtype=x.dtype)


def depthwise_conv2d_backward(x, kernel, grad_out, stride=1, padding=0, need_input_grad=True):
    win = _windows(x, kernel.shape[2], kernel.shape[3], stride, padding)
    grad_kernel = np.einsum("nchw,nchwij->cij", grad_out, win, optimize=True)[:, None]
    grad_x = None
    if need_input_grad:
        gwin = grad_out[..., None, None] * kernel[None, :, 0, None, None, :, :]
        grad_x = _scatter_windows(gwin, x.shape, stride, padding)
    return grad_x, grad_kernel.astype(x.dtype, copy=False)


def pointwise_conv(x, kernel, bias):
    """1x1 convolution; ``kernel`` has shape (Cout, Cin, 1, 1)."""
    if kernel.shape[1] != x.shape[1] or kernel.shape[2:] != (1, 1):
        raise ShapeError(f"pointwise kernel {kernel.shape} does not match input {x.shape}")
    out = np.tensordot(kernel[:, :, 0, 0], x, axes=([1], [1]))  # Cout, N, H, W
    out = out.transpose(1, 0, 2, 3) + bias[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def pointwise_conv_backward(x, kernel, grad_out, need_input_grad=True):
    grad_kernel = np.tensordot(grad_out, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_input_grad:
        grad_x = np.tensordot(kernel[:, :, 0, 0], grad_out, axes=([0], [1])).transpose(1, 0, 2, 3)
        grad_x = np.ascontiguousarray(grad_x)
    return grad_x, grad_kernel.astype(x.dtype, copy=False), grad_bias.astype(x.dtype, copy=False)


def depthwise_separable_conv(x, depthwise_kernel, pointwise_kernel, bias, stride=1, padding=0):
    """Per-channel spatial convolution followed by a 1x1 channel-mixing convolution."""
    if pointwise_kernel.ndim != 4 or pointwise_kernel.shape[1] != depthwise_kernel.shape[0]:
        raise ShapeError(
            f"pointwise kernel {pointwise_kernel.shape} does not follow "
            f"depthwise kernel {depthwise_kernel.shape}")
    mid = depthwise_conv2d(x, depthwise_kernel, stride, padding)
    return pointwise_conv(mid, pointwise_kernel, bias)


# -- pooling -----------------------------------------------------------------

def maxpool2d(x, window, stride):
    """Max pooling without padding. Returns ``(out, argmax)``.

    ``argmax`` holds the flat index within each window (row-major, first
    maximum wins on ties) and is what :func:`maxpool2d_backward` consumes.
    """
    _check4(x)
    if window < 1 or stride < 1:
        raise ValueError("window and stride must be positive")
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"pool window {window} exceeds spatial extent {x.shape[2:]}")
    win = _windows(x, window, window, stride, 0)
    flat = win.reshape(win.shape[:4] + (window * window,))
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), argmax


def maxpool2d_backward(grad_out, argmax, x_shape, window, stride):
    n, c, h, w = x_shape
    ho, wo = grad_out.shape[2:]
    grad_x = np.zeros(x_shape, dtype=grad_out.dtype)
    for k in range(window * window):
        i, j = divmod(k, window)
        hit = argmax == k
        if hit.any():
            grad_x[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += grad_out * hit
    return grad_x


def global_avg_pool(x):
    """Per-channel spatial mean: (N, C, H, W) -> (N, C)."""
    _check4(x)
    return x.mean(axis=(2, 3), dtype=x.dtype)


def global_avg_pool_backward(grad_out, x_shape):
    h, w = x_shape[2:]
    g = grad_out[:, :, None, None] / (h * w)
    return np.ascontiguousarray(np.broadcast_to(g, x_shape), dtype=grad_out.dtype)


# -- dense / activations -----------------------------------------------------

def dense(x, weight, bias):
    """Affine map ``x @ weight + bias`` with ``weight`` of shape (D, M)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"cannot apply dense weight {weight.shape} to input {x.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
    return (x @ weight + bias).astype(x.dtype, copy=False)


def dense_backward(x, weight, grad_out, need_input_grad=True):
    grad_x = grad_out @ weight.T if need_input_grad else None
    return grad_x, x.T @ grad_out, grad_out.sum(axis=0)


def relu(x):
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(out, grad_out):
    return grad_out * (out > 0)


def softmax_rows(z):
    """Row-wise softmax with max subtraction for stability."""
    if z.ndim != 2:
        raise ShapeError(f"softmax_rows expects (N, K), got {z.shape}")
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_backward(probs, grad_probs):
    """Vector-Jacobian product of the row softmax."""
    inner = (grad_probs * probs).sum(axis=1, keepdims=True)
    return probs * (grad_probs - inner)


# -- batch normalization -----------------------------------------------------

def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects rank 2 or 4 input, got {x.shape}")


def batchnorm_train(x, gamma, beta, eps=1e-5):
    """Normalize with batch statistics (biased variance).

    Returns ``(out, cache)`` where cache is ``(xhat, inv_std, mean, var)``.
    """
    axes, bshape = _bn_axes(x)
    mean = x.mean(axis=axes)
    var = x.var(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std, mean, var)


def batchnorm_eval(x, gamma, beta, running_mean, running_var, eps=1e-5):
    axes, bshape = _bn_axes(x)
    inv_std = 1.0 / np.sqrt(running_var + eps)
    xhat = (x - running_mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return out.astype(x.dtype, copy=False), (xhat, inv_std)


def batchnorm_backward(grad_out, gamma, xhat, inv_std, batch_stats):
    """Return ``(grad_x, grad_gamma, grad_beta)``.

    With ``batch_stats`` the statistics depend on the batch and the full
    normalization Jacobian applies; otherwise the layer is a fixed affine map.
    """
    axes, bshape = _bn_axes(grad_out)
    grad_gamma = (grad_out * xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    scale = (gamma * inv_std).reshape(bshape)
    if not batch_stats:
        return grad_out * scale, grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    grad_x = scale / m * (m * grad_out - grad_beta.reshape(bshape)
                          - xhat * grad_gamma.reshape(bshape))
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# -- resizing ----------------------------------------------------------------

def _resize_axis(in_size, out_size):
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def bilinear_resize(image, out_h, out_w):
    """Bilinear resize of a (C, H, W) array using half-pixel centres.

    Source coordinates outside the input are clamped to the border, so the
    output never leaves the input's value range.
    """
    if image.ndim != 3:
        raise ShapeError(f"bilinear_resize expects (C, H, W), got {image.shape}")
    if out_h < 1 or out_w < 1:
        raise ValueError(f"target size must be positive, got {out_h}x{out_w}")
    _, h, w = image.shape
    y0, y1, fy = _resize_axis(h, out_h)
    x0, x1, fx = _resize_axis(w, out_w)
    fy = fy.astype(image.dtype)[None, :, None]
    fx = fx.astype(image.dtype)[None, None, :]
    top = image[:, y0, :]
    bottom = image[:, y1, :]
    rows = top + (bottom - top) * fy
    left = rows[:, :, x0]
    right = rows[:, :, x1]
    return np.ascontiguousarray(left + (right - left) * fx, dtype=image.dtype)
