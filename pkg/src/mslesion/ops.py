"""Differentiable numerical primitives for the patch CNN.

Every primitive is a pure function on numpy arrays and preserves the input
dtype, so the same code runs in float32 for training and float64 for
gradient checks.

The public functions use the channel-first layout ``(batch, channels, depth,
height, width)``. Each has a ``*_cl`` kernel working on channels-last arrays
``(batch, depth, height, width, channels)``; the network calls those
directly and never transposes its feature maps. The 3D convolution is a
3x3x3 "same" cross-correlation: each sample is unfolded over in-plane
windows once and the three depth offsets become three BLAS products on
contiguous row blocks of that buffer.
"""
from __future__ import annotations

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KERNEL = 3

class ShapeError(ValueError):
    """Raised when array shapes are incompatible with a primitive."""


def to_cl(x):
    return np.moveaxis(x, 1, -1)


def to_cf(x):
    return np.moveaxis(x, -1, 1)


# --- convolution -------------------------------------------------------------

def _check_conv(x_cl, weight, bias):
    if x_cl.ndim != 5:
        raise ShapeError(f"conv3d expects a batched 3D input, got shape {x_cl.shape}")
    if weight.ndim != 5 or weight.shape[2:] != (KERNEL,) * 3:
        raise ShapeError(f"conv3d expects weight (O, C, 3, 3, 3), got shape {weight.shape}")
    if x_cl.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"input has {x_cl.shape[-1]} channels (channels-last shape {x_cl.shape}) but the "
            f"kernel expects in_channels={weight.shape[1]} (weight shape {weight.shape})"
        )
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match out_channels {weight.shape[0]}")
    if min(x_cl.shape[1:4]) < 1:
        raise ShapeError(f"spatial extents must be >= 1, got {x_cl.shape[1:4]}")


def _unfold_hw(x):
    """Columns of one sample ``(D, H, W, C)`` for in-plane 3x3 windows.

    Rows are the voxels of the depth-padded volume ``(D + 2, H, W)`` in raster
    order; columns are ordered (kh, kw, channel). The rows for depth offset
    ``kd`` of the full 3x3x3 window are the contiguous block starting at
    ``kd * H * W``.
    """
    d, h, w, c = x.shape
    xp = np.zeros((d + 2, h + 2, w + 2, c), dtype=x.dtype)
    xp[1:-1, 1:-1, 1:-1] = x
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    cols = np.empty((d + 2, h, w, KERNEL, KERNEL, c), dtype=x.dtype)
    np.copyto(cols, win.transpose(0, 1, 2, 4, 5, 3))
    return cols.reshape((d + 2) * h * w, 9 * c)


def _weight_slabs(weight):
    """Per-depth-offset weight matrices ``(3, 9 C, O)`` matching :func:`_unfold_hw`."""
    o, c = weight.shape[:2]
    return np.ascontiguousarray(weight.transpose(2, 3, 4, 1, 0).reshape(KERNEL, 9 * c, o))


def conv3d_forward_cl(x, weight, bias):
    _check_conv(x, weight, bias)
    n, d, h, w, _ = x.shape
    o = weight.shape[0]
    slabs = _weight_slabs(weight)
    out = np.empty((n, d, h, w, o), dtype=np.result_type(x, weight))
    flat = out.reshape(n, d * h * w, o)
    plane = h * w
    rows = d * plane
    for i in range(n):
        cols = _unfold_hw(x[i])
        np.matmul(cols[:rows], slabs[0], out=flat[i])
        for kd in (1, 2):
            flat[i] += cols[kd * plane:kd * plane + rows] @ slabs[kd]
    if bias is not None:
        out += bias
    return out


def conv3d_backward_cl(x, weight, grad_out, need_input_grad=True):
    _check_conv(x, weight, None)
    n, d, h, w, c = x.shape
    o = weight.shape[0]
    if grad_out.shape != (n, d, h, w, o):
        raise ShapeError(f"upstream gradient shape {grad_out.shape} != output shape {(n, d, h, w, o)}")
    gw = np.zeros((KERNEL, 9 * c, o), dtype=np.result_type(x, weight))
    plane = h * w
    rows = d * plane
    for i in range(n):
        cols = _unfold_hw(x[i])
        g = grad_out[i].reshape(rows, o)
        for kd in range(KERNEL):
            gw[kd] += cols[kd * plane:kd * plane + rows].T @ g
    gx = None
    if need_input_grad:
        # Adjoint of a same-padded correlation: correlate with the flipped,
        # channel-transposed kernel.
        flipped = np.ascontiguousarray(weight[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4))
        gx = conv3d_forward_cl(grad_out, flipped, None)
    grad_weight = gw.reshape(KERNEL, KERNEL, KERNEL, c, o).transpose(4, 3, 0, 1, 2)
    grad_bias = grad_out.reshape(-1, o).sum(axis=0)
    return gx, np.ascontiguousarray(grad_weight), grad_bias


def conv3d_forward(x, weight, bias):
    """Zero-padded 3x3x3 convolution that preserves the spatial shape.

    Parameters
    ----------
    x : ndarray, shape (N, C_in, D, H, W)
    weight : ndarray, shape (C_out, C_in, 3, 3, 3)
    bias : ndarray, shape (C_out,)

    Returns
    -------
    ndarray, shape (N, C_out, D, H, W)
    """
    if x.ndim != 5:
        raise ShapeError(f"conv3d expects input (N, C, D, H, W), got shape {x.shape}")
    return to_cf(conv3d_forward_cl(to_cl(x), weight, bias))


def conv3d_backward(x, weight, grad_out, need_input_grad=True):
    """Gradients of :func:`conv3d_forward`: ``(grad_input, grad_weight, grad_bias)``.

    ``grad_input`` is None when ``need_input_grad`` is false.
    """
    if x.ndim != 5 or grad_out.ndim != 5:
        raise ShapeError(f"conv3d_backward expects 5D arrays, got {x.shape} and {grad_out.shape}")
    gx, gw, gb = conv3d_backward_cl(to_cl(x), weight, to_cl(grad_out), need_input_grad)
    return (None if gx is None else to_cf(gx)), gw, gb


# --- pooling -----------------------------------------------------------------

def maxpool3d_cl(x):
    n, d, h, w, c = x.shape
    if min(d, h, w) < 2:
        raise ShapeError(f"maxpool3d needs spatial extents >= 2, got {(d, h, w)}")
    d2, h2, w2 = d // 2, h // 2, w // 2
    win = x[:, :2 * d2, :2 * h2, :2 * w2].reshape(n, d2, 2, h2, 2, w2, 2, c)
    win = win.transpose(0, 1, 3, 5, 7, 2, 4, 6).reshape(n, d2, h2, w2, c, 8)
    argmax = win.argmax(axis=-1)
    out = np.take_along_axis(win, argmax[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool3d_backward_cl(input_shape, argmax, grad_out):
    n, d, h, w, c = input_shape
    d2, h2, w2 = argmax.shape[1:4]
    gwin = np.zeros((n, d2, h2, w2, c, 8), dtype=grad_out.dtype)
    np.put_along_axis(gwin, argmax[..., None], grad_out[..., None], axis=-1)
    gwin = gwin.reshape(n, d2, h2, w2, c, 2, 2, 2).transpose(0, 1, 5, 2, 6, 3, 7, 4)
    gx = np.zeros(input_shape, dtype=grad_out.dtype)
    gx[:, :2 * d2, :2 * h2, :2 * w2] = gwin.reshape(n, 2 * d2, 2 * h2, 2 * w2, c)
    return gx


def maxpool3d(x):
    """2x2x2 max pooling with stride 2 and floor semantics (odd trailing slices dropped).

    Returns ``(out, argmax)``. ``argmax`` gives, for each output voxel, the
    window-local index 0..7 of the winning input voxel in raster order
    (depth, height, width); ties go to the lowest index, which is also the
    lowest input linear index.
    """
    if x.ndim != 5:
        raise ShapeError(f"maxpool3d expects (N, C, D, H, W), got {x.shape}")
    out, argmax = maxpool3d_cl(to_cl(x))
    return to_cf(out), to_cf(argmax)


def maxpool3d_backward(input_shape, argmax, grad_out):
    n, c, d, h, w = input_shape
    gx = maxpool3d_backward_cl((n, d, h, w, c), to_cl(argmax), to_cl(grad_out))
    return to_cf(gx)


# --- activations and normalization ------------------------------------------

@numba.njit(cache=True)
def _prelu_kernel(x, slopes, out):
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            out[i, j] = v if v > 0 else slopes[j] * v


@numba.njit(cache=True)
def _prelu_grad_kernel(x, slopes, g, gx, gs):
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            v = x[i, j]
            if v > 0:
                gx[i, j] = g[i, j]
            else:
                gx[i, j] = slopes[j] * g[i, j]
                gs[j] += v * g[i, j]


def _rows(a, n):
    return np.ascontiguousarray(a).reshape(n, -1)


def prelu(x, slopes):
    """Parametric ReLU; ``slopes`` has the shape of one sample ``x[0]``."""
    if x.shape[1:] != slopes.shape:
        raise ShapeError(f"PReLU slopes shape {slopes.shape} does not match sample shape {x.shape[1:]}")
    n = x.shape[0]
    out = np.empty(x.shape, dtype=np.result_type(x, slopes))
    _prelu_kernel(_rows(x, n), _rows(slopes.astype(out.dtype, copy=False), 1)[0], out.reshape(n, -1))
    return out


def prelu_backward(x, slopes, grad_out):
    """Returns ``(grad_input, grad_slopes)``."""
    n = x.shape[0]
    dtype = np.result_type(x, slopes, grad_out)
    gx = np.empty(x.shape, dtype=dtype)
    gs = np.zeros(slopes.shape, dtype=dtype)
    _prelu_grad_kernel(_rows(x, n), _rows(slopes.astype(dtype, copy=False), 1)[0],
                       _rows(grad_out, n), gx.reshape(n, -1), gs.reshape(-1))
    return gx, gs


def batchnorm_forward_cl(x, gamma, beta, running_mean, running_var, mode="train",
                         momentum=0.99, eps=1e-3):
    c = x.shape[-1]
    if gamma.shape != (c,):
        raise ShapeError(f"batchnorm expects one gamma per channel ({c}), got {gamma.shape}")
    if mode == "train":
        if x.shape[0] == 0:
            raise ValueError("batchnorm in train mode needs a non-empty batch")
        flat = x.reshape(-1, c)
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        new_mean = momentum * running_mean + (1 - momentum) * mean
        new_var = momentum * running_var + (1 - momentum) * var
    elif mode == "infer":
        mean, var = running_mean, running_var
        new_mean, new_var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x - mean.astype(x.dtype)) * inv_std
    out = xhat * gamma + beta
    return out, (xhat, inv_std, mode), new_mean, new_var


def batchnorm_backward_cl(gamma, cache, grad_out):
    xhat, inv_std, mode = cache
    c = xhat.shape[-1]
    g2 = grad_out.reshape(-1, c)
    ggamma = (g2 * xhat.reshape(-1, c)).sum(axis=0)
    gbeta = g2.sum(axis=0)
    if mode == "infer":
        return grad_out * (gamma * inv_std), ggamma, gbeta
    m = g2.shape[0]
    # gamma factored out of the batch sums: sum(g*gamma) = gamma*gbeta, etc.
    gx = (grad_out * m - gbeta - xhat * ggamma) * (gamma * inv_std / m)
    return gx, ggamma, gbeta


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=0.99, eps=1e-3):
    """Per-channel batch normalization over the batch and spatial axes.

    ``x`` is channel-first, ``(N, C, ...)``. Train mode normalizes with batch
    statistics and returns updated running averages
    ``momentum * running + (1 - momentum) * batch``; infer mode uses the
    running statistics and returns them unchanged.

    Returns ``(out, cache, new_running_mean, new_running_var)``.
    """
    out, cache, rm, rv = batchnorm_forward_cl(to_cl(x), gamma, beta, running_mean, running_var,
                                              mode, momentum, eps)
    return to_cf(out), cache, rm, rv


def batchnorm_backward(gamma, cache, grad_out):
    """Returns ``(grad_input, grad_gamma, grad_beta)`` for channel-first ``grad_out``."""
    gx, gg, gb = batchnorm_backward_cl(gamma, cache, to_cl(grad_out))
    return to_cf(gx), gg, gb


# --- dense layers, loss, dropout ---------------------------------------------

def dense_forward(x, weight, bias):
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} incompatible with weight {weight.shape}")
    return x @ weight.T + bias


def dense_backward(x, weight, grad_out):
    """Returns ``(grad_input, grad_weight, grad_bias)``."""
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def one_hot(labels, n_classes=2, dtype=np.float32):
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((len(labels), n_classes), dtype=dtype)
    out[np.arange(len(labels)), labels] = 1
    return out


def softmax_crossentropy(logits, labels):
    """Mean categorical cross-entropy over the batch and its gradient
    ``(softmax - labels) / batch`` w.r.t. the logits. ``labels`` is one-hot."""
    if logits.shape != labels.shape:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} differ")
    if not np.all(np.isfinite(logits)):
        raise FloatingPointError("non-finite logits")
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -(labels * logp).sum() / n
    grad = (np.exp(logp) - labels) / n
    return float(loss), grad.astype(logits.dtype, copy=False)


def dropout(x, p, mode, rng):
    """Inverted dropout: zero with probability ``p``, scale survivors by 1/(1-p).

    Returns ``(out, mask)``; ``mask`` is None when the layer is the identity
    (infer mode or ``p == 0``).
    """
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "infer" or p == 0:
        return x, None
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / np.asarray(1 - p, dtype=x.dtype)
    return x * mask, mask
