"""Forward/backward pairs for the layer primitives.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes ``(dout, cache)``. Image tensors are ``(N, C, H, W)`` float32.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _as_batch(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected C x H x W or N x C x H x W, got shape {x.shape}")
    return x, False


# ---------------------------------------------------------------- convolution

def _im2col(x):
    """(N, C, H, W) -> (N*H*W, C*9) patches for a 3x3 kernel, pad 1, stride 1."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    # win: (N, C, H, W, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * h * w, c * 9)


def _col2im(dcols, shape):
    n, c, h, w = shape
    d = dcols.reshape(n, h, w, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for kh in range(3):
        for kw in range(3):
            dxp[:, :, kh:kh + h, kw:kw + w] += d[:, :, :, :, kh, kw].transpose(0, 3, 1, 2)
    return dxp[:, :, 1:-1, 1:-1]


def conv2d_forward(x, weight, bias):
    """3x3 convolution, stride 1, one-pixel zero padding.

    ``weight`` is ``(C_out, C_in, 3, 3)`` and ``bias`` is ``(C_out,)``.
    """
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise ValueError(f"conv2d expects a (C_out, C_in, 3, 3) kernel, got {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d input has {x.shape[1]} channels but kernel expects {weight.shape[1]}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ValueError("conv2d needs spatial extents >= 1")
    n, _, h, w = x.shape
    c_out = weight.shape[0]
    cols = _im2col(x)
    wmat = weight.reshape(c_out, -1)
    out = cols @ wmat.T
    out += bias
    out = np.ascontiguousarray(out.reshape(n, h, w, c_out).transpose(0, 3, 1, 2))
    return out, (cols, x.shape, weight)


def conv2d_backward(dout, cache):
    cols, xshape, weight = cache
    c_out = weight.shape[0]
    dmat = dout.transpose(0, 2, 3, 1).reshape(-1, c_out)
    dweight = (dmat.T @ cols).reshape(weight.shape)
    dbias = dmat.sum(axis=0)
    dcols = dmat @ weight.reshape(c_out, -1)
    return _col2im(dcols, xshape), dweight, dbias


# ----------------------------------------------------------- batch norm (2d)

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train):
    """Per-channel batch norm over (N, H, W).

    In train mode the running statistics are updated in place.
    """
    if train:
        if x.shape[0] < 2:
            raise ValueError("batch_norm in train mode needs a batch of at least 2")
        mean = x.mean(axis=(0, 2, 3), dtype=np.float64)
        var = x.var(axis=(0, 2, 3), dtype=np.float64)
        m = x.shape[0] * x.shape[2] * x.shape[3]
        running_mean *= 1 - BN_MOMENTUM
        running_mean += (BN_MOMENTUM * mean).astype(running_mean.dtype)
        running_var *= 1 - BN_MOMENTUM
        running_var += (BN_MOMENTUM * var * m / max(m - 1, 1)).astype(running_var.dtype)
        mean = mean.astype(x.dtype)
        var = var.astype(x.dtype)
    else:
        mean, var = running_mean.astype(x.dtype), running_var.astype(x.dtype)
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(x.dtype)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None] + beta[None, :, None, None]
    return out, (xhat, inv_std, gamma, train)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dout * xhat).sum(axis=(0, 2, 3))
    dbeta = dout.sum(axis=(0, 2, 3))
    dxhat = dout * gamma[None, :, None, None]
    if not train:
        return dxhat * inv_std[None, :, None, None], dgamma, dbeta
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dx = (dxhat - dxhat.mean(axis=(0, 2, 3), keepdims=True)
          - xhat * (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True) / m)
    return dx * inv_std[None, :, None, None], dgamma, dbeta


# ------------------------------------------------------------------- pooling

def maxpool2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2 needs even spatial extents, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2_backward(dout, cache):
    idx, (n, c, h, w) = cache
    dwin = np.zeros(idx.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, h, w)


def global_avg_pool_forward(x):
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dout, shape):
    n, c, h, w = shape
    return np.broadcast_to((dout / (h * w))[:, :, None, None], shape).astype(dout.dtype)


# ------------------------------------------------------------ bilinear resize

def interp_matrix(n_in, n_out, dtype=DTYPE):
    """Corner-aligned linear interpolation weights, shape (n_out, n_in)."""
    if n_in < 1 or n_out < 1:
        raise ValueError("resize extents must be >= 1")
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_out == 1 or n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    rows = np.arange(n_out)
    m[rows, lo] = 1.0 - frac
    m[rows, lo + 1] += frac
    return m.astype(dtype)


def bilinear_forward(x, out_h, out_w):
    ry = interp_matrix(x.shape[2], out_h, x.dtype)
    rx = interp_matrix(x.shape[3], out_w, x.dtype)
    out = np.einsum("yh,nchw,xw->ncyx", ry, x, rx, optimize=True)
    return out, (ry, rx)


def bilinear_backward(dout, cache):
    ry, rx = cache
    return np.einsum("yh,ncyx,xw->nchw", ry, dout, rx, optimize=True)


# ------------------------------------------------------------- dense / pointwise

def linear_forward(x, weight, bias):
    """``weight`` is ``(out, in)``; ``x`` is ``(N, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"fully_connected input has {x.shape[-1]} features, weights expect {weight.shape[1]}")
    return x @ weight.T + bias, (x, weight)


def linear_backward(dout, cache):
    x, weight = cache
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


def sigmoid_forward(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out, out


def sigmoid_backward(dout, out):
    return dout * out * (1.0 - out)


def dropout_forward(x, rate, train, rng):
    """Inverted dropout; identity outside training."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    if not train or rate == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1.0 - rate)
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


# ----------------------------------------------------- stateless conveniences

def conv2d(x, weight, bias):
    xb, squeeze = _as_batch(x)
    out, _ = conv2d_forward(xb, np.asarray(weight, DTYPE), np.asarray(bias, DTYPE))
    return out[0] if squeeze else out


def batch_norm(x, gamma, beta, running_mean, running_var, mode="eval"):
    """``mode`` is ``"train"`` or ``"eval"``; train mode updates the running stats in place."""
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    xb = np.asarray(x, DTYPE)
    if xb.ndim != 4:
        raise ValueError("batch_norm expects N x C x H x W")
    out, _ = batchnorm_forward(xb, np.asarray(gamma, DTYPE), np.asarray(beta, DTYPE),
                               running_mean, running_var, mode == "train")
    return out


def max_pool2(x):
    xb, squeeze = _as_batch(x)
    out, _ = maxpool2_forward(xb)
    return out[0] if squeeze else out


def bilinear_resize(x, out_h, out_w):
    xb, squeeze = _as_batch(x)
    out, _ = bilinear_forward(xb, out_h, out_w)
    return out[0] if squeeze else out


def global_avg_pool(x):
    xb, squeeze = _as_batch(x)
    out, _ = global_avg_pool_forward(xb)
    return out[0] if squeeze else out


def fully_connected(x, weight, bias):
    x = np.asarray(x, DTYPE)
    out, _ = linear_forward(np.atleast_2d(x), np.asarray(weight, DTYPE), np.asarray(bias, DTYPE))
    return out[0] if x.ndim == 1 else out


def relu(x):
    return relu_forward(np.asarray(x, DTYPE))[0]


def sigmoid(x):
    return sigmoid_forward(np.atleast_1d(np.asarray(x, DTYPE)))[0].reshape(np.shape(x))


def dropout(x, rate, train=False, rng=None):
    return dropout_forward(np.asarray(x, DTYPE), rate, train, rng)[0]
