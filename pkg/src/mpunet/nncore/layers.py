"""Forward/backward kernels for the layer kinds used by the UNet family.

Tensors are NHWC. Every ``*_forward`` returns ``(out, cache)``; every
``*_backward`` takes the upstream gradient and the cache and returns
``(input_grads, param_grads)``. Arithmetic follows the dtype of the inputs.
"""

from __future__ import annotations

import numpy as np


# ------------------------------------------------------------------- conv

def _im2col(x, k):
    p = k // 2
    if k == 1:
        return x
    b, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = np.empty((b, h, w, k * k * c), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            t = i * k + j
            cols[..., t * c:(t + 1) * c] = xp[:, i:i + h, j:j + w, :]
    return cols


def conv_forward(x, w, b, keep_cols=True):
    """Stride-1 'same' convolution with a ``(k, k, cin, cout)`` kernel.

    The im2col matrix is returned as the cache so backward does not rebuild it.
    """
    k, _, cin, cout = w.shape
    cols = _im2col(x, k).reshape(-1, k * k * cin)
    out = cols @ w.reshape(k * k * cin, cout)
    out += b
    return out.reshape(x.shape[:3] + (cout,)), (cols if keep_cols else None, x.shape)


def conv_backward(dout, cache, w):
    cols, xshape = cache
    k, _, cin, cout = w.shape
    bsz, h, wd, _ = xshape
    d2 = dout.reshape(-1, cout)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    if k == 1:
        return (d2 @ w.reshape(cin, cout).T).reshape(xshape), dw, db
    if cin > cout:
        # input gradient as a correlation of dout with the flipped, transposed kernel
        wf = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))
        dx, _ = conv_forward(dout, wf, np.zeros(cin, dtype=dout.dtype), keep_cols=False)
        return dx, dw, db
    dcols = (d2 @ w.reshape(k * k * cin, cout).T).reshape(bsz, h, wd, k * k * cin)
    p = k // 2
    dxp = np.zeros((bsz, h + 2 * p, wd + 2 * p, cin), dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            t = i * k + j
            dxp[:, i:i + h, j:j + wd, :] += dcols[..., t * cin:(t + 1) * cin]
    return dxp[:, p:p + h, p:p + wd, :], dw, db


# ------------------------------------------------------ transposed conv x2

def _tap_slices(offset, n):
    """Input/output slices for a tap whose input ``i`` lands on output ``2i - offset``."""
    lo = max(0, -(-offset // 2))
    hi = min(n, (2 * n - 1 + offset) // 2 + 1)
    if hi <= lo:
        return None
    start = 2 * lo - offset
    return slice(lo, hi), slice(start, start + 2 * (hi - lo) - 1, 2)


def tconv_forward(x, w, b):
    """Stride-2 transposed convolution (output twice the input size).

    Equivalent to inserting zeros between input pixels and applying a
    'same' ``k x k`` convolution, but only the non-zero taps are computed.
    """
    k, _, cin, cout = w.shape
    bsz, h, wd, _ = x.shape
    p = k // 2
    taps = (x.reshape(-1, cin) @ w.transpose(2, 0, 1, 3).reshape(cin, k * k * cout))
    taps = taps.reshape(bsz, h, wd, k, k, cout)
    out = np.zeros((bsz, 2 * h, 2 * wd, cout), dtype=x.dtype)
    for ky in range(k):
        rs = _tap_slices(ky - p, h)
        if rs is None:
            continue
        for kx in range(k):
            cs = _tap_slices(kx - p, wd)
            if cs is None:
                continue
            out[:, rs[1], cs[1], :] += taps[:, rs[0], cs[0], ky, kx, :]
    out += b
    return out, x


def tconv_backward(dout, x, w):
    k, _, cin, cout = w.shape
    bsz, h, wd, _ = x.shape
    p = k // 2
    dtaps = np.zeros((bsz, h, wd, k, k, cout), dtype=dout.dtype)
    for ky in range(k):
        rs = _tap_slices(ky - p, h)
        if rs is None:
            continue
        for kx in range(k):
            cs = _tap_slices(kx - p, wd)
            if cs is None:
                continue
            dtaps[:, rs[0], cs[0], ky, kx, :] = dout[:, rs[1], cs[1], :]
    dtaps = dtaps.reshape(-1, k * k * cout)
    wmat = w.transpose(2, 0, 1, 3).reshape(cin, k * k * cout)
    dx = (dtaps @ wmat.T).reshape(x.shape)
    dw = (x.reshape(-1, cin).T @ dtaps).reshape(cin, k, k, cout).transpose(1, 2, 0, 3)
    db = dout.reshape(-1, cout).sum(axis=0)
    return dx, np.ascontiguousarray(dw), db


# ------------------------------------------------------------ batchnorm

def bn_forward(x, gamma, beta, running_mean, running_var, train, momentum=0.9, eps=1e-5):
    if train:
        mean = x.mean(axis=(0, 1, 2))
        var = x.var(axis=(0, 1, 2))
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def bn_backward(dout, cache, gamma):
    xhat, inv_std = cache
    n = xhat.shape[0] * xhat.shape[1] * xhat.shape[2]
    dbeta = dout.sum(axis=(0, 1, 2))
    dgamma = (dout * xhat).sum(axis=(0, 1, 2))
    dx = (gamma * inv_std / n) * (n * dout - dbeta - xhat * dgamma)
    return dx.astype(dout.dtype, copy=False), dgamma, dbeta


# ------------------------------------------------------------ pointwise

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(dout, mask):
    return dout * mask


# ------------------------------------------------------------ resampling

def maxpool_forward(x, f):
    b, h, w, c = x.shape
    if h % f or w % f:
        raise ValueError(f"spatial size {(h, w)} not divisible by pool factor {f}")
    blocks = x.reshape(b, h // f, f, w // f, f, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(b, h // f, w // f, c, f * f)
    idx = blocks.argmax(axis=-1)[..., None]
    return np.take_along_axis(blocks, idx, axis=-1)[..., 0], (idx, x.shape)


def maxpool_backward(dout, cache, f):
    idx, shape = cache
    b, h, w, c = shape
    dblocks = np.zeros(dout.shape + (f * f,), dtype=dout.dtype)
    np.put_along_axis(dblocks, idx, dout[..., None], axis=-1)
    dblocks = dblocks.reshape(b, h // f, w // f, c, f, f).transpose(0, 1, 4, 2, 5, 3)
    return dblocks.reshape(shape)


def upsample_nearest_forward(x, f):
    return np.repeat(np.repeat(x, f, axis=1), f, axis=2)


def upsample_nearest_backward(dout, f):
    b, h, w, c = dout.shape
    return dout.reshape(b, h // f, f, w // f, f, c).sum(axis=(2, 4))


def bilinear_matrix(n, f, dtype=np.float64):
    """``(f*n, n)`` interpolation matrix with half-pixel centres and edge clamping."""
    dst = np.arange(n * f)
    src = np.clip((dst + 0.5) / f - 0.5, 0, n - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = src - i0
    a = np.zeros((n * f, n), dtype=dtype)
    np.add.at(a, (dst, i0), 1.0 - frac)
    np.add.at(a, (dst, i1), frac)
    return a


def upsample_bilinear_forward(x, f):
    _, h, w, _ = x.shape
    ah = bilinear_matrix(h, f, x.dtype)
    aw = bilinear_matrix(w, f, x.dtype)
    y = np.einsum("ph,bhwc->bpwc", ah, x, optimize=True)
    return np.einsum("qw,bpwc->bpqc", aw, y, optimize=True), (ah, aw)


def upsample_bilinear_backward(dout, cache):
    ah, aw = cache
    d = np.einsum("qw,bpqc->bpwc", aw, dout, optimize=True)
    return np.einsum("ph,bpwc->bhwc", ah, d, optimize=True)


# ------------------------------------------------------------ softmax / CE

def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def cross_entropy(logits, labels):
    """Mean per-pixel categorical cross-entropy and its gradient w.r.t. ``logits``."""
    k = logits.shape[-1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"label shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label outside [0, {k - 1}]")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    lab = labels.astype(np.int64)[..., None]
    n = labels.size
    value = -np.take_along_axis(logp, lab, axis=-1).sum(dtype=np.float64) / n
    grad = np.exp(logp)
    np.put_along_axis(grad, lab, np.take_along_axis(grad, lab, axis=-1) - 1, axis=-1)
    grad /= n
    return float(value), grad
