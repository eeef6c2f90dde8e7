"""
Layer primitives with analytic gradients.

Every forward function returns ``(out, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Tensors are NCHW numpy arrays.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from plumeseg.errors import NumericsError, ShapeError

PROB_EPS = 1e-7


def check_finite(*arrays, where: str = "") -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericsError(f"non-finite values in {where or 'tensor'}")


def _conv_out(size: int, k: int, pad: int, stride: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise ShapeError(f"size {size} with kernel {k}, pad {pad}, stride {stride} gives a non-integer output")
    return span // stride + 1


def _im2col(xp, kh, kw, stride, oh, ow):
    """(n, c*kh*kw, oh*ow) patch matrix, rows ordered (c, kh, kw) like the kernel."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride]
    return cols.reshape(n, c * kh * kw, oh * ow)


def conv2d(x, w, b, pad: int = 0, stride: int = 1):
    """Cross-correlation of ``x`` (n, c, h, w) with kernel ``w`` (o, c, kh, kw)."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"kernel expects {ci} input channels, got {c}")
    if pad < 0 or stride < 1:
        raise ShapeError("pad must be >= 0 and stride >= 1")
    oh, ow = _conv_out(h, kh, pad, stride), _conv_out(wd, kw, pad, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, kh, kw, stride, oh, ow)
    out = np.matmul(w.reshape(o, -1), cols)
    out += b.reshape(1, o, 1)
    return out.reshape(n, o, oh, ow), (x.shape, cols, w, pad, stride, oh, ow)


def conv2d_backward(dout, cache, need_dx: bool = True):
    xshape, cols, w, pad, stride, oh, ow = cache
    n, c, h, wd = xshape
    o, _, kh, kw = w.shape
    d3 = dout.reshape(n, o, oh * ow)
    dw = np.matmul(d3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = d3.sum(axis=(0, 2))
    if not need_dx:
        return None, dw, db
    if stride == 1 and kh == kw and kh - 1 - pad >= 0:
        # full correlation with the flipped, channel-swapped kernel
        flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dx, _ = conv2d(dout, flipped, np.zeros(c, dtype=dout.dtype), pad=kh - 1 - pad)
        return dx, dw, db
    dcols = np.matmul(w.reshape(o, -1).T, d3).reshape(n, c, kh, kw, oh, ow)
    dxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad), dtype=dout.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def prelu(x, slope):
    if slope.shape != (x.shape[1],):
        raise ShapeError(f"slope length {slope.shape} != channels {x.shape[1]}")
    s = slope.reshape(1, -1, 1, 1)
    return np.where(x > 0, x, s * x), (x, slope)


def prelu_backward(dout, cache):
    x, slope = cache
    pos = x > 0
    dx = np.where(pos, dout, slope.reshape(1, -1, 1, 1) * dout)
    dslope = np.where(pos, 0, dout * x).sum(axis=(0, 2, 3))
    return dx, dslope


def maxpool2(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # first max in row-major window order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2_backward(dout, cache):
    (n, c, h, w), idx = cache
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def upconv2(x, w, b):
    """2x2, stride-2 transposed convolution; ``w`` has shape (c_in, c_out, 2, 2)."""
    n, c, h, wd = x.shape
    if w.ndim != 4 or w.shape[0] != c or w.shape[2:] != (2, 2):
        raise ShapeError(f"upconv2 kernel {w.shape} incompatible with {c} input channels")
    o = w.shape[1]
    xm = x.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    y = (xm @ w.reshape(c, o * 4)).reshape(n, h, wd, o, 2, 2)
    out = y.transpose(0, 3, 1, 4, 2, 5).reshape(n, o, 2 * h, 2 * wd)
    out += b.reshape(1, -1, 1, 1)
    return out, (x.shape, xm, w)


def upconv2_backward(dout, cache):
    (n, c, h, wd), xm, w = cache
    o = w.shape[1]
    dy = dout.reshape(n, o, h, 2, wd, 2).transpose(0, 2, 4, 1, 3, 5).reshape(n * h * wd, o * 4)
    dw = (xm.T @ dy).reshape(w.shape)
    dx = (dy @ w.reshape(c, o * 4).T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
    db = dout.sum(axis=(0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


def concat_skip(enc, dec):
    if enc.shape[0] != dec.shape[0] or enc.shape[2:] != dec.shape[2:]:
        raise ShapeError(f"cannot concatenate {enc.shape} with {dec.shape}")
    return np.concatenate([enc, dec], axis=1), enc.shape[1]


def concat_skip_backward(dout, split):
    return dout[:, :split], dout[:, split:]


def sigmoid(x):
    p = expit(x)
    return p, p


def sigmoid_backward(dout, p):
    return dout * p * (1 - p)


def _per_sample(prob, target):
    prob = np.asarray(prob)
    target = np.asarray(target)
    if prob.ndim == 4:
        prob = prob[:, 0] if prob.shape[1] == 1 else prob
    if target.ndim == 4:
        target = target[:, 0] if target.shape[1] == 1 else target
    if prob.shape != target.shape:
        raise ShapeError(f"prediction {prob.shape} and target {target.shape} differ")
    n = prob.shape[0]
    return prob.reshape(n, -1).astype(np.float64), target.reshape(n, -1).astype(np.float64)


def bce_loss(prob, target):
    """Per-sample binary cross entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p, y = _per_sample(prob, target)
    p = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    return -np.mean(y * np.log(p) + (1 - y) * np.log1p(-p), axis=1)


def bce_loss_backward(prob, target, dloss):
    """Gradient w.r.t. ``prob`` given upstream gradients ``dloss`` of each per-sample loss."""
    p, y = _per_sample(prob, target)
    inside = (p >= PROB_EPS) & (p <= 1 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    g = -(y / pc - (1 - y) / (1 - pc)) / p.shape[1]
    g = np.where(inside, g, 0.0) * np.asarray(dloss, dtype=np.float64)[:, None]
    return g.reshape(np.shape(prob)).astype(np.asarray(prob).dtype)


def mae_loss(prob, target):
    p, y = _per_sample(prob, target)
    return np.mean(np.abs(p - y), axis=1)


def mae_loss_backward(prob, target, dloss):
    p, y = _per_sample(prob, target)
    g = np.sign(p - y) / p.shape[1] * np.asarray(dloss, dtype=np.float64)[:, None]
    return g.reshape(np.shape(prob)).astype(np.asarray(prob).dtype)


LOSSES = {
    "bce": (bce_loss, bce_loss_backward),
    "mae": (mae_loss, mae_loss_backward),
}
