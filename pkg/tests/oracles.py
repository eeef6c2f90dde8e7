"""Independent reference implementations used only by the test-suite."""

import math

import numpy as np


def conv2d_naive(x, w, b, pad=0, stride=1):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, oh, ow))
    for a in range(n):
        for f in range(o):
            for i in range(oh):
                for j in range(ow):
                    acc = b[f]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[a, ch, i * stride + u, j * stride + v] * w[f, ch, u, v]
                    out[a, f, i, j] = acc
    return out


def maxpool2_naive(x):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[a, ch, i, j] = max(x[a, ch, 2 * i + u, 2 * j + v] for u in range(2) for v in range(2))
    return out


def upconv2_naive(x, w, b):
    n, c, h, wd = x.shape
    o = w.shape[1]
    out = np.zeros((n, o, 2 * h, 2 * wd)) + b.reshape(1, -1, 1, 1)
    for a in range(n):
        for ch in range(c):
            for i in range(h):
                for j in range(wd):
                    for f in range(o):
                        for u in range(2):
                            for v in range(2):
                                out[a, f, 2 * i + u, 2 * j + v] += x[a, ch, i, j] * w[ch, f, u, v]
    return out


def bce_naive(prob, target):
    out = []
    for p_img, y_img in zip(prob, target):
        total, count = 0.0, 0
        for p, y in zip(np.ravel(p_img), np.ravel(y_img)):
            p = min(max(float(p), 1e-7), 1 - 1e-7)
            total += -(y * math.log(p) + (1 - y) * math.log(1 - p))
            count += 1
        out.append(total / count)
    return np.array(out)


def mae_naive(prob, target):
    return np.array([np.mean([abs(float(p) - float(y)) for p, y in zip(np.ravel(a), np.ravel(b))]) for a, b in zip(prob, target)])


def adam_scalar(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook bias-corrected Adam on a scalar, one call per gradient in ``grads``."""
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return theta


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + h
        fp = f()
        flat[k] = old - h
        fm = f()
        flat[k] = old
        gf[k] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a, n, floor=1e-8):
    a, n = np.asarray(a, float), np.asarray(n, float)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


def dice_oracle(a, b):
    a, b = np.asarray(a).astype(bool).ravel(), np.asarray(b).astype(bool).ravel()
    tp = fp = fn = 0
    for x, y in zip(a, b):
        tp += x and y
        fp += x and not y
        fn += y and not x
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def lsdv_lstsq(ids, x, y):
    """Dummy-variable OLS via least squares (independent of the package's normal equations)."""
    units = sorted(set(ids))
    design = np.zeros((len(y), len(units) + 1))
    design[:, 0] = x
    for r, sid in enumerate(ids):
        design[r, 1 + units.index(sid)] = 1.0
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef[0], y - design @ coef
