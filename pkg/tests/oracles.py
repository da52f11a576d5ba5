"""Slow reference implementations used as independent test oracles."""
import math

import numpy as np


def conv(x, w, b=None, stride=1, pad=0):
    """Direct sliding-window cross-correlation of (B, C, H, W) with (O, C, kh, kw)."""
    bsz, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((bsz, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((bsz, o, ho, wo))
    for i in range(ho):
        for j in range(wo):
            patch = xp[:, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
            for oc in range(o):
                out[:, oc, i, j] = (patch * w[oc]).sum(axis=(1, 2, 3))
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def gelu(x):
    return np.vectorize(lambda v: 0.5 * v * (1.0 + math.erf(v / math.sqrt(2.0))))(x)


def bn_eval(x, gamma, beta, rm, rv, eps=1e-5):
    c = x.shape[1]
    s = (1, c, 1, 1)
    return (x - rm.reshape(s)) / np.sqrt(rv.reshape(s) + eps) * gamma.reshape(s) + beta.reshape(s)


def layer_norm(x, gamma, beta, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gamma + beta


def softmax_rows(x):
    out = np.empty_like(x)
    for idx in np.ndindex(x.shape[:-1]):
        row = x[idx]
        e = np.array([math.exp(v - row.max()) for v in row])
        out[idx] = e / e.sum()
    return out


def bilinear_resize(img, oh, ow):
    """Per-pixel half-pixel-center bilinear resize of the last two axes."""
    h, w = img.shape[-2:]
    out = np.zeros(img.shape[:-2] + (oh, ow))
    for i in range(oh):
        sy = min(max((i + 0.5) * h / oh - 0.5, 0.0), h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for j in range(ow):
            sx = min(max((j + 0.5) * w / ow - 0.5, 0.0), w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[..., i, j] = ((1 - fy) * (1 - fx) * img[..., y0, x0] + (1 - fy) * fx * img[..., y0, x1]
                              + fy * (1 - fx) * img[..., y1, x0] + fy * fx * img[..., y1, x1])
    return out


# ---------------------------------------------------------------- CAM oracles, one sample each

def compute_cam(f, theta):
    """f (C, h, w), theta (C, K) -> (K, h, w) by explicit channel sums."""
    c, h, w = f.shape
    k = theta.shape[1]
    out = np.zeros((k, h, w))
    for cls in range(k):
        for i in range(h):
            for j in range(w):
                out[cls, i, j] = sum(theta[ch, cls] * f[ch, i, j] for ch in range(c))
    return out


def refine(a, m):
    """Each output pixel i (row-major) is sum_j a[i, j] * m[j]."""
    k, h, w = m.shape
    n = h * w
    out = np.zeros_like(m, dtype=np.float64)
    for cls in range(k):
        for i in range(n):
            s = 0.0
            for j in range(n):
                s += a[i, j] * m[cls, j // w, j % w]
            out[cls, i // w, i % w] = s
    return out


def attn_agg(a, m):
    """Token j spreads m[j] along its attention row: out[i] = sum_j a[j, i] * m[j]."""
    k, h, w = m.shape
    n = h * w
    out = np.zeros_like(m, dtype=np.float64)
    for cls in range(k):
        for j in range(n):
            for i in range(n):
                out[cls, i // w, i % w] += a[j, i] * m[cls, j // w, j % w]
    return out


def cls_attn(a_bar, m):
    k, h, w = m.shape
    out = np.zeros_like(m, dtype=np.float64)
    for cls in range(k):
        for i in range(h * w):
            out[cls, i // w, i % w] = a_bar[0, 1 + i] * m[cls, i // w, i % w]
    return out


def slice_class_token(a_bar):
    t = a_bar.shape[0]
    return np.array([[a_bar[i, j] for j in range(1, t)] for i in range(1, t)])


def normalize(m):
    out = np.zeros_like(m, dtype=np.float64)
    for cls in range(m.shape[0]):
        lo, hi = min(m[cls].ravel()), max(m[cls].ravel())
        if hi > lo:
            out[cls] = (m[cls] - lo) / (hi - lo)
    return out


def pseudo_label(m, tau, oh, ow):
    up = bilinear_resize(m, oh, ow)
    out = np.zeros((oh, ow), dtype=np.int64)
    for i in range(oh):
        for j in range(ow):
            best, arg = tau, 0
            for cls in range(m.shape[0]):
                if up[cls, i, j] > best:
                    best, arg = up[cls, i, j], cls + 1
            out[i, j] = arg
    return out
