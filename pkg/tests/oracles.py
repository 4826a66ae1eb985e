"""Naive-loop reference implementations used as test oracles.

Written with explicit Python loops over plain floats so they share no code
path with the vectorised library.
"""
import math

import numpy as np


def conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0 if b is None else float(b.reshape(-1)[oi])
                    for ci in range(c):
                        for dy in range(k):
                            for dx in range(k):
                                iy, ix = y * stride + dy - pad, xx * stride + dx - pad
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += x[ni, ci, iy, ix] * w[oi, ci, dy, dx]
                    out[ni, oi, y, xx] = acc
    return out


def correlation(fl, fr, max_disp):
    n, c, h, w = fl.shape
    out = np.zeros((n, max_disp + 1, h, w))
    for ni in range(n):
        for d in range(max_disp + 1):
            for y in range(h):
                for x in range(w):
                    if x - d < 0:
                        continue
                    acc = 0.0
                    for ci in range(c):
                        acc += fl[ni, ci, y, x] * fr[ni, ci, y, x - d]
                    out[ni, d, y, x] = acc / c
    return out


def warp(img, disp):
    """Linear interpolation at x - d along rows; outside [0, W-1] -> 0."""
    n, c, h, w = img.shape
    out = np.zeros_like(img, dtype=float)
    for ni in range(n):
        for y in range(h):
            for x in range(w):
                s = x - disp[ni, 0, y, x]
                if s < 0 or s > w - 1:
                    continue
                i0 = int(math.floor(s))
                i1 = min(i0 + 1, w - 1)
                t = s - i0
                for ci in range(c):
                    out[ni, ci, y, x] = (1 - t) * img[ni, ci, y, i0] + t * img[ni, ci, y, i1]
    return out


def ssim(a, b, c1=0.01 ** 2, c2=0.03 ** 2):
    n, c, h, w = a.shape
    out = np.zeros((n, c, h - 2, w - 2))
    for ni in range(n):
        for ci in range(c):
            for y in range(h - 2):
                for x in range(w - 2):
                    pa = [a[ni, ci, y + i, x + j] for i in range(3) for j in range(3)]
                    pb = [b[ni, ci, y + i, x + j] for i in range(3) for j in range(3)]
                    ma, mb = sum(pa) / 9, sum(pb) / 9
                    va = sum(p * p for p in pa) / 9 - ma * ma
                    vb = sum(p * p for p in pb) / 9 - mb * mb
                    cov = sum(p * q for p, q in zip(pa, pb)) / 9 - ma * mb
                    out[ni, ci, y, x] = ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
    return out


def edge_smoothness(img, field):
    n, c, h, w = img.shape
    total = 0.0
    for ni in range(n):
        for y in range(h):
            for x in range(w):
                if 1 <= x <= w - 2:
                    dd = field[ni, 0, y, x - 1] - 2 * field[ni, 0, y, x] + field[ni, 0, y, x + 1]
                    di = sum(img[ni, ci, y, x - 1] - 2 * img[ni, ci, y, x] + img[ni, ci, y, x + 1]
                             for ci in range(c)) / c
                    total += abs(dd) * math.exp(-abs(di))
                if 1 <= y <= h - 2:
                    dd = field[ni, 0, y - 1, x] - 2 * field[ni, 0, y, x] + field[ni, 0, y + 1, x]
                    di = sum(img[ni, ci, y - 1, x] - 2 * img[ni, ci, y, x] + img[ni, ci, y + 1, x]
                             for ci in range(c)) / c
                    total += abs(dd) * math.exp(-abs(di))
    return total / (n * h * w)


def metrics(pred, gt):
    """(rmse_mm, mae_mm, irmse_per_km, imae_per_km) over gt > 0."""
    se = ae = ise = iae = 0.0
    cnt = 0
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if g <= 0:
            continue
        cnt += 1
        e = (p - g) * 1000.0
        ie = 1.0 / (p / 1000.0) - 1.0 / (g / 1000.0)
        se += e * e
        ae += abs(e)
        ise += ie * ie
        iae += abs(ie)
    return math.sqrt(se / cnt), ae / cnt, math.sqrt(ise / cnt), iae / cnt


def adam(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Scalar Adam over a sequence of gradients."""
    m = v = 0.0
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mh = m / (1 - b1 ** t)
        vh = v / (1 - b2 ** t)
        theta = theta - lr * mh / (math.sqrt(vh) + eps)
    return theta
