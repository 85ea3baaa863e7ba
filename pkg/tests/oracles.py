"""Slow, independent reference implementations used as test oracles."""
import math

import numpy as np
from scipy import ndimage


def combined_loss_loop(p, q, delta=1e-5, eps=1e-7):
    n = len(p)
    bce = 0.0
    inter = 0.0
    total = 0.0
    for pi, qi in zip(p, q):
        qc = min(max(qi, eps), 1.0 - eps)
        bce -= pi * math.log(qc) + (1.0 - pi) * math.log(1.0 - qc)
        inter += pi * qi
        total += pi + qi
    return bce / n + 1.0 - (inter + delta) / (total - inter + delta)


def ssim_loop(x, y, valid=None, window=11, k1=0.01, k2=0.03):
    """Mean SSIM over every fully valid window, population moments."""
    h, w = x.shape
    if valid is None:
        valid = np.ones_like(x, dtype=bool)
    c1, c2 = k1 * k1, k2 * k2
    scores = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            if not valid[i:i + window, j:j + window].all():
                continue
            a = x[i:i + window, j:j + window].ravel()
            b = y[i:i + window, j:j + window].ravel()
            ma, mb = a.mean(), b.mean()
            va = ((a - ma) ** 2).mean()
            vb = ((b - mb) ** 2).mean()
            cov = ((a - ma) * (b - mb)).mean()
            scores.append(((2 * ma * mb + c1) * (2 * cov + c2))
                          / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(scores))


def _bilinear(img, u, v):
    # map_coordinates with order 1 is plain bilinear interpolation
    return ndimage.map_coordinates(img, [v, u], order=1, mode="nearest")


def _raw_errors(F, M, fx, fy, mx, my, p, bidirectional):
    a11, a12, a21, a22, tx, ty = p
    det = a11 * a22 - a12 * a21
    zx = (a22 * (fx - tx) - a12 * (fy - ty)) / det
    zy = (-a21 * (fx - tx) + a11 * (fy - ty)) / det
    parts = [F[fy.astype(int), fx.astype(int)] - _bilinear(M, zx, zy)]
    coords = [(zx, zy)]
    if bidirectional:
        ux = a11 * mx + a12 * my + tx
        uy = a21 * mx + a22 * my + ty
        parts.append(M[my.astype(int), mx.astype(int)] - _bilinear(F, ux, uy))
        coords.append((ux, uy))
    return parts, coords


def _valid_samples(img, valid, u, v):
    h, w = img.shape
    x0, y0 = np.floor(u).astype(int), np.floor(v).astype(int)
    ok = (x0 >= 0) & (y0 >= 0) & (x0 <= w - 2) & (y0 <= h - 2)
    xi, yi = np.where(ok, x0, 0), np.where(ok, y0, 0)
    return ok & valid[yi, xi] & valid[yi, xi + 1] & valid[yi + 1, xi] & valid[yi + 1, xi + 1]


def finite_difference_jacobian(F, M, fmask, mmask, p, k, bidirectional=True, h=1e-5,
                               margin=1e-3):
    """Central differences of the Huber-weighted residuals.

    Weights are frozen at the base point, which is what the analytic
    Jacobian represents. Returns ``(J_fd, keep)`` where ``keep`` flags rows
    whose sample lies at least ``margin`` from a cell boundary in every
    perturbed evaluation, so that the bilinear interpolant is smooth there.
    """
    fy, fx = np.nonzero(fmask)
    my, mx = np.nonzero(mmask)
    fx, fy, mx, my = (a.astype(np.float64) for a in (fx, fy, mx, my))
    base, coords = _raw_errors(F, M, fx, fy, mx, my, p, bidirectional)
    oks = [_valid_samples(M, mmask, *coords[0])]
    if bidirectional:
        oks.append(_valid_samples(F, fmask, *coords[1]))
    e = np.concatenate([b[o] for b, o in zip(base, oks)])
    a = np.abs(e)
    sw = np.sqrt(np.where(a <= k, 1.0, k / np.maximum(a, k)))

    cols = []
    keep = np.ones(e.size, dtype=bool)
    for j in range(6):
        dp = np.zeros(6)
        dp[j] = h
        plus, cp = _raw_errors(F, M, fx, fy, mx, my, p + dp, bidirectional)
        minus, cm = _raw_errors(F, M, fx, fy, mx, my, p - dp, bidirectional)
        col = np.concatenate([(pl[o] - mi[o]) / (2 * h) for pl, mi, o in zip(plus, minus, oks)])
        cols.append(col * sw)
        for c in (coords, cp, cm):
            frac = []
            for (u, v), o in zip(c, oks):
                fu, fv = u[o] - np.floor(u[o]), v[o] - np.floor(v[o])
                frac.append(np.minimum(np.minimum(fu, 1 - fu), np.minimum(fv, 1 - fv)))
            keep &= np.concatenate(frac) > margin
    return np.column_stack(cols), keep
