"""Segmentation scores, SSIM and the BCE + Jaccard training loss."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imagecore import BinaryMask, ScalarImage

__all__ = [
    "LossInputs",
    "SsimParams",
    "InsufficientOverlapError",
    "bce_loss",
    "iou_loss",
    "combined_loss",
    "dice_score",
    "iou_score",
    "ssim",
]

BCE_EPS = 1e-7


class InsufficientOverlapError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LossInputs:
    """Flattened labels ``p`` in {0, 1} and predictions ``p_hat`` in [0, 1]."""

    p: np.ndarray
    p_hat: np.ndarray
    delta: float = 1e-5

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64).ravel()
        q = np.asarray(self.p_hat, dtype=np.float64).ravel()
        if p.shape != q.shape:
            raise ValueError(f"length mismatch: p has {p.size}, p_hat has {q.size}")
        if p.size == 0:
            raise ValueError("empty inputs")
        if not self.delta > 0:
            raise ValueError("delta must be positive")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "p_hat", q)

    @property
    def n(self):
        return self.p.size


def bce_loss(inp):
    q = np.clip(inp.p_hat, BCE_EPS, 1.0 - BCE_EPS)
    p = inp.p
    return float(-np.sum(p * np.log(q) + (1.0 - p) * np.log1p(-q)) / inp.n)


def iou_loss(inp):
    inter = float(np.sum(inp.p * inp.p_hat))
    total = float(np.sum(inp.p + inp.p_hat))
    return 1.0 - (inter + inp.delta) / (total - inter + inp.delta)


def combined_loss(inp):
    return bce_loss(inp) + iou_loss(inp)


def _pair(a, b):
    a = a.data if isinstance(a, BinaryMask) else np.asarray(a, dtype=bool)
    b = b.data if isinstance(b, BinaryMask) else np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask dimensions differ: {a.shape} vs {b.shape}")
    return a, b


def dice_score(a, b):
    """``2|A∩B| / (|A|+|B|)``; two empty masks score 1."""
    a, b = _pair(a, b)
    inter = int(np.count_nonzero(a & b))
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    return 1.0 if total == 0 else 2.0 * inter / total


def iou_score(a, b):
    """``|A∩B| / |A∪B|``; two empty masks score 1."""
    a, b = _pair(a, b)
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return 1.0 if union == 0 else inter / union


@dataclass(frozen=True)
class SsimParams:
    window: int = 11
    k1: float = 0.01
    k2: float = 0.03
    stride: int = 1

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("window must be odd and >= 3")
        if not (self.k1 > 0 and self.k2 > 0):
            raise ValueError("k1 and k2 must be positive")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


def _box_sums(x, w, stride):
    """Sums over every ``w x w`` window, top-left corners on a ``stride`` grid."""
    s = np.zeros((x.shape[0] + 1, x.shape[1] + 1))
    np.cumsum(np.cumsum(x, axis=0), axis=1, out=s[1:, 1:])
    tot = s[w:, w:] - s[:-w, w:] - s[w:, :-w] + s[:-w, :-w]
    return tot[::stride, ::stride]


def ssim(a, b, joint_validity=None, params=None):
    """Mean SSIM over uniform windows lying entirely inside ``joint_validity``.

    Dynamic range is 1. Statistics are population moments of each window.
    """
    params = params or SsimParams()
    x = a.data if isinstance(a, ScalarImage) else np.asarray(a, dtype=np.float64)
    y = b.data if isinstance(b, ScalarImage) else np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image dimensions differ: {x.shape} vs {y.shape}")
    if joint_validity is None:
        valid = np.ones(x.shape, dtype=bool)
    else:
        valid = joint_validity.data if isinstance(joint_validity, BinaryMask) else joint_validity
        if valid.shape != x.shape:
            raise ValueError("validity mask dimensions differ from the images")
    w = params.window
    if x.shape[0] < w or x.shape[1] < w:
        raise InsufficientOverlapError("insufficient overlap: image smaller than window")

    n = w * w
    keep = _box_sums(valid.astype(np.float64), w, params.stride) > n - 0.5
    if not keep.any():
        raise InsufficientOverlapError("insufficient overlap: no window inside the valid region")

    # centre on the valid-region means to limit cancellation in the moments
    cx, cy = x[valid].mean(), y[valid].mean()
    x, y = x - cx, y - cy
    sx = _box_sums(x, w, params.stride)[keep] / n
    sy = _box_sums(y, w, params.stride)[keep] / n
    sxx = _box_sums(x * x, w, params.stride)[keep] / n - sx * sx
    syy = _box_sums(y * y, w, params.stride)[keep] / n - sy * sy
    sxy = _box_sums(x * y, w, params.stride)[keep] / n - sx * sy

    mx, my = sx + cx, sy + cy
    c1 = params.k1 ** 2
    c2 = params.k2 ** 2
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    value = float(np.mean(num / den))
    return value if math.isfinite(value) else float("nan")
