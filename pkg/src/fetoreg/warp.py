"""Planar affine transforms and mask-aware bilinear warping.

Pixel centres sit at integer coordinates with the origin at the top-left
pixel; ``x`` runs along columns and ``y`` along rows.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .imagecore import BinaryMask, ScalarImage

__all__ = [
    "AffineTransform",
    "DegenerateTransformError",
    "WarpResult",
    "compose",
    "invert",
    "warp_image",
    "circular_mask",
    "corner_reprojection_error",
    "default_visibility",
    "bilinear_sample",
    "read_transforms_csv",
    "write_transforms_csv",
]

DET_MIN = 1.0 / 16.0
DET_MAX = 16.0
PARAM_NAMES = ("a11", "a12", "a21", "a22", "tx", "ty")


class DegenerateTransformError(ValueError):
    pass


@dataclass(frozen=True)
class AffineTransform:
    """Maps ``(x, y)`` to ``(a11*x + a12*y + tx, a21*x + a22*y + ty)``."""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        for name in PARAM_NAMES:
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise DegenerateTransformError(f"non-finite parameter {name}={value}")
            object.__setattr__(self, name, value)
        det = abs(self.det)
        if not DET_MIN <= det <= DET_MAX:
            raise DegenerateTransformError(
                f"|det| = {det:.6g} outside [{DET_MIN}, {DET_MAX}]"
            )

    @property
    def det(self):
        return self.a11 * self.a22 - self.a12 * self.a21

    @classmethod
    def identity(cls):
        return cls()

    @classmethod
    def translation(cls, tx, ty):
        return cls(tx=tx, ty=ty)

    @classmethod
    def scaling(cls, sx, sy=None):
        return cls(a11=sx, a22=sx if sy is None else sy)

    @classmethod
    def rotation(cls, degrees, cx=0.0, cy=0.0):
        """Rotation by ``degrees`` about ``(cx, cy)``."""
        th = math.radians(degrees)
        c, s = math.cos(th), math.sin(th)
        return cls(c, -s, s, c, cx - c * cx + s * cy, cy - s * cx - c * cy)

    @classmethod
    def from_params(cls, p):
        return cls(*(float(v) for v in p))

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2])

    @property
    def params(self):
        return np.array([getattr(self, n) for n in PARAM_NAMES])

    @property
    def matrix(self):
        """3x3 homogeneous matrix."""
        return np.array(
            [[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty], [0.0, 0.0, 1.0]]
        )

    def apply(self, x, y):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        return self.a11 * x + self.a12 * y + self.tx, self.a21 * x + self.a22 * y + self.ty

    def to_dict(self):
        return {n: getattr(self, n) for n in PARAM_NAMES}

    @classmethod
    def from_dict(cls, d):
        return cls(**{n: float(d[n]) for n in PARAM_NAMES})

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def __matmul__(self, other):
        return compose(self, other)


def compose(outer, inner):
    """``compose(A, B)(x) == A(B(x))``."""
    return AffineTransform(
        outer.a11 * inner.a11 + outer.a12 * inner.a21,
        outer.a11 * inner.a12 + outer.a12 * inner.a22,
        outer.a21 * inner.a11 + outer.a22 * inner.a21,
        outer.a21 * inner.a12 + outer.a22 * inner.a22,
        outer.a11 * inner.tx + outer.a12 * inner.ty + outer.tx,
        outer.a21 * inner.tx + outer.a22 * inner.ty + outer.ty,
    )


def invert(t):
    det = t.det
    if abs(det) < 1e-12:
        raise DegenerateTransformError(f"transform is singular (det={det:.3g})")
    i11, i12 = t.a22 / det, -t.a12 / det
    i21, i22 = -t.a21 / det, t.a11 / det
    return AffineTransform(
        i11, i12, i21, i22, -(i11 * t.tx + i12 * t.ty), -(i21 * t.tx + i22 * t.ty)
    )


def bilinear_sample(img, valid, u, v, with_gradient=False):
    """Sample ``img`` at float coordinates ``(u, v)``.

    The interpolation footprint is always ``floor(u)..floor(u)+1`` by
    ``floor(v)..floor(v)+1``; a sample is valid only when all four lie inside
    the image and inside ``valid`` (pass None to use the image bounds alone). Invalid
    samples return 0. With ``with_gradient`` the exact partial derivatives
    of the bilinear interpolant are returned too (one-sided within a cell).
    """
    h, w = img.shape
    x0 = np.floor(u)
    y0 = np.floor(v)
    inside = (x0 >= 0) & (y0 >= 0) & (x0 <= w - 2) & (y0 <= h - 2)
    xi = np.where(inside, x0, 0).astype(np.intp)
    yi = np.where(inside, y0, 0).astype(np.intp)
    fx = np.where(inside, u - xi, 0.0)
    fy = np.where(inside, v - yi, 0.0)

    flat = img.ravel()
    idx = yi * w + xi
    i00 = flat[idx]
    i01 = flat[idx + 1]
    i10 = flat[idx + w]
    i11 = flat[idx + w + 1]
    ok = inside
    if valid is not None:
        vf = valid.ravel()
        ok = ok & vf[idx] & vf[idx + 1] & vf[idx + w] & vf[idx + w + 1]

    top = i00 + fx * (i01 - i00)
    bot = i10 + fx * (i11 - i10)
    val = np.where(ok, top + fy * (bot - top), 0.0)
    if not with_gradient:
        return val, ok
    gx = (1.0 - fy) * (i01 - i00) + fy * (i11 - i10)
    gy = bot - top
    return val, ok, np.where(ok, gx, 0.0), np.where(ok, gy, 0.0)


@dataclass(frozen=True, eq=False)
class WarpResult:
    image: ScalarImage
    validity: BinaryMask


def warp_image(src, src_visibility, T, out_width, out_height):
    """Inverse-warp ``src``: output pixel ``(x, y)`` samples ``src`` at ``T(x, y)``."""
    if src.shape != src_visibility.shape:
        raise ValueError(
            f"image {src.shape} and visibility {src_visibility.shape} differ in size"
        )
    ys, xs = np.mgrid[0:out_height, 0:out_width].astype(np.float64)
    u, v = T.apply(xs, ys)
    val, ok = bilinear_sample(src.data, src_visibility.data, u, v)
    # interpolation of [0,1] values stays in [0,1] up to rounding
    return WarpResult(ScalarImage(np.clip(val, 0.0, 1.0)), BinaryMask(ok))


def circular_mask(width, height, cx, cy, r):
    if r <= 0:
        raise ValueError(f"radius must be positive, got {r}")
    ys, xs = np.mgrid[0:height, 0:width]
    return BinaryMask((xs - cx) ** 2 + (ys - cy) ** 2 <= r * r)


def default_visibility(width, height, margin=0.02):
    """Circle inscribed in the frame, shrunk by ``margin`` of its radius."""
    r = 0.5 * min(width, height) * (1.0 - margin)
    return circular_mask(width, height, (width - 1) / 2.0, (height - 1) / 2.0, r)


def corner_reprojection_error(estimated, truth, width, height):
    """Largest distance between the frame corners mapped by two transforms."""
    xs = np.array([0.0, width - 1.0, width - 1.0, 0.0])
    ys = np.array([0.0, 0.0, height - 1.0, height - 1.0])
    ex, ey = estimated.apply(xs, ys)
    gx, gy = truth.apply(xs, ys)
    return float(np.max(np.hypot(ex - gx, ey - gy)))


def write_transforms_csv(transforms, path):
    with open(os.fspath(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PARAM_NAMES)
        for t in transforms:
            writer.writerow([repr(getattr(t, n)) for n in PARAM_NAMES])


def read_transforms_csv(path):
    """Read 6-column rows; a header row naming the columns is optional."""
    out = []
    with open(os.fspath(path), newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip() == "a11":
                continue
            if len(row) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 columns, got {len(row)}")
            out.append(AffineTransform(*(float(c) for c in row)))
    return out
