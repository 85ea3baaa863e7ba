"""Direct affine registration of frame pairs.

Coarse-to-fine Levenberg-Marquardt on a Huber-robust photometric cost with
an analytic Jacobian. Every transform accepted or returned here follows one
convention: it maps *moving*-frame coordinates into *fixed*-frame
coordinates. The forward residual compares the fixed image with the moving
image resampled through the inverse map; the backward residual compares
the moving image with the fixed image resampled through the map itself.
"""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .imagecore import BinaryMask, ScalarImage
from .warp import (
    DET_MAX,
    DET_MIN,
    AffineTransform,
    DegenerateTransformError,
    bilinear_sample,
)

__all__ = [
    "RegistrationOptions",
    "RegistrationResult",
    "Pyramid",
    "CostEvaluation",
    "InsufficientOverlapError",
    "SingularSystemError",
    "build_pyramid",
    "photometric_cost",
    "lm_solve",
    "register_pair",
    "register_sequence",
]

log = logging.getLogger(__name__)

MIN_LEVEL_SIZE = 32
LAMBDA_CEILING = 1e8


class InsufficientOverlapError(RuntimeError):
    pass


class SingularSystemError(RuntimeError):
    pass


@dataclass
class RegistrationOptions:
    pyramid_levels: int = 4
    scale_factor: float = 0.5
    max_iterations_per_level: int = 50
    param_tolerance: float = 1e-6
    lm_lambda_init: float = 1e-3
    lm_lambda_up: float = 10.0
    lm_lambda_down: float = 10.0
    robust_threshold: float = 0.1
    bidirectional: bool = True
    min_valid_fraction: float = 0.05
    # Gaussian pre-filter of the full-resolution inputs; 0 disables it
    presmooth_sigma: float = 1.0

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be >= 1")
        if not 0.0 < self.scale_factor < 1.0:
            raise ValueError("scale_factor must lie in (0, 1)")
        if self.max_iterations_per_level < 1:
            raise ValueError("max_iterations_per_level must be >= 1")
        for name in ("param_tolerance", "lm_lambda_init", "robust_threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not (self.lm_lambda_up > 1 and self.lm_lambda_down > 1):
            raise ValueError("lambda factors must exceed 1")
        if not 0.0 <= self.min_valid_fraction < 1.0:
            raise ValueError("min_valid_fraction must lie in [0, 1)")
        if self.presmooth_sigma < 0:
            raise ValueError("presmooth_sigma must be >= 0")

    @classmethod
    def from_mapping(cls, mapping):
        known = {f.name: f for f in fields(cls)}
        unknown = set(mapping) - set(known)
        if unknown:
            raise ValueError(f"unknown registration options: {sorted(unknown)}")
        kwargs = {}
        for key, value in mapping.items():
            default = known[key].default
            if isinstance(default, bool):
                if isinstance(value, str):
                    value = value.strip().lower() in ("1", "true", "yes", "on")
                kwargs[key] = bool(value)
            else:
                kwargs[key] = type(default)(value)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path):
        """Load from a JSON or TOML file; a ``[registration]`` table is honoured."""
        data = load_config_file(path)
        return cls.from_mapping(data.get("registration", data))

    def to_dict(self):
        return asdict(self)


def load_config_file(path):
    path = os.fspath(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


@dataclass
class RegistrationResult:
    transform: AffineTransform
    final_cost: float
    iterations_per_level: list
    converged: bool
    valid_pixel_fraction: float
    # accepted-step costs per level, coarsest level first
    cost_trace: list = field(default_factory=list)
    error: str | None = None

    def to_dict(self):
        cost = self.final_cost if math.isfinite(self.final_cost) else None
        return {
            "transform": self.transform.to_dict(),
            "final_cost": cost,
            "iterations_per_level": list(self.iterations_per_level),
            "converged": self.converged,
            "valid_pixel_fraction": self.valid_pixel_fraction,
            "error": self.error,
        }


@dataclass(frozen=True, eq=False)
class Pyramid:
    levels: tuple
    scale_factor: float

    def __len__(self):
        return len(self.levels)


def presmooth(img, mask, sigma):
    """Blur ``img`` and erode ``mask`` by the kernel radius.

    The erosion keeps pixels whose blurred value mixed in samples from
    outside the visible region (the black surround of a circular field of
    view) out of the cost.
    """
    if sigma <= 0:
        return img, mask
    radius = max(1, int(math.ceil(3.0 * sigma)))
    smooth = ndimage.gaussian_filter(img.data, sigma, mode="nearest", radius=radius)
    footprint = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    eroded = ndimage.binary_erosion(mask.data, structure=footprint, border_value=0)
    return ScalarImage.clipped(smooth), BinaryMask(eroded)


def _pyramid_for(img, mask, opts):
    img, mask = presmooth(img, mask, opts.presmooth_sigma)
    return build_pyramid(img, mask, opts.pyramid_levels, opts.scale_factor)


def _smoothing_sigma(scale_factor):
    return 0.5 / scale_factor


def build_pyramid(img, mask, levels, scale_factor):
    """Gaussian pyramid; level 0 is the input, coarser levels follow.

    Each coarse pixel ``i`` sits at fine coordinate ``i / scale_factor``.
    The 5x5 Gaussian pre-filter makes a coarse pixel depend on a 5x5 fine
    neighbourhood, so the mask is eroded by that footprint before sampling.
    """
    if img.shape != mask.shape:
        raise ValueError("image and mask differ in size")
    levels = max(1, int(levels))
    h, w = img.shape
    n = 1
    while n < levels:
        h, w = math.ceil(h * scale_factor), math.ceil(w * scale_factor)
        if min(h, w) < MIN_LEVEL_SIZE:
            break
        n += 1
    if n < levels:
        log.debug("pyramid reduced from %d to %d levels", levels, n)

    sigma = _smoothing_sigma(scale_factor)
    footprint = np.ones((5, 5), dtype=bool)
    out = [(img, mask)]
    for _ in range(1, n):
        prev_img, prev_mask = out[-1]
        ph, pw = prev_img.shape
        smooth = ndimage.gaussian_filter(prev_img.data, sigma, mode="nearest", radius=2)
        eroded = ndimage.binary_erosion(prev_mask.data, structure=footprint, border_value=0)
        nh, nw = math.ceil(ph * scale_factor), math.ceil(pw * scale_factor)
        ys, xs = np.mgrid[0:nh, 0:nw].astype(np.float64)
        u, v = xs / scale_factor, ys / scale_factor
        vals = ndimage.map_coordinates(smooth, [v, u], order=1, mode="nearest")
        _, ok = bilinear_sample(eroded.astype(np.float64), eroded, u, v)
        out.append((ScalarImage.clipped(vals), BinaryMask(ok)))
    return Pyramid(tuple(out), scale_factor)


class _Level:
    """Cached per-image arrays for repeated cost evaluations."""

    __slots__ = ("img", "mask", "xs", "ys", "vals", "n_pixels", "shape")

    def __init__(self, img, mask):
        if img.shape != mask.shape:
            raise ValueError("image and mask differ in size")
        self.img = img.data
        self.mask = mask.data
        ys, xs = np.nonzero(self.mask)
        self.xs = xs.astype(np.float64)
        self.ys = ys.astype(np.float64)
        self.vals = self.img[ys, xs]
        self.n_pixels = self.img.size
        self.shape = img.shape


class CostEvaluation(NamedTuple):
    cost: float
    residuals: np.ndarray
    jacobian: np.ndarray | None
    valid_fraction: float


def _huber(e, k):
    a = np.abs(e)
    quad = a <= k
    rho = np.where(quad, e * e, 2.0 * k * a - k * k)
    weight = np.where(quad, 1.0, k / np.maximum(a, k))
    return rho, np.sqrt(weight)


def _evaluate(fixed, moving, p, k, bidirectional, min_valid_fraction, with_jacobian=True):
    a11, a12, a21, a22, tx, ty = p
    det = a11 * a22 - a12 * a21
    if not (np.isfinite(det) and DET_MIN <= abs(det) <= DET_MAX):
        raise DegenerateTransformError(f"|det| = {abs(det):.6g} out of bounds")
    i11, i12, i21, i22 = a22 / det, -a12 / det, -a21 / det, a11 / det

    # forward: fixed pixel x against moving sampled at z = T^-1(x)
    dx, dy = fixed.xs - tx, fixed.ys - ty
    zx = i11 * dx + i12 * dy
    zy = i21 * dx + i22 * dy
    if with_jacobian:
        val, ok, gx, gy = bilinear_sample(moving.img, moving.mask, zx, zy, True)
    else:
        val, ok = bilinear_sample(moving.img, moving.mask, zx, zy)
    errs = [fixed.vals[ok] - val[ok]]
    jacs = []
    if with_jacobian:
        gx, gy, zx, zy = gx[ok], gy[ok], zx[ok], zy[ok]
        cx = gx * i11 + gy * i21
        cy = gx * i12 + gy * i22
        jacs.append(np.column_stack((cx * zx, cx * zy, cy * zx, cy * zy, cx, cy)))
    n_valid = int(np.count_nonzero(ok))
    n_total = fixed.n_pixels

    if bidirectional:
        # backward: moving pixel y against fixed sampled at u = T(y)
        ux = a11 * moving.xs + a12 * moving.ys + tx
        uy = a21 * moving.xs + a22 * moving.ys + ty
        if with_jacobian:
            val, okb, gx, gy = bilinear_sample(fixed.img, fixed.mask, ux, uy, True)
        else:
            val, okb = bilinear_sample(fixed.img, fixed.mask, ux, uy)
        errs.append(moving.vals[okb] - val[okb])
        if with_jacobian:
            gx, gy = gx[okb], gy[okb]
            yx, yy = moving.xs[okb], moving.ys[okb]
            jacs.append(-np.column_stack((gx * yx, gx * yy, gy * yx, gy * yy, gx, gy)))
        n_valid += int(np.count_nonzero(okb))
        n_total += moving.n_pixels

    valid_fraction = n_valid / n_total
    if n_valid == 0 or valid_fraction < min_valid_fraction:
        raise InsufficientOverlapError(
            f"insufficient overlap: valid fraction {valid_fraction:.4f} "
            f"< {min_valid_fraction}"
        )
    e = np.concatenate(errs) if len(errs) > 1 else errs[0]
    rho, sw = _huber(e, k)
    cost = float(rho.sum() / n_valid)
    jac = None
    if with_jacobian:
        jac = np.concatenate(jacs) if len(jacs) > 1 else jacs[0]
        jac *= sw[:, None]
    return CostEvaluation(cost, sw * e, jac, valid_fraction)


def photometric_cost(fixed, moving, T, robust_threshold=0.1, bidirectional=True,
                     min_valid_fraction=0.05):
    """Robust photometric cost of aligning ``moving`` onto ``fixed`` with ``T``.

    ``fixed`` and ``moving`` are ``(ScalarImage, BinaryMask)`` pairs and ``T``
    maps moving coordinates to fixed coordinates. Residuals are
    ``sqrt(w) * e`` with Huber IRLS weights ``w``; the Jacobian holds the
    exact derivatives of the raw errors ``e`` with respect to
    ``(a11, a12, a21, a22, tx, ty)``, scaled by the same weights. The cost is
    ``sum(huber(e)) / n_valid``.
    """
    f, m = _Level(*fixed), _Level(*moving)
    if f.shape != m.shape:
        raise ValueError("fixed and moving images differ in size")
    return _evaluate(f, m, T.params, robust_threshold, bidirectional, min_valid_fraction)


def _lm_level(f, m, p, opts):
    """Run LM on one level. Returns (params, evaluation, iterations, converged, trace)."""
    k, bidir, floor = opts.robust_threshold, opts.bidirectional, opts.min_valid_fraction
    ev = _evaluate(f, m, p, k, bidir, floor)
    lam = opts.lm_lambda_init
    trace = [ev.cost]
    iterations = 0
    converged = False
    while iterations < opts.max_iterations_per_level:
        if ev.cost == 0.0:
            converged = True
            break
        J, r = ev.jacobian, ev.residuals
        H = J.T @ J
        g = J.T @ r
        if not np.any(g):
            converged = True
            break
        diag = np.diag(H).copy()
        diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
        while True:
            try:
                delta = np.linalg.solve(H + lam * np.diag(diag), -g)
                if np.all(np.isfinite(delta)):
                    break
            except np.linalg.LinAlgError:
                pass
            lam *= opts.lm_lambda_up
            if lam > LAMBDA_CEILING:
                raise SingularSystemError(
                    "normal equations singular after damping escalation"
                )
        iterations += 1
        trial = p + delta
        try:
            ev_trial = _evaluate(f, m, trial, k, bidir, floor)
        except (InsufficientOverlapError, DegenerateTransformError):
            ev_trial = None
        if ev_trial is not None and ev_trial.cost < ev.cost:
            p, ev = trial, ev_trial
            lam /= opts.lm_lambda_down
            trace.append(ev.cost)
        else:
            lam *= opts.lm_lambda_up
        if np.linalg.norm(delta) < opts.param_tolerance:
            converged = True
            break
        if lam > LAMBDA_CEILING:
            break
    return p, ev, iterations, converged, trace


def lm_solve(fixed, moving, T_init, opts=None):
    """Single-level Levenberg-Marquardt refinement of ``T_init``."""
    opts = opts or RegistrationOptions()
    f, m = _Level(*fixed), _Level(*moving)
    if f.shape != m.shape:
        raise ValueError("fixed and moving images differ in size")
    p, ev, iters, converged, trace = _lm_level(f, m, T_init.params, opts)
    return RegistrationResult(
        transform=AffineTransform.from_params(p),
        final_cost=ev.cost,
        iterations_per_level=[iters],
        converged=converged,
        valid_pixel_fraction=ev.valid_fraction,
        cost_trace=[trace],
    )


def _scale_translation(p, factor):
    q = np.array(p, dtype=np.float64)
    q[4:] *= factor
    return q


def _register_pyramids(fixed_pyr, moving_pyr, T_init, opts):
    n = min(len(fixed_pyr), len(moving_pyr))
    s = fixed_pyr.scale_factor
    p = _scale_translation(T_init.params, s ** (n - 1))
    iterations, traces = [], []
    converged = False
    ev = None
    for level in range(n - 1, -1, -1):
        f = _Level(*fixed_pyr.levels[level])
        m = _Level(*moving_pyr.levels[level])
        p, ev, iters, converged, trace = _lm_level(f, m, p, opts)
        iterations.append(iters)
        traces.append(trace)
        if level > 0:
            p = _scale_translation(p, 1.0 / s)
    return RegistrationResult(
        transform=AffineTransform.from_params(p),
        final_cost=ev.cost,
        iterations_per_level=iterations,
        converged=converged,
        valid_pixel_fraction=ev.valid_fraction,
        cost_trace=traces,
    )


def register_pair(fixed, moving, T_init=None, opts=None):
    """Coarse-to-fine affine registration of ``moving`` onto ``fixed``.

    Returns the transform mapping moving coordinates into fixed coordinates.
    ``converged`` reports whether the finest level met the step tolerance.
    """
    opts = opts or RegistrationOptions()
    T_init = T_init or AffineTransform.identity()
    if fixed[0].shape != moving[0].shape:
        raise ValueError("fixed and moving frames differ in size")
    fp = _pyramid_for(fixed[0], fixed[1], opts)
    mp = _pyramid_for(moving[0], moving[1], opts)
    return _register_pyramids(fp, mp, T_init, opts)


def register_sequence(images, visibility, opts=None, initial=None, progress=None):
    """Register each frame ``k+1`` onto frame ``k``.

    ``visibility`` is one mask shared by all frames or a list of per-frame
    masks. Each pair starts from the previous pair's estimate. A pair that
    fails keeps its initial guess and is reported with ``converged=False``
    and the error message; registration carries on with the next pair.
    """
    opts = opts or RegistrationOptions()
    masks = visibility if isinstance(visibility, (list, tuple)) else [visibility] * len(images)
    if len(masks) != len(images):
        raise ValueError("need one visibility mask per frame")
    results = []
    guess = initial or AffineTransform.identity()
    prev = None
    for k in range(len(images)):
        pyr = _pyramid_for(images[k], masks[k], opts)
        if prev is not None:
            try:
                res = _register_pyramids(prev, pyr, guess, opts)
            except (InsufficientOverlapError, SingularSystemError, DegenerateTransformError) as exc:
                log.warning("pair %d->%d failed: %s", k, k - 1, exc)
                res = RegistrationResult(guess, math.inf, [], False, 0.0, [], str(exc))
            results.append(res)
            guess = res.transform
            if progress is not None:
                progress(k, res)
        prev = pyr
    return results
