"""Synthetic vessel-map sequences with exact ground-truth motion.

A large latent scene (textured background plus branching vessels) is
viewed through a moving circular field of view. Every frame's pose maps
frame coordinates into scene coordinates, so the frame-to-frame affines
are known exactly.

Randomness comes from numpy's Philox counter-based generator keyed by the
seed. Independent streams are obtained with ``Philox.jumped(i)``:

    0  vessel layout          2  trajectory phases
    1  background texture     3  occluder schedule
    4 + k  noise of frame k

so any frame can be regenerated on its own, and the first ``n`` vessels of
a scene do not depend on how many vessels follow them.
"""
from __future__ import annotations

import functools
import json
import math
import os
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .imagecore import BinaryMask, ScalarImage, save_image, save_mask
from .warp import AffineTransform, compose, default_visibility, invert, write_transforms_csv

__all__ = [
    "Trajectory",
    "SynthConfig",
    "SynthSequence",
    "generate_scene",
    "generate_sequence",
    "trajectory_poses",
    "write_sequence",
]

VESSEL_PEAK = 0.95
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
MIN_FWHM = 3.5
CURVE_STEP = 0.25  # px between curve samples


@dataclass
class Trajectory:
    """Camera motion.

    ``translation`` is the peak speed in px/frame, ``rotation`` the peak
    angular speed in deg/frame and ``scale`` the peak log-zoom change per
    frame. In ``"smooth"`` mode these oscillate with ``period`` frames and
    the camera wanders inside the scene; ``"linear"`` repeats one constant
    step, with translation along +x of the frame, so every ground-truth
    pair is the same affine.
    """

    mode: str = "smooth"
    translation: float = 3.0
    rotation: float = 0.15
    scale: float = 0.001
    period: float = 240.0


@dataclass
class SynthConfig:
    seed: int = 0
    canvas: int = 1024
    frame: int = 448
    n_frames: int = 20
    n_vessels: int = 14
    vessel_width_range: tuple = (5.0, 12.0)
    trajectory: Trajectory = field(default_factory=Trajectory)
    noise_sigma: float = 0.0
    occluder_rate: float = 0.0
    mask_margin: float = 0.02

    def __post_init__(self):
        if isinstance(self.trajectory, dict):
            self.trajectory = Trajectory(**self.trajectory)
        self.vessel_width_range = tuple(float(w) for w in self.vessel_width_range)
        if self.frame > self.canvas:
            raise ValueError("frame must not exceed canvas")
        if self.n_frames < 1 or self.n_vessels < 0:
            raise ValueError("n_frames must be >= 1 and n_vessels >= 0")
        lo, hi = self.vessel_width_range
        if not 0 < lo <= hi:
            raise ValueError("vessel_width_range must satisfy 0 < lo <= hi")
        if self.noise_sigma < 0 or not 0 <= self.occluder_rate <= 1:
            raise ValueError("noise_sigma must be >= 0 and occluder_rate in [0, 1]")
        if self.trajectory.mode not in ("smooth", "linear"):
            raise ValueError(f"unknown trajectory mode {self.trajectory.mode!r}")

    def to_dict(self):
        d = asdict(self)
        d["vessel_width_range"] = list(self.vessel_width_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _stream(seed, index):
    return np.random.Generator(np.random.Philox(key=int(seed)).jumped(index))


def _bezier_points(p0, p1, p2):
    length = np.hypot(*(p1 - p0)) + np.hypot(*(p2 - p1))
    t = np.linspace(0.0, 1.0, max(2, int(math.ceil(length / CURVE_STEP)) + 1))[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2


def _curve(rng, start, heading, n_segments, seg_len, turn_sd):
    """Chain of G1-continuous quadratic Bezier segments."""
    pts = []
    p0 = np.asarray(start, dtype=np.float64)
    for _ in range(n_segments):
        length = rng.uniform(*seg_len)
        new_heading = heading + rng.normal(0.0, turn_sd)
        p1 = p0 + 0.5 * length * np.array([math.cos(heading), math.sin(heading)])
        p2 = p1 + 0.5 * length * np.array([math.cos(new_heading), math.sin(new_heading)])
        seg = _bezier_points(p0, p1, p2)
        pts.append(seg if not pts else seg[1:])
        p0, heading = p2, new_heading
    return np.concatenate(pts)


def _arc_fraction(pts):
    steps = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(steps)])
    return s / max(s[-1], 1e-12)


def _vessel_curves(seed, canvas, n_vessels, width_range):
    """List of (points, fwhm-per-point) for trunks and their branches."""
    rng = _stream(seed, 0)
    curves = []
    for _ in range(n_vessels):
        start = rng.uniform(0.1 * canvas, 0.9 * canvas, size=2)
        heading = rng.uniform(0.0, 2.0 * math.pi)
        width = rng.uniform(*width_range)
        trunk = _curve(rng, start, heading, 4, (90.0, 170.0), 0.3)
        frac = _arc_fraction(trunk)
        trunk_w = np.maximum(width * (1.0 - 0.25 * frac), MIN_FWHM)
        curves.append((trunk, trunk_w))
        for _ in range(2):
            at = rng.uniform(0.25, 0.8)
            side = 1.0 if rng.random() < 0.5 else -1.0
            turn = side * rng.uniform(0.5, 1.1)
            i = int(np.searchsorted(frac, at))
            i = min(max(i, 1), len(trunk) - 1)
            d = trunk[i] - trunk[i - 1]
            branch = _curve(rng, trunk[i], math.atan2(d[1], d[0]) + turn, 2, (60.0, 120.0), 0.3)
            bw = 0.65 * trunk_w[i]
            branch_w = np.maximum(bw * (1.0 - 0.25 * _arc_fraction(branch)), MIN_FWHM)
            curves.append((branch, branch_w))
    return curves


def _rasterize_curve(layer, pts, fwhm):
    sigma = fwhm / FWHM_PER_SIGMA
    reach = 4.0 * float(sigma.max())
    h, w = layer.shape
    x0 = max(int(math.floor(pts[:, 0].min() - reach)), 0)
    x1 = min(int(math.ceil(pts[:, 0].max() + reach)), w - 1)
    y0 = max(int(math.floor(pts[:, 1].min() - reach)), 0)
    y1 = min(int(math.ceil(pts[:, 1].max() + reach)), h - 1)
    if x1 < x0 or y1 < y0:
        return
    ys, xs = np.mgrid[y0:y1 + 1, x0:x1 + 1]
    query = np.column_stack((xs.ravel(), ys.ravel())).astype(np.float64)
    dist, idx = cKDTree(pts).query(query, distance_upper_bound=reach)
    hit = np.isfinite(dist)
    val = np.zeros(query.shape[0])
    s = sigma[idx[hit]]
    val[hit] = np.exp(-0.5 * (dist[hit] / s) ** 2)
    sub = layer[y0:y1 + 1, x0:x1 + 1]
    np.maximum(sub, val.reshape(sub.shape), out=sub)


def _background(seed, canvas):
    rng = _stream(seed, 1)
    fine = ndimage.gaussian_filter(rng.standard_normal((canvas, canvas)), 5.0, mode="wrap")
    coarse = ndimage.gaussian_filter(rng.standard_normal((canvas, canvas)), 25.0, mode="wrap")
    fine /= fine.std()
    coarse /= coarse.std()
    return np.clip(0.32 + 0.035 * fine + 0.03 * coarse, 0.05, 0.45)


@functools.lru_cache(maxsize=4)
def _scene_layers(seed, canvas, n_vessels, width_range):
    bg = _background(seed, canvas)
    vessels = np.zeros((canvas, canvas))
    for pts, fwhm in _vessel_curves(seed, canvas, n_vessels, width_range):
        _rasterize_curve(vessels, pts, fwhm)
    composite = bg + (VESSEL_PEAK - bg) * vessels
    for arr in (composite, vessels):
        arr.setflags(write=False)
    return composite, vessels


def _layers(cfg):
    return _scene_layers(cfg.seed, cfg.canvas, cfg.n_vessels, tuple(cfg.vessel_width_range))


def generate_scene(cfg):
    """Latent scene: bright vessels over a background that stays below 0.45."""
    composite, _ = _layers(cfg)
    return ScalarImage(composite)


def _pose(centre, scale, degrees, xc):
    """Frame -> scene map: frame centre ``xc`` lands on ``centre``."""
    return compose(
        AffineTransform.translation(*centre),
        compose(
            AffineTransform.rotation(degrees) if degrees else AffineTransform.identity(),
            compose(AffineTransform.scaling(scale), AffineTransform.translation(-xc, -xc)),
        ),
    )


def _fov_radius(cfg):
    return 0.5 * cfg.frame * (1.0 - cfg.mask_margin)


def trajectory_poses(cfg):
    """Frame-to-scene affine of every frame."""
    tr = cfg.trajectory
    n = cfg.n_frames
    xc = (cfg.frame - 1) / 2.0
    centre = (cfg.canvas - 1) / 2.0
    if tr.mode == "linear":
        step = compose(
            AffineTransform.translation(tr.translation, 0.0),
            _pose((xc, xc), math.exp(tr.scale), tr.rotation, xc),
        )
        # start so that a pure translation path is centred in the scene
        start = centre - 0.5 * (n - 1) * tr.translation
        poses = [_pose((start, centre), 1.0, 0.0, xc)]
        for _ in range(1, n):
            poses.append(compose(poses[-1], step))
        _check_trajectory(cfg, poses)
        return poses

    rng = _stream(cfg.seed, 2)
    phx, phy, phr, phs = rng.uniform(0.0, 2.0 * math.pi, size=4)
    w_rot = 2.0 * math.pi / tr.period
    w_scale = w_rot / 1.3
    log_s_amp = tr.scale / w_scale if tr.scale else 0.0
    rot_amp = tr.rotation / w_rot if tr.rotation else 0.0
    s_max = math.exp(log_s_amp)
    room = 0.5 * cfg.canvas - _fov_radius(cfg) * s_max - 4.0
    radius = 0.85 * room
    if tr.translation and radius <= 0:
        raise ValueError("trajectory violates containment: field of view does not fit the scene")
    w_t = tr.translation / radius if tr.translation else 0.0
    poses = []
    for k in range(n):
        cx = centre + (radius * math.sin(w_t * k + phx) if w_t else 0.0)
        cy = centre + (radius * math.sin(0.77 * w_t * k + phy) if w_t else 0.0)
        deg = rot_amp * math.sin(w_rot * k + phr)
        sc = math.exp(log_s_amp * math.sin(w_scale * k + phs))
        poses.append(_pose((cx, cy), sc, deg, xc))
    _check_trajectory(cfg, poses)
    return poses


def _disk_overlap(d, r1, r2):
    """Intersection area of two disks with centre distance ``d``."""
    if d >= r1 + r2:
        return 0.0
    if d <= abs(r1 - r2):
        return math.pi * min(r1, r2) ** 2
    a1 = r1 * r1 * math.acos((d * d + r1 * r1 - r2 * r2) / (2 * d * r1))
    a2 = r2 * r2 * math.acos((d * d + r2 * r2 - r1 * r1) / (2 * d * r2))
    tri = 0.5 * math.sqrt((-d + r1 + r2) * (d + r1 - r2) * (d - r1 + r2) * (d + r1 + r2))
    return a1 + a2 - tri


def _check_trajectory(cfg, poses):
    xc = (cfg.frame - 1) / 2.0
    r = _fov_radius(cfg)
    disks = []
    for k, p in enumerate(poses):
        cx, cy = p.apply(xc, xc)
        rad = r * math.sqrt(abs(p.det))
        lo, hi = 2.0, cfg.canvas - 3.0
        if cx - rad < lo or cy - rad < lo or cx + rad > hi or cy + rad > hi:
            raise ValueError(
                f"trajectory violates containment: frame {k} leaves the scene"
            )
        disks.append((float(cx), float(cy), rad))
    for k in range(len(disks) - 1):
        (x1, y1, r1), (x2, y2, r2) = disks[k], disks[k + 1]
        frac = _disk_overlap(math.hypot(x2 - x1, y2 - y1), r1, r2) / (math.pi * min(r1, r2) ** 2)
        if frac < 0.5:
            raise ValueError(
                f"trajectory violates the 50% overlap invariant between frames {k} and {k + 1}"
            )


def gt_pairwise_from_poses(poses):
    """``pairwise[k]`` maps frame ``k+1`` coordinates into frame ``k``."""
    return [compose(invert(poses[k]), poses[k + 1]) for k in range(len(poses) - 1)]


@dataclass(frozen=True)
class _Occluder:
    start: int
    life: int
    x: float
    y: float
    vx: float
    vy: float
    radius: float
    value: float
    opacity: float


def _occluders(cfg):
    if cfg.occluder_rate <= 0:
        return []
    rng = _stream(cfg.seed, 3)
    r = _fov_radius(cfg)
    xc = (cfg.frame - 1) / 2.0
    out = []
    for k in range(cfg.n_frames):
        draws = rng.random(9)
        if draws[0] >= cfg.occluder_rate:
            continue
        ang, rad = 2 * math.pi * draws[1], 0.7 * r * math.sqrt(draws[2])
        out.append(_Occluder(
            start=k,
            life=4 + int(draws[3] * 9),
            x=xc + rad * math.cos(ang),
            y=xc + rad * math.sin(ang),
            vx=2.0 * draws[4] - 1.0,
            vy=2.0 * draws[5] - 1.0,
            radius=30.0 + 40.0 * draws[6],
            value=0.92 if draws[7] < 0.5 else 0.08,
            opacity=0.75 + 0.2 * draws[8],
        ))
    return out


def _paint_occluders(img, occluders, k, xs, ys, edge=4.0):
    for o in occluders:
        age = k - o.start
        if not 0 <= age < o.life:
            continue
        d = np.hypot(xs - (o.x + o.vx * age), ys - (o.y + o.vy * age))
        alpha = o.opacity * np.clip((o.radius - d) / edge + 0.5, 0.0, 1.0)
        img *= 1.0 - alpha
        img += alpha * o.value


class SynthSequence(NamedTuple):
    frames: list
    prob_maps: list
    gt_pairwise: list
    visibility: BinaryMask


def generate_sequence(cfg):
    """Render frames, vessel probability maps and exact pairwise affines.

    ``gt_pairwise[k]`` maps frame ``k+1`` coordinates into frame ``k``
    coordinates (the same direction as registration results). Occluders
    are painted on the intensity frames only.
    """
    composite, vessels = _layers(cfg)
    poses = trajectory_poses(cfg)
    coeff_img = ndimage.spline_filter(composite, order=3, mode="nearest")
    coeff_ves = ndimage.spline_filter(vessels, order=3, mode="nearest")
    vis = default_visibility(cfg.frame, cfg.frame, cfg.mask_margin)
    ys, xs = np.mgrid[0:cfg.frame, 0:cfg.frame].astype(np.float64)
    occluders = _occluders(cfg)
    frames, probs = [], []
    for k, pose in enumerate(poses):
        u, v = pose.apply(xs, ys)
        img = ndimage.map_coordinates(coeff_img, [v, u], order=3, mode="nearest", prefilter=False)
        prob = ndimage.map_coordinates(coeff_ves, [v, u], order=3, mode="nearest", prefilter=False)
        img = np.clip(img, 0.0, 1.0)
        _paint_occluders(img, occluders, k, xs, ys)
        if cfg.noise_sigma > 0:
            img = img + cfg.noise_sigma * _stream(cfg.seed, 4 + k).standard_normal(img.shape)
        img[~vis.data] = 0.0
        prob[~vis.data] = 0.0
        frames.append(ScalarImage.clipped(img))
        probs.append(ScalarImage.clipped(prob))
    return SynthSequence(frames, probs, gt_pairwise_from_poses(poses), vis)


def write_sequence(seq, cfg, outdir):
    """Write frames/, probmaps/, mask.pgm, gt_transforms.csv and config.json."""
    outdir = os.fspath(outdir)
    for sub in ("frames", "probmaps"):
        os.makedirs(os.path.join(outdir, sub), exist_ok=True)
    width = max(4, len(str(len(seq.frames) - 1)))
    for k, (img, prob) in enumerate(zip(seq.frames, seq.prob_maps)):
        name = f"{k:0{width}d}.pgm"
        save_image(img, os.path.join(outdir, "frames", name), depth=16)
        save_image(prob, os.path.join(outdir, "probmaps", name), depth=16)
    save_mask(seq.visibility, os.path.join(outdir, "mask.pgm"))
    write_transforms_csv(seq.gt_pairwise, os.path.join(outdir, "gt_transforms.csv"))
    with open(os.path.join(outdir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)
