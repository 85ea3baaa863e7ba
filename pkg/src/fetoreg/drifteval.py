"""Ground-truth-free drift measurement over non-overlapping frame windows.

Within each window the first frame is the anchor; every later frame of the
window is reprojected into the anchor through the chained pairwise
transforms and compared with it (SSIM on intensities, IoU on thresholded
probability maps). Consecutive-frame registrations look fine on their own;
agreement at the far end of the window is what exposes accumulated drift.
"""
from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .imagecore import BinaryMask, ScalarImage
from .metrics import InsufficientOverlapError, SsimParams, iou_score, ssim
from .warp import AffineTransform, compose, invert, warp_image

__all__ = [
    "DriftRecord",
    "DriftReport",
    "evaluate_drift",
    "summarize",
    "compare_summaries",
    "write_report_csv",
    "read_report_csv",
    "write_summary_csv",
    "read_summary_csv",
    "write_comparison_csv",
    "median_at",
]

# below this joint-valid fraction a (window, offset) pair is not scored
MIN_JOINT_FRACTION = 0.05
METRICS = ("ssim", "ssim_prob", "iou")


@dataclass(frozen=True)
class DriftRecord:
    window_start: int
    offset: int
    ssim: float | None
    ssim_prob: float | None
    iou: float | None
    valid_fraction: float


@dataclass(frozen=True)
class DriftReport:
    per_window: tuple
    window_size: int

    def __len__(self):
        return len(self.per_window)

    def offsets(self):
        return sorted({r.offset for r in self.per_window})

    def window_starts(self):
        return sorted({r.window_start for r in self.per_window})


def _score(frames, prob_maps, visibility, pairwise, start, d, threshold, ssim_params):
    to_anchor = AffineTransform.identity()
    for k in range(start, start + d):
        to_anchor = compose(to_anchor, pairwise[k])
    back = invert(to_anchor)
    anchor = frames[start]
    h, w = anchor.shape
    wf = warp_image(frames[start + d], visibility, back, w, h)
    wp = warp_image(prob_maps[start + d], visibility, back, w, h)
    joint = wf.validity.data & visibility.data
    frac = float(np.count_nonzero(joint)) / joint.size
    if frac < MIN_JOINT_FRACTION:
        return DriftRecord(start, d, None, None, None, frac)
    try:
        s_img = ssim(anchor, wf.image, joint, ssim_params)
        s_prob = ssim(prob_maps[start], wp.image, joint, ssim_params)
    except InsufficientOverlapError:
        s_img = s_prob = None
    fg_anchor = (prob_maps[start].data >= threshold) & joint
    fg_moved = (wp.image.data >= threshold) & joint
    return DriftRecord(start, d, s_img, s_prob, iou_score(fg_anchor, fg_moved), frac)


def evaluate_drift(frames, prob_maps, visibility, pairwise, window_size=5, threshold=0.5,
                   ssim_params=None, threads=1):
    """Score every (window, offset) pair of non-overlapping windows.

    ``pairwise[k]`` maps frame ``k+1`` into frame ``k``. Windows start at
    0, W, 2W, ...; a trailing incomplete window is skipped. Pairs whose
    overlap is too small carry ``None`` metrics and their valid fraction.
    """
    n = len(frames)
    if len(prob_maps) != n:
        raise ValueError(f"{n} frames but {len(prob_maps)} probability maps")
    if len(pairwise) != n - 1:
        raise ValueError(f"{n} frames need {n - 1} pairwise transforms, got {len(pairwise)}")
    if window_size < 2:
        raise ValueError("window_size must be >= 2")
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    if isinstance(visibility, ScalarImage):
        visibility = BinaryMask(visibility.data >= 0.5)
    ssim_params = ssim_params or SsimParams()

    jobs = [
        (s, d)
        for s in range(0, n - window_size + 1, window_size)
        for d in range(1, window_size)
    ]

    def run(job):
        return _score(frames, prob_maps, visibility, pairwise, *job, threshold, ssim_params)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(run, jobs))
    else:
        records = [run(j) for j in jobs]
    return DriftReport(tuple(records), window_size)


def _five_numbers(values):
    v = np.sort(np.asarray(values, dtype=np.float64))
    q1, med, q3 = np.percentile(v, [25, 50, 75])
    return {"min": float(v[0]), "q1": float(q1), "median": float(med),
            "q3": float(q3), "max": float(v[-1]), "n": int(v.size)}


def summarize(report):
    """Per-offset five-number summaries (min, q1, median, q3, max) per metric.

    Quartiles use linear interpolation between order statistics. Missing
    values are dropped; a metric with no values at an offset maps to None.
    """
    if len(report) == 0:
        raise ValueError("empty drift report")
    out = {}
    for d in report.offsets():
        rows = [r for r in report.per_window if r.offset == d]
        out[d] = {}
        for metric in METRICS:
            vals = [getattr(r, metric) for r in rows if getattr(r, metric) is not None]
            out[d][metric] = _five_numbers(vals) if vals else None
    return out


def compare_summaries(vessel, intensity):
    """Merge two reports' summaries with ``vessel - intensity`` deltas.

    Both reports must cover the same windows, i.e. come from one sequence.
    """
    if vessel.window_size != intensity.window_size:
        raise ValueError("reports use different window sizes")
    if vessel.window_starts() != intensity.window_starts():
        raise ValueError(
            f"window counts differ: {len(vessel.window_starts())} vs "
            f"{len(intensity.window_starts())}"
        )
    sv, si = summarize(vessel), summarize(intensity)
    rows = []
    for d in sorted(sv):
        for metric in METRICS:
            a = sv[d][metric]
            b = si.get(d, {}).get(metric)
            row = {"offset": d, "metric": metric}
            for stat in ("median", "q1", "q3", "min", "max"):
                va = a[stat] if a else None
                vb = b[stat] if b else None
                row[f"vessel_{stat}"] = va
                row[f"intensity_{stat}"] = vb
                row[f"delta_{stat}"] = None if va is None or vb is None else va - vb
            rows.append(row)
    return rows


def _fmt(v):
    return "" if v is None else repr(v)


def write_report_csv(report, path):
    names = ["window_start", "offset", "ssim", "ssim_prob", "iou", "valid_fraction"]
    with open(os.fspath(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["window_size"])
        for r in report.per_window:
            d = asdict(r)
            writer.writerow([_fmt(d[n]) for n in names] + [report.window_size])


def _opt_float(text):
    text = text.strip()
    return None if text == "" or text.lower() == "nan" else float(text)


def read_report_csv(path):
    records, window = [], None
    with open(os.fspath(path), newline="") as fh:
        for row in csv.DictReader(fh):
            window = int(row["window_size"])
            records.append(DriftRecord(
                int(row["window_start"]), int(row["offset"]), _opt_float(row["ssim"]),
                _opt_float(row["ssim_prob"]), _opt_float(row["iou"]),
                float(row["valid_fraction"]),
            ))
    if window is None:
        raise ValueError(f"{path}: empty drift report")
    return DriftReport(tuple(records), window)


_STATS = ("n", "min", "q1", "median", "q3", "max")


def write_summary_csv(summary, path):
    """One row per (offset, metric): ready for box plots."""
    with open(os.fspath(path), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("offset", "metric") + _STATS)
        for d in sorted(summary):
            for metric in METRICS:
                s = summary[d][metric]
                writer.writerow([d, metric] + [_fmt(s[k]) if s else "" for k in _STATS])


def read_summary_csv(path):
    out = {}
    with open(os.fspath(path), newline="") as fh:
        for row in csv.DictReader(fh):
            d = int(row["offset"])
            stats = None
            if row["n"].strip():
                stats = {k: _opt_float(row[k]) for k in _STATS}
                stats["n"] = int(stats["n"])
            out.setdefault(d, {})[row["metric"]] = stats
    return out


def write_comparison_csv(rows, path):
    if not rows:
        raise ValueError("nothing to write")
    with open(os.fspath(path), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (_fmt(v) if not isinstance(v, (int, str)) else v)
                             for k, v in row.items()})


def median_at(report, offset, metric="iou"):
    vals = [getattr(r, metric) for r in report.per_window
            if r.offset == offset and getattr(r, metric) is not None]
    return float(np.median(vals)) if vals else math.nan
