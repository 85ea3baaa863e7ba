"""Command-line entry point: ``fetoreg <subcommand> ...``.

Every subcommand prints a JSON summary on stdout. Exit status: 0 on
success, 1 when the command ran but its success condition failed (or a
runtime error occurred), 2 for usage errors and missing inputs.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import dataclass, field, fields

import numpy as np

from . import __version__
from .drifteval import (
    compare_summaries,
    evaluate_drift,
    read_report_csv,
    summarize,
    write_comparison_csv,
    write_report_csv,
    write_summary_csv,
)
from .imagecore import binarize, load_image, load_mask
from .metrics import LossInputs, bce_loss, combined_loss, dice_score, iou_loss, iou_score
from .mosaic import blend, chain_transforms, reference_index_for, render
from .register import RegistrationOptions, load_config_file, register_sequence
from .synth import SynthConfig, Trajectory, generate_sequence, write_sequence
from .warp import default_visibility, read_transforms_csv, write_transforms_csv

log = logging.getLogger("fetoreg")

IMAGE_SUFFIXES = (".pgm", ".png")


class UsageError(Exception):
    """Bad invocation or missing input; maps to exit status 2."""


@dataclass
class PipelineConfig:
    input_mode: str = "probability-maps"
    reference: str = "center"
    window_size: int = 5
    threshold: float = 0.5
    mask_margin: float = 0.02
    max_failure_fraction: float = 0.2
    registration: RegistrationOptions = field(default_factory=RegistrationOptions)

    def __post_init__(self):
        if self.input_mode not in ("probability-maps", "intensity-frames"):
            raise ValueError(f"unknown input mode {self.input_mode!r}")
        if self.reference not in ("first", "center"):
            raise ValueError(f"reference must be 'first' or 'center', got {self.reference!r}")
        if self.window_size < 2:
            raise ValueError("window_size must be >= 2")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


def _frame_key(name):
    stem = os.path.splitext(name)[0]
    digits = re.findall(r"\d+", stem)
    return (int(digits[-1]) if digits else float("inf"), name)


def list_frames(directory):
    """Image files of ``directory`` ordered by the last number in their name.

    Ties (and names without digits, which sort last) fall back to the full
    file name.
    """
    if not os.path.isdir(directory):
        raise UsageError(f"input directory not found: {directory}")
    names = [n for n in os.listdir(directory) if n.lower().endswith(IMAGE_SUFFIXES)]
    return [os.path.join(directory, n) for n in sorted(names, key=_frame_key)]


def _require_file(path, what):
    if not os.path.isfile(path):
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_frames(directory):
    paths = list_frames(directory)
    if not paths:
        raise UsageError(f"no .pgm/.png frames in {directory}")
    return paths, [load_image(p) for p in paths]


def _visibility(args, shape):
    if getattr(args, "mask", None):
        mask = load_mask(_require_file(args.mask, "mask"))
        if mask.shape != shape:
            raise ValueError(f"mask {mask.shape} does not match frames {shape}")
        return mask
    h, w = shape
    return default_visibility(w, h, args.pipeline.mask_margin)


def _emit(payload):
    json.dump(payload, sys.stdout, indent=2, default=str, ensure_ascii=False)
    sys.stdout.write("\n")


# -- subcommands --------------------------------------------------------------


def cmd_synth(args):
    base = args.file_config.get("synth", {})
    traj = dict(base.get("trajectory", {}))
    for name in ("mode", "translation", "rotation", "scale", "period"):
        value = getattr(args, f"traj_{name}")
        if value is not None:
            traj[name] = value
    kw = {k: v for k, v in base.items() if k != "trajectory"}
    for name in ("canvas", "frame", "n_frames", "n_vessels", "noise_sigma", "occluder_rate"):
        value = getattr(args, name)
        if value is not None:
            kw[name] = value
    if args.seed is not None:
        kw["seed"] = args.seed
    cfg = SynthConfig(trajectory=Trajectory(**traj), **kw)
    seq = generate_sequence(cfg)
    write_sequence(seq, cfg, args.output)
    _emit({"output": args.output, "n_frames": len(seq.frames), "config": cfg.to_dict()})
    return 0


def _run_registration(paths, frames, mask, pipeline):
    results = register_sequence(frames, mask, pipeline.registration)
    pairs = []
    for k, res in enumerate(results):
        entry = {"index": k, "fixed": os.path.basename(paths[k]),
                 "moving": os.path.basename(paths[k + 1])}
        entry.update(res.to_dict())
        pairs.append(entry)
    failed = sum(not r.converged for r in results)
    fraction = failed / len(results) if results else 0.0
    diagnostics = {
        "input_mode": pipeline.input_mode,
        "n_frames": len(frames),
        "n_pairs": len(results),
        "n_failed": failed,
        "failure_fraction": fraction,
        "max_failure_fraction": pipeline.max_failure_fraction,
        "options": pipeline.registration.to_dict(),
        "pairs": pairs,
    }
    return results, diagnostics


def cmd_register(args):
    paths, frames = _load_frames(args.frames)
    if len(frames) < 2:
        raise UsageError(f"need at least 2 frames in {args.frames}, found {len(frames)}")
    mask = _visibility(args, frames[0].shape)
    results, diag = _run_registration(paths, frames, mask, args.pipeline)
    write_transforms_csv([r.transform for r in results], args.output)
    diag["transforms"] = args.output
    if args.diagnostics:
        with open(args.diagnostics, "w") as fh:
            json.dump(diag, fh, indent=2)
    ok = diag["failure_fraction"] <= args.pipeline.max_failure_fraction
    _emit({k: v for k, v in diag.items() if k != "pairs"} | {"success": ok})
    return 0 if ok else 1


def cmd_mosaic(args):
    if args.transforms and args.register:
        raise UsageError("--transforms and --register are mutually exclusive")
    if not args.transforms and not args.register:
        raise UsageError("one of --transforms or --register is required")
    paths, frames = _load_frames(args.frames)
    mask = _visibility(args, frames[0].shape)
    summary = {}
    if args.register:
        results, diag = _run_registration(paths, frames, mask, args.pipeline)
        pairwise = [r.transform for r in results]
        summary["n_failed"] = diag["n_failed"]
    else:
        pairwise = read_transforms_csv(_require_file(args.transforms, "transforms CSV"))
    if len(pairwise) != len(frames) - 1:
        raise ValueError(f"{len(frames)} frames need {len(frames) - 1} transforms, "
                         f"got {len(pairwise)}")
    ref = reference_index_for(len(frames), args.pipeline.reference)
    chain = chain_transforms(pairwise, ref)
    m = blend([(f, mask) for f in frames], chain)
    written = render(m, args.output, annotate=args.annotate)
    summary.update({
        "outputs": written,
        "reference_index": ref,
        "canvas": [m.width, m.height],
        "offset": list(m.offset),
        "covered_fraction": float(np.count_nonzero(m.count) / m.count.size),
    })
    _emit(summary)
    return 0


def cmd_drift(args):
    _, frames = _load_frames(args.frames)
    _, probs = _load_frames(args.probmaps)
    pairwise = read_transforms_csv(_require_file(args.transforms, "transforms CSV"))
    mask = _visibility(args, frames[0].shape)
    report = evaluate_drift(frames, probs, mask, pairwise, args.pipeline.window_size,
                            args.pipeline.threshold, threads=args.threads)
    write_report_csv(report, args.output)
    out = {"report": args.output, "n_records": len(report)}
    if len(report):
        summary = summarize(report)
        if args.summary:
            write_summary_csv(summary, args.summary)
            out["summary"] = args.summary
        out["median_by_offset"] = {
            str(d): {m: (s["median"] if s else None) for m, s in stats.items()}
            for d, stats in summary.items()
        }
    _emit(out)
    return 0


def cmd_compare(args):
    vessel = read_report_csv(_require_file(args.vessel, "vessel-based drift report"))
    intensity = read_report_csv(_require_file(args.intensity, "intensity-based drift report"))
    rows = compare_summaries(vessel, intensity)
    write_comparison_csv(rows, args.output)
    _emit({"output": args.output, "rows": rows})
    return 0


def cmd_segmetrics(args):
    preds = {os.path.basename(p): p for p in list_frames(args.predictions)}
    gts = {os.path.basename(p): p for p in list_frames(args.ground_truth)}
    names = sorted(set(preds) & set(gts), key=_frame_key)
    if not names:
        raise UsageError("no matching file names between prediction and ground-truth dirs")
    missing = sorted(set(gts) - set(preds))
    rows = []
    for name in names:
        pred = binarize(load_image(preds[name]), args.pipeline.threshold)
        gt = binarize(load_image(gts[name]), 0.5)
        rows.append((name, dice_score(pred, gt), iou_score(pred, gt)))
    dice = np.array([r[1] for r in rows])
    iou = np.array([r[2] for r in rows])
    with open(args.output, "w") as fh:
        fh.write("image,dice,iou\n")
        for name, d, j in rows:
            fh.write(f"{name},{d!r},{j!r}\n")
        fh.write(f"mean,{dice.mean()!r},{iou.mean()!r}\n")
        fh.write(f"std,{dice.std()!r},{iou.std()!r}\n")
    _emit({
        "output": args.output,
        "n_images": len(rows),
        "missing_predictions": missing,
        "dice": f"{dice.mean():.2f}±{dice.std():.2f}",
        "iou": f"{iou.mean():.2f}±{iou.std():.2f}",
        "dice_mean": float(dice.mean()), "dice_std": float(dice.std()),
        "iou_mean": float(iou.mean()), "iou_std": float(iou.std()),
    })
    return 0


def cmd_loss(args):
    gt = load_image(_require_file(args.ground_truth, "ground-truth image"))
    pred = load_image(_require_file(args.prediction, "prediction image"))
    if gt.shape != pred.shape:
        raise ValueError(f"image sizes differ: {gt.shape} vs {pred.shape}")
    inp = LossInputs(binarize(gt, 0.5).data.astype(np.float64), pred.data, args.delta)
    _emit({"bce": bce_loss(inp), "iou": iou_loss(inp), "combined": combined_loss(inp),
           "n_pixels": inp.n, "delta": inp.delta})
    return 0


# -- argument parsing -----------------------------------------------------------


def _add_registration_flags(p):
    g = p.add_argument_group("registration options (override --config)")
    for f in fields(RegistrationOptions):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            g.add_argument(flag, dest=f"reg_{f.name}", action=argparse.BooleanOptionalAction,
                           default=None)
        else:
            g.add_argument(flag, dest=f"reg_{f.name}", type=type(f.default), default=None,
                           metavar=f.name.upper())


def _add_mask_flag(p):
    p.add_argument("--mask", help="visibility mask image (default: inscribed circle)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="fetoreg",
        description="Sequential direct registration, mosaicking and drift evaluation "
                    "of fetoscopic vessel maps.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="JSON or TOML configuration file")
    parser.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    parser.add_argument("--seed", type=int, default=None, help="random seed (synth)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic sequence with ground truth")
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.add_argument("--n-frames", type=int)
    p.add_argument("--n-vessels", type=int)
    p.add_argument("--canvas", type=int)
    p.add_argument("--frame", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--occluder-rate", type=float)
    p.add_argument("--trajectory-mode", dest="traj_mode", choices=("smooth", "linear"))
    p.add_argument("--translation", dest="traj_translation", type=float)
    p.add_argument("--rotation", dest="traj_rotation", type=float)
    p.add_argument("--scale", dest="traj_scale", type=float)
    p.add_argument("--period", dest="traj_period", type=float)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="register consecutive frames")
    p.add_argument("frames", help="directory of frames or probability maps")
    p.add_argument("-o", "--output", required=True, help="pairwise transforms CSV")
    p.add_argument("--diagnostics", help="per-pair diagnostics JSON")
    p.add_argument("--input-mode", choices=("probability-maps", "intensity-frames"))
    p.add_argument("--max-failure-fraction", type=float)
    _add_mask_flag(p)
    _add_registration_flags(p)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("mosaic", help="blend frames into a mosaic")
    p.add_argument("frames", help="directory of frames or probability maps")
    p.add_argument("-o", "--output", required=True, help="mosaic PGM path")
    p.add_argument("--transforms", help="pairwise transforms CSV")
    p.add_argument("--register", action="store_true", help="compute transforms inline")
    p.add_argument("--reference", choices=("first", "center"))
    p.add_argument("--annotate", action="store_true",
                   help="also write a PNG with first/last frame outlines")
    p.add_argument("--input-mode", choices=("probability-maps", "intensity-frames"))
    p.add_argument("--max-failure-fraction", type=float)
    _add_mask_flag(p)
    _add_registration_flags(p)
    p.set_defaults(func=cmd_mosaic)

    p = sub.add_parser("drift", help="sliding-window drift evaluation")
    p.add_argument("--frames", required=True, help="intensity frames directory")
    p.add_argument("--probmaps", required=True, help="probability maps directory")
    p.add_argument("--transforms", required=True, help="pairwise transforms CSV")
    p.add_argument("--window", dest="window_size", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("-o", "--output", required=True, help="per-window CSV")
    p.add_argument("--summary", help="per-offset summary CSV")
    _add_mask_flag(p)
    p.set_defaults(func=cmd_drift)

    p = sub.add_parser("compare", help="vessel-based vs intensity-based drift summary")
    p.add_argument("vessel", help="drift CSV of the probability-map run")
    p.add_argument("intensity", help="drift CSV of the intensity-frame run")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("segmetrics", help="Dice/IoU of predictions against ground truth")
    p.add_argument("predictions", help="directory of probability maps")
    p.add_argument("ground_truth", help="directory of binary ground-truth masks")
    p.add_argument("--threshold", type=float)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_segmetrics)

    p = sub.add_parser("loss", help="BCE + Jaccard loss of one prediction")
    p.add_argument("ground_truth")
    p.add_argument("prediction")
    p.add_argument("--delta", type=float, default=1e-5)
    p.set_defaults(func=cmd_loss)
    return parser


def _pipeline_config(args):
    data = args.file_config
    reg = dict(data.get("registration", {}))
    for f in fields(RegistrationOptions):
        value = getattr(args, f"reg_{f.name}", None)
        if value is not None:
            reg[f.name] = value
    kw = {k: v for k, v in data.get("pipeline", {}).items()}
    for name in ("input_mode", "reference", "window_size", "threshold", "max_failure_fraction"):
        value = getattr(args, name, None)
        if value is not None:
            kw[name] = value
    return PipelineConfig(registration=RegistrationOptions.from_mapping(reg), **kw)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.config:
            _require_file(args.config, "config file")
        args.file_config = load_config_file(args.config) if args.config else {}
        args.pipeline = _pipeline_config(args)
        return args.func(args)
    except UsageError as exc:
        print(f"fetoreg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"fetoreg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
