"""Direct affine registration, mosaicking and drift evaluation for fetoscopic vessel maps."""

__version__ = "0.1.0"

from .imagecore import BinaryMask, ScalarImage, binarize, load_image, save_image
from .warp import AffineTransform, circular_mask, compose, invert, warp_image
from .register import RegistrationOptions, RegistrationResult, register_pair, register_sequence
from .mosaic import blend, chain_transforms, compute_canvas, render
from .metrics import LossInputs, combined_loss, dice_score, iou_score, ssim
from .drifteval import evaluate_drift, summarize
from .synth import SynthConfig, generate_scene, generate_sequence

__all__ = [
    "AffineTransform",
    "BinaryMask",
    "LossInputs",
    "RegistrationOptions",
    "RegistrationResult",
    "ScalarImage",
    "SynthConfig",
    "binarize",
    "blend",
    "chain_transforms",
    "circular_mask",
    "combined_loss",
    "compose",
    "compute_canvas",
    "dice_score",
    "evaluate_drift",
    "generate_scene",
    "generate_sequence",
    "invert",
    "iou_score",
    "load_image",
    "register_pair",
    "register_sequence",
    "render",
    "save_image",
    "ssim",
    "summarize",
    "warp_image",
]
