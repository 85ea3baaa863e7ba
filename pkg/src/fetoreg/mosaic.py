"""Transform chaining, canvas layout and average-probability blending."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .imagecore import ScalarImage, save_image
from .warp import AffineTransform, bilinear_sample, compose, invert

__all__ = [
    "Mosaic",
    "TransformChain",
    "DegenerateChainError",
    "chain_transforms",
    "reference_index_for",
    "compute_canvas",
    "blend",
    "render",
]

MAX_CANVAS = 8192


class DegenerateChainError(ValueError):
    pass


@dataclass(frozen=True)
class TransformChain:
    absolute: tuple
    reference_index: int

    def __len__(self):
        return len(self.absolute)


@dataclass(eq=False)
class Mosaic:
    sum: np.ndarray
    count: np.ndarray
    offset: tuple
    # frame outlines in canvas coordinates, kept for annotation
    outlines: tuple = ()

    @property
    def width(self):
        return self.sum.shape[1]

    @property
    def height(self):
        return self.sum.shape[0]

    def rendered(self):
        out = np.zeros_like(self.sum)
        seen = self.count > 0
        out[seen] = self.sum[seen] / self.count[seen]
        return np.clip(out, 0.0, 1.0)


def reference_index_for(n, reference):
    """``"first"`` -> 0, ``"center"`` -> ``n // 2``; integers pass through."""
    if reference == "first":
        return 0
    if reference == "center":
        return n // 2
    return int(reference)


def chain_transforms(pairwise, reference_index=0):
    """Absolute transforms into the reference frame.

    ``pairwise[k]`` maps frame ``k+1`` into frame ``k``.
    """
    n = len(pairwise) + 1
    if not 0 <= reference_index < n:
        raise IndexError(f"reference_index {reference_index} outside 0..{n - 1}")
    absolute = [None] * n
    absolute[reference_index] = AffineTransform.identity()
    for k in range(reference_index + 1, n):
        absolute[k] = compose(absolute[k - 1], pairwise[k - 1])
    for k in range(reference_index - 1, -1, -1):
        absolute[k] = compose(absolute[k + 1], invert(pairwise[k]))
    return TransformChain(tuple(absolute), reference_index)


def _corners(width, height):
    return (
        np.array([0.0, width - 1.0, width - 1.0, 0.0]),
        np.array([0.0, 0.0, height - 1.0, height - 1.0]),
    )


def _outward(lo, hi):
    # shave float noise so that integer-valued corners do not round outward
    return math.floor(lo + 1e-9), math.ceil(hi - 1e-9)


def compute_canvas(frame_width, frame_height, chain, max_size=MAX_CANVAS):
    """Bounding box of all transformed frame corners.

    Returns ``(width, height, (ox, oy))`` where canvas pixel ``(i, j)`` sits
    at reference coordinates ``(i + ox, j + oy)``.
    """
    if len(chain) == 0:
        raise ValueError("empty transform chain")
    cx, cy = _corners(frame_width, frame_height)
    xs, ys = [], []
    for t in chain.absolute:
        x, y = t.apply(cx, cy)
        xs.append(x)
        ys.append(y)
    x0, x1 = _outward(np.min(xs), np.max(xs))
    y0, y1 = _outward(np.min(ys), np.max(ys))
    width, height = x1 - x0 + 1, y1 - y0 + 1
    if width > max_size or height > max_size:
        raise DegenerateChainError(
            f"degenerate chain: canvas {width}x{height} exceeds {max_size}x{max_size}"
        )
    return width, height, (x0, y0)


def blend(frames, chain, max_size=MAX_CANVAS):
    """Average every frame's valid samples into one canvas.

    ``frames`` is a list of ``(ScalarImage, BinaryMask)``. Each frame is
    warped once, restricted to its own bounding box on the canvas.
    """
    if len(frames) != len(chain):
        raise ValueError(f"{len(frames)} frames but {len(chain)} transforms")
    fh, fw = frames[0][0].shape
    for img, mask in frames:
        if img.shape != (fh, fw) or mask.shape != (fh, fw):
            raise ValueError("all frames and masks must share dimensions")
    width, height, (ox, oy) = compute_canvas(fw, fh, chain, max_size)
    acc = np.zeros((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    cx, cy = _corners(fw, fh)
    outlines = []
    for (img, mask), t in zip(frames, chain.absolute):
        qx, qy = t.apply(cx, cy)
        outlines.append(tuple(zip(qx - ox, qy - oy)))
        bx0, bx1 = _outward(qx.min() - ox, qx.max() - ox)
        by0, by1 = _outward(qy.min() - oy, qy.max() - oy)
        bx0, by0 = max(bx0, 0), max(by0, 0)
        bx1, by1 = min(bx1, width - 1), min(by1, height - 1)
        ys, xs = np.mgrid[by0:by1 + 1, bx0:bx1 + 1].astype(np.float64)
        back = invert(t)
        u, v = back.apply(xs + ox, ys + oy)
        val, ok = bilinear_sample(img.data, mask.data, u, v)
        acc[by0:by1 + 1, bx0:bx1 + 1] += np.where(ok, val, 0.0)
        count[by0:by1 + 1, bx0:bx1 + 1] += ok
    return Mosaic(acc, count, (ox, oy), tuple(outlines))


_BLUE = (0, 0, 255)
_RED = (255, 0, 0)


def render(m, path, annotate=False, annotated_path=None):
    """Write the averaged mosaic as a 16-bit PGM.

    With ``annotate`` an RGB PNG is written as well (``<stem>_annotated.png``
    unless ``annotated_path`` is given) with the first frame outlined in
    blue and the last in red. Returns the list of paths written.
    """
    if m.sum.size == 0:
        raise ValueError("empty mosaic")
    path = os.fspath(path)
    save_image(ScalarImage(m.rendered()), path, depth=16)
    written = [path]
    if annotate:
        from PIL import Image, ImageDraw

        gray = np.floor(m.rendered() * 255 + 0.5).astype(np.uint8)
        im = Image.fromarray(np.stack([gray] * 3, axis=-1), mode="RGB")
        draw = ImageDraw.Draw(im)
        outlines = list(m.outlines)
        picks = [(outlines[0], _BLUE)] if outlines else []
        if len(outlines) >= 2:
            picks.append((outlines[-1], _RED))
        for quad, colour in picks:
            pts = [(float(x), float(y)) for x, y in quad]
            draw.line(pts + [pts[0]], fill=colour, width=1)
        if annotated_path is None:
            stem, _ = os.path.splitext(path)
            annotated_path = stem + "_annotated.png"
        im.save(annotated_path)
        written.append(os.fspath(annotated_path))
    return written
