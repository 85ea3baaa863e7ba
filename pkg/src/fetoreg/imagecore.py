"""Image containers and PGM/PNG file I/O.

Images are row-major 2-D float64 arrays with values in [0, 1]; masks are
boolean arrays of the same layout. Both wrappers freeze their buffers so an
instance can be shared freely.
"""
from __future__ import annotations

import os
import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ScalarImage",
    "BinaryMask",
    "ImageFormatError",
    "load_image",
    "save_image",
    "binarize",
]


class ImageFormatError(ValueError):
    """Unsupported or corrupt image file."""

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


def _frozen(arr, dtype):
    arr = np.array(arr, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class ScalarImage:
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, np.float64)
        if data.ndim != 2:
            raise ValueError(f"image must be 2-D, got shape {data.shape}")
        if data.shape[0] == 0 or data.shape[1] == 0:
            raise ValueError(f"image has an empty dimension: {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite values")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError(
                f"image values must lie in [0, 1], got [{data.min()}, {data.max()}]"
            )
        object.__setattr__(self, "data", data)

    @classmethod
    def clipped(cls, arr):
        """Build an image from ``arr`` after clipping it to [0, 1]."""
        return cls(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class BinaryMask:
    data: np.ndarray

    def __post_init__(self):
        data = _frozen(self.data, bool)
        if data.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {data.shape}")
        if data.shape[0] == 0 or data.shape[1] == 0:
            raise ValueError(f"mask has an empty dimension: {data.shape}")
        object.__setattr__(self, "data", data)

    @classmethod
    def full(cls, width, height, value=True):
        return cls(np.full((height, width), bool(value)))

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def count(self):
        return int(np.count_nonzero(self.data))

    def __and__(self, other):
        return BinaryMask(self.data & other.data)


_PGM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_pgm(path, raw):
    pos = 0
    fields = []
    for _ in range(4):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise ImageFormatError(path, "corrupt header: truncated")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise ImageFormatError(path, f"unsupported PGM magic {fields[0]!r} (only binary P5)")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise ImageFormatError(path, "corrupt header: non-integer field") from None
    if width <= 0 or height <= 0:
        raise ImageFormatError(path, f"corrupt header: dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise ImageFormatError(path, f"corrupt header: maxval {maxval}")
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(raw) or not raw[pos:pos + 1].isspace():
        raise ImageFormatError(path, "corrupt header: missing raster separator")
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * dtype.itemsize
    body = raw[pos:pos + need]
    if len(body) < need:
        raise ImageFormatError(path, f"truncated raster: {len(body)} of {need} bytes")
    samples = np.frombuffer(body, dtype=dtype).reshape(height, width)
    if samples.max(initial=0) > maxval:
        raise ImageFormatError(path, "sample exceeds maxval")
    return samples.astype(np.float64) / maxval


def _load_png(path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            if im.format != "PNG":
                raise ImageFormatError(path, f"unsupported format {im.format}")
            mode = im.mode
            if mode == "L":
                maxval = 255
            elif mode in ("I;16", "I;16B", "I"):
                maxval = 65535
            else:
                raise ImageFormatError(path, f"PNG mode {mode} is not grayscale")
            samples = np.asarray(im, dtype=np.float64)
    except ImageFormatError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types for bad files
        raise ImageFormatError(path, f"cannot decode PNG ({exc})") from exc
    if samples.min() < 0 or samples.max() > maxval:
        raise ImageFormatError(path, "sample out of range for bit depth")
    return samples / maxval


def load_image(path):
    """Read an 8/16-bit binary PGM or a grayscale PNG; samples map to s/maxval."""
    path = os.fspath(path)
    if not os.path.isfile(path):
        raise FileNotFoundError(f"{path}: no such file")
    with open(path, "rb") as fh:
        head = fh.read(8)
        fh.seek(0)
        if head.startswith(b"\x89PNG"):
            data = _load_png(path)
        elif head[:1] == b"P":
            data = _parse_pgm(path, fh.read())
        else:
            raise ImageFormatError(path, "unsupported format (expected PGM P5 or PNG)")
    return ScalarImage(data)


def quantize(data, depth):
    """Round-half-up quantization of [0, 1] values to ``depth``-bit samples."""
    if depth not in (8, 16):
        raise ValueError(f"depth must be 8 or 16, got {depth}")
    maxval = (1 << depth) - 1
    q = np.floor(np.asarray(data, dtype=np.float64) * maxval + 0.5)
    return np.clip(q, 0, maxval).astype(np.uint16 if depth == 16 else np.uint8)


def save_image(img, path, depth=16):
    """Write ``img`` as a binary PGM with the given bit depth."""
    if not isinstance(img, ScalarImage):
        img = ScalarImage(img)
    samples = quantize(img.data, depth)
    maxval = (1 << depth) - 1
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    raster = samples.astype(">u2" if depth == 16 else "u1").tobytes()
    with open(os.fspath(path), "wb") as fh:
        fh.write(header)
        fh.write(raster)


def save_mask(mask, path):
    save_image(ScalarImage(mask.data.astype(np.float64)), path, depth=8)


def load_mask(path):
    return binarize(load_image(path), 0.5)


def binarize(p, threshold=0.5):
    """Foreground where ``p >= threshold``."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    return BinaryMask(p.data >= threshold)
