"""Image loading, grayscale conversion and bilinear resizing.

Every coordinate used downstream refers to the rasters produced here.  The
sampling convention is half-pixel centred: pixel ``i`` covers ``[i-0.5, i+0.5]``
so a resize by the identity factor is exact and matches can be mapped back to
the original frame with ``orig = (p + 0.5) * scale - 0.5``.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

COARSE_STRIDE = 16
MIN_LONG_SIDE = 32

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class ImageError(Exception):
    """Base class for image decoding failures."""

    code = "image_error"


class ImageReadError(ImageError):
    code = "unreadable"


class MalformedHeaderError(ImageError):
    code = "malformed_header"


class UnsupportedFormatError(ImageError):
    code = "unsupported_format"


@dataclass(frozen=True)
class Image:
    """An 8-bit raster stored as ``(height, width, channels)``."""

    data: np.ndarray

    def __post_init__(self):
        data = self.data
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image data must be (h, w, 1|3), got {self.data.shape}")
        if data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        data = np.ascontiguousarray(data, dtype=np.uint8)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def gray(self) -> np.ndarray:
        """2D view of a single-channel image."""
        if self.channels != 1:
            raise ValueError("image is not single-channel")
        return self.data[:, :, 0]


@dataclass(frozen=True)
class ResizeSpec:
    target_long_side: int

    def __post_init__(self):
        if self.target_long_side < MIN_LONG_SIDE:
            raise ValueError(
                f"resolution below minimum: {self.target_long_side} < {MIN_LONG_SIDE}"
            )

    @property
    def preserve_aspect(self) -> bool:
        return True


# --------------------------------------------------------------------------
# decoding
# --------------------------------------------------------------------------


def _pnm_header(buf: bytes) -> tuple[bytes, int, int, int, int]:
    """Parse a binary PNM header; returns (magic, w, h, maxval, data_offset)."""
    tokens: list[bytes] = []
    pos = 2
    n = len(buf)
    while len(tokens) < 3:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeaderError("malformed header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise MalformedHeaderError("malformed header")
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError:
        raise MalformedHeaderError("malformed header") from None
    if w < 1 or h < 1 or maxval < 1:
        raise MalformedHeaderError("malformed header")
    return buf[:2], w, h, maxval, pos + 1


def _decode_pnm(buf: bytes) -> Image:
    magic, w, h, maxval, off = _pnm_header(buf)
    if maxval > 255:
        raise UnsupportedFormatError("16-bit PNM is not supported")
    if maxval != 255:
        raise UnsupportedFormatError(f"PNM maxval {maxval} is not supported (need 255)")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    raster = buf[off : off + need]
    if len(raster) < need:
        raise ImageReadError(f"truncated raster: expected {need} bytes, got {len(raster)}")
    data = np.frombuffer(raster, dtype=np.uint8).reshape(h, w, channels)
    return Image(data.copy())


def _decode_png(buf: bytes, path: str) -> Image:
    # IHDR: signature(8) + length(4) + type(4) + w(4) + h(4) + depth(1) + colour type(1)
    if len(buf) < 26 or buf[12:16] != b"IHDR":
        raise MalformedHeaderError("malformed header")
    depth = buf[24]
    if depth == 16:
        raise UnsupportedFormatError("16-bit PNG is not supported")
    if depth not in (1, 2, 4, 8):
        raise MalformedHeaderError("malformed header")

    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("1", "L", "LA") or (mode == "P" and _palette_is_gray(im)):
                arr = np.asarray(im.convert("L"))
            elif mode in ("RGB", "RGBA", "P"):
                arr = np.asarray(im.convert("RGB"))
            else:
                raise UnsupportedFormatError(f"PNG mode {mode!r} is not supported")
    except ImageError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise ImageReadError(f"cannot decode PNG: {exc}") from exc
    return Image(arr.copy())


def _palette_is_gray(im) -> bool:
    pal = im.getpalette() or []
    rgb = np.asarray(pal[: len(pal) - len(pal) % 3]).reshape(-1, 3)
    return bool(np.all(rgb[:, 0] == rgb[:, 1]) and np.all(rgb[:, 1] == rgb[:, 2]))


def load_image(path: str | os.PathLike) -> Image:
    """Decode a binary PGM (P5), PPM (P6) or 8-bit PNG file."""
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ImageReadError(f"cannot read {path}: {exc}") from exc
    if buf[:8] == _PNG_SIGNATURE:
        return _decode_png(buf, path)
    if buf[:2] in (b"P5", b"P6"):
        return _decode_pnm(buf)
    if len(buf) < 2:
        raise MalformedHeaderError("malformed header")
    raise UnsupportedFormatError(f"unsupported image format in {path}")


def write_pnm(img: Image, path: str | os.PathLike) -> None:
    """Write P5 for single-channel images and P6 for RGB."""
    magic = b"P5" if img.channels == 1 else b"P6"
    header = magic + f"\n{img.width} {img.height}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(img.data.tobytes())


# --------------------------------------------------------------------------
# pixel operations
# --------------------------------------------------------------------------


def to_grayscale(img: Image) -> Image:
    """Rec. 601 luma, rounded half up."""
    if img.channels == 1:
        return img
    rgb = img.data.astype(np.float64)
    luma = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    out = np.clip(np.floor(luma + 0.5), 0, 255).astype(np.uint8)
    return Image(out)


def _round_to_stride(v: float, stride: int = COARSE_STRIDE) -> int:
    return max(stride, int(math.floor(v / stride + 0.5)) * stride)


def resized_dims(width: int, height: int, spec: ResizeSpec) -> tuple[int, int]:
    """Output (width, height) for ``spec``: long side to target, both rounded to 16."""
    long_out = _round_to_stride(spec.target_long_side)
    if width >= height:
        return long_out, _round_to_stride(height * long_out / width)
    return _round_to_stride(width * long_out / height), long_out


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    pos = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, pos - i0


def resample_bilinear(img: Image, width: int, height: int) -> Image:
    """Bilinear resample to an explicit size with half-pixel centres."""
    src = img.data.astype(np.float64)
    y0, y1, fy = _axis_weights(img.height, height)
    x0, x1, fx = _axis_weights(img.width, width)
    top = src[y0]
    rows = top + fy[:, None, None] * (src[y1] - top)
    left = rows[:, x0]
    out = left + fx[None, :, None] * (rows[:, x1] - left)
    return Image(np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8))


def resize_bilinear(img: Image, spec: ResizeSpec) -> tuple[Image, float, float]:
    """Resize so the long side hits ``spec.target_long_side`` (rounded to 16).

    Returns the resized image and the per-axis ``original / resized`` scale
    factors used to map matches back into the input frame.
    """
    width, height = resized_dims(img.width, img.height, spec)
    if (width, height) == (img.width, img.height):
        out = img
    else:
        out = resample_bilinear(img, width, height)
    return out, img.width / width, img.height / height


def to_original(p: np.ndarray | float, scale: float):
    """Map a coordinate in the resized raster back to the original raster."""
    return (np.asarray(p, dtype=np.float64) + 0.5) * scale - 0.5


def to_resized(p: np.ndarray | float, scale: float):
    return (np.asarray(p, dtype=np.float64) + 0.5) / scale - 0.5


def load_gray(path: str | os.PathLike | Path) -> Image:
    return to_grayscale(load_image(path))
