"""Dense fine/coarse feature maps and the XFM1 feature file format.

The built-in descriptor is a dense, HOG-like stand-in for a learned backbone:
Sobel gradients are soft-binned into 8 signed orientations, then pooled over
spatial quadrants around each cell centre.

* fine map, stride 4: 8x8 window split into four 4x4 quadrants -> 32 channels
* coarse map, stride 16: 32x32 window split into sixteen 8x8 quadrants -> 128

Both maps are non-negative and L2-normalised per cell.  Cells without any
gradient energy stay exact zero vectors.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass

import numpy as np

from .imgio import Image, to_grayscale

FINE_STRIDE = 4
COARSE_STRIDE = 16
PYRAMID_RATIO = COARSE_STRIDE // FINE_STRIDE
N_ORIENT = 8

XFM_MAGIC = b"XFM1"
_XFM_HEADER = struct.Struct("<4s10I")
NORM_TOLERANCE = 1e-3


class FeatureFormatError(ValueError):
    """Raised when an XFM file or an ingested map violates the format."""


@dataclass(frozen=True)
class GridGeometry:
    grid_h: int
    grid_w: int
    stride: int

    @property
    def offset(self) -> float:
        """Pixel coordinate of the centre of cell 0."""
        return self.stride / 2 - 0.5

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    def cell_to_pixel(self, cell):
        return np.asarray(cell, dtype=np.float64) * self.stride + self.offset

    def pixel_to_cell(self, p, size: int):
        c = np.floor((np.asarray(p, dtype=np.float64) - self.offset) / self.stride + 0.5)
        return np.clip(c, 0, size - 1).astype(np.int64)


@dataclass(frozen=True)
class FeatureMap:
    """Per-cell descriptors, ``data`` laid out ``[cell_y][cell_x][channel]``."""

    data: np.ndarray
    stride: int

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"feature data must be (grid_h, grid_w, C), got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def grid_h(self) -> int:
        return self.data.shape[0]

    @property
    def grid_w(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def offset(self) -> float:
        return self.stride / 2 - 0.5

    @property
    def geometry(self) -> GridGeometry:
        return GridGeometry(self.grid_h, self.grid_w, self.stride)

    @property
    def flat(self) -> np.ndarray:
        """(n_cells, C) view in row-major cell order."""
        return self.data.reshape(-1, self.channels)


@dataclass(frozen=True)
class FeaturePyramid:
    fine: FeatureMap
    coarse: FeatureMap
    source_dims: tuple[int, int]  # (width, height) of the raster the maps describe

    def __post_init__(self):
        f, c = self.fine, self.coarse
        if c.stride != PYRAMID_RATIO * f.stride:
            raise FeatureFormatError("pyramid ratio violation: coarse stride must be 4x fine")
        if (f.grid_h, f.grid_w) != (c.grid_h * PYRAMID_RATIO, c.grid_w * PYRAMID_RATIO):
            raise FeatureFormatError("pyramid ratio violation: coarse grid must be fine grid / 4")


# --------------------------------------------------------------------------
# descriptor
# --------------------------------------------------------------------------


def _sobel(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    p = np.pad(gray.astype(np.float64), 1, mode="edge")
    gx = (p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[1:-1, :-2] + p[2:, :-2])
    gy = (p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]) - (p[:-2, :-2] + 2 * p[:-2, 1:-1] + p[:-2, 2:])
    return gx, gy


def orientation_maps(gray: np.ndarray, pad: int = 0) -> np.ndarray:
    """Per-pixel soft orientation histogram, shape (H+2pad, W+2pad, 8), float32.

    Gradient magnitude is split linearly between the two nearest of 8 signed
    orientation bins (bin centres at multiples of 45 degrees).  The border of
    width ``pad`` is zero.
    """
    gx, gy = _sobel(gray)
    mag = np.hypot(gx, gy)
    pos = np.arctan2(gy, gx) * (N_ORIENT / (2 * math.pi))
    pos = np.mod(pos, N_ORIENT)
    b0 = np.floor(pos).astype(np.intp)
    frac = pos - b0
    b0 %= N_ORIENT
    b1 = (b0 + 1) % N_ORIENT

    h, w = gray.shape
    out = np.zeros((h + 2 * pad, w + 2 * pad, N_ORIENT), dtype=np.float32)
    inner = out[pad : pad + h, pad : pad + w]
    yy, xx = np.indices((h, w), sparse=True)
    inner[yy, xx, b0] = ((1.0 - frac) * mag).astype(np.float32)
    # b1 != b0 always, so plain assignment cannot collide
    inner[yy, xx, b1] = (frac * mag).astype(np.float32)
    return out


def _block_sums(o: np.ndarray, size: int) -> np.ndarray:
    """Sum non-overlapping size x size blocks with a position-independent order."""
    rows = o[0::size].copy()
    for k in range(1, size):
        rows += o[k::size]
    cols = rows[:, 0::size].copy()
    for k in range(1, size):
        cols += rows[:, k::size]
    return cols


def _normalize_cells(desc: np.ndarray) -> np.ndarray:
    desc = np.maximum(desc.astype(np.float64), 0.0)
    norm = np.sqrt(np.sum(desc * desc, axis=-1, keepdims=True))
    out = np.zeros_like(desc)
    np.divide(desc, norm, out=out, where=norm > 0)
    return out.astype(np.float32)


def compute_pyramid(img: Image) -> FeaturePyramid:
    """Compute the fine (stride 4, 32 ch) and coarse (stride 16, 128 ch) maps."""
    if img.channels != 1:
        img = to_grayscale(img)
    h, w = img.height, img.width
    if h < COARSE_STRIDE or w < COARSE_STRIDE:
        raise ValueError("image smaller than one coarse cell")
    if h % COARSE_STRIDE or w % COARSE_STRIDE:
        raise ValueError(f"image dims must be multiples of {COARSE_STRIDE}, got {w}x{h}")

    # One zero-padded buffer serves both window layouts: fine quadrants start at
    # -2 (mod 4), coarse quadrants at -8 (mod 16).
    omap = orientation_maps(img.gray, pad=8)

    fine_blocks = _block_sums(omap[6:-6, 6:-6], 4)  # (h/4+1, w/4+1, 8)
    gh, gw = h // FINE_STRIDE, w // FINE_STRIDE
    fine = np.concatenate(
        [fine_blocks[dy : dy + gh, dx : dx + gw] for dy in (0, 1) for dx in (0, 1)],
        axis=-1,
    ) / np.float32(16.0)

    coarse_blocks = _block_sums(omap, 8)  # (h/8+2, w/8+2, 8)
    ch, cw = h // COARSE_STRIDE, w // COARSE_STRIDE
    coarse = np.concatenate(
        [
            coarse_blocks[qy : qy + 2 * ch : 2, qx : qx + 2 * cw : 2]
            for qy in range(4)
            for qx in range(4)
        ],
        axis=-1,
    ) / np.float32(64.0)
    del omap, fine_blocks, coarse_blocks

    return FeaturePyramid(
        fine=FeatureMap(_normalize_cells(fine), FINE_STRIDE),
        coarse=FeatureMap(_normalize_cells(coarse), COARSE_STRIDE),
        source_dims=(w, h),
    )


# --------------------------------------------------------------------------
# validation and XFM1 I/O
# --------------------------------------------------------------------------


def validate_map(fm: FeatureMap, name: str = "feature map") -> None:
    """Check finiteness, non-negativity and unit (or zero) cell norms."""
    d = fm.data
    if not np.all(np.isfinite(d)):
        raise FeatureFormatError(f"{name}: non-finite values")
    if np.any(d < 0):
        raise FeatureFormatError(f"{name}: negative values (features must be non-negative)")
    norm = np.sqrt(np.sum(d.astype(np.float64) ** 2, axis=-1))
    bad = (norm != 0) & (np.abs(norm - 1.0) > NORM_TOLERANCE)
    if np.any(bad):
        worst = float(np.max(np.abs(norm[bad] - 1.0)))
        raise FeatureFormatError(f"{name}: norm violation ({worst:.3g} > {NORM_TOLERANCE})")


def write_features(pyr: FeaturePyramid, path: str | os.PathLike) -> None:
    f, c = pyr.fine, pyr.coarse
    header = _XFM_HEADER.pack(
        XFM_MAGIC,
        pyr.source_dims[0],
        pyr.source_dims[1],
        f.channels,
        f.grid_w,
        f.grid_h,
        c.grid_w,
        c.grid_h,
        c.channels,
        f.stride,
        c.stride,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(f.data.astype("<f4").tobytes())
        fh.write(c.data.astype("<f4").tobytes())


def read_features(path: str | os.PathLike) -> FeaturePyramid:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:3] != b"XFM":
        raise FeatureFormatError("bad magic")
    if buf[:4] != XFM_MAGIC:
        raise FeatureFormatError(f"unsupported version {buf[:4]!r}")
    if len(buf) < _XFM_HEADER.size:
        raise FeatureFormatError("truncated header")
    (_, img_w, img_h, f_ch, f_gw, f_gh, c_gw, c_gh, c_ch, f_stride, c_stride) = (
        _XFM_HEADER.unpack_from(buf)
    )
    if f_stride == 0 or c_stride == 0 or f_ch == 0 or c_ch == 0:
        raise FeatureFormatError("dim mismatch: zero stride or channel count")
    if c_stride != PYRAMID_RATIO * f_stride or (f_gw, f_gh) != (c_gw * PYRAMID_RATIO, c_gh * PYRAMID_RATIO):
        raise FeatureFormatError("pyramid ratio violation")
    for grid, stride, size in ((f_gw, f_stride, img_w), (f_gh, f_stride, img_h)):
        if not (grid * stride <= size < (grid + 1) * stride):
            raise FeatureFormatError("dim mismatch: grid does not cover image")

    n_fine = f_gh * f_gw * f_ch
    n_coarse = c_gh * c_gw * c_ch
    expected = _XFM_HEADER.size + 4 * (n_fine + n_coarse)
    if len(buf) != expected:
        raise FeatureFormatError(f"dim mismatch: expected {expected} bytes, got {len(buf)}")
    payload = np.frombuffer(buf, dtype="<f4", offset=_XFM_HEADER.size)
    fine = FeatureMap(payload[:n_fine].reshape(f_gh, f_gw, f_ch), f_stride)
    coarse = FeatureMap(payload[n_fine:].reshape(c_gh, c_gw, c_ch), c_stride)
    validate_map(fine, "fine map")
    validate_map(coarse, "coarse map")
    return FeaturePyramid(fine, coarse, (img_w, img_h))
