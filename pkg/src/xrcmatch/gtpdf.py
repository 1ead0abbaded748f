"""Ground-truth probability maps for keypoints and the Frobenius-norm loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import FeatureMap, GridGeometry

BINOMIAL_3X3 = np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]) / 16.0


@dataclass(frozen=True)
class KeypointPDF:
    probs: np.ndarray  # (grid_h, grid_w) float64

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape


def _geometry(grid) -> GridGeometry:
    if isinstance(grid, FeatureMap):
        return grid.geometry
    return grid


def _blur(p: np.ndarray) -> np.ndarray:
    padded = np.pad(p, 1)
    h, w = p.shape
    out = np.zeros_like(p)
    for dy in range(3):
        for dx in range(3):
            out += BINOMIAL_3X3[dy, dx] * padded[dy : dy + h, dx : dx + w]
    return out


def keypoint_to_pdf(kp: tuple[float, float], grid: FeatureMap | GridGeometry, blur: bool = True) -> KeypointPDF:
    """Spread a keypoint (pixels) over the 4 nearest cells, then blur 3x3.

    Mass is split bilinearly by distance to the surrounding cell centres.  Mass
    falling outside the grid is dropped, and the map is renormalised after each
    step so boundary keypoints still give a proper distribution.
    """
    g = _geometry(grid)
    x, y = float(kp[0]), float(kp[1])
    width, height = g.grid_w * g.stride, g.grid_h * g.stride
    if not (-0.5 <= x <= width - 0.5 and -0.5 <= y <= height - 0.5):
        raise ValueError(f"keypoint {kp} outside image {width}x{height}")

    u = (x - g.offset) / g.stride
    v = (y - g.offset) / g.stride
    x0, y0 = int(np.floor(u)), int(np.floor(v))
    fx, fy = u - x0, v - y0
    probs = np.zeros((g.grid_h, g.grid_w), dtype=np.float64)
    for cy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for cx, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            if 0 <= cy < g.grid_h and 0 <= cx < g.grid_w:
                probs[cy, cx] += wy * wx
    probs /= probs.sum()
    if blur:
        probs = _blur(probs)
        probs /= probs.sum()
    return KeypointPDF(probs)


def fnorm_loss(pred, gt) -> float:
    """sqrt(sum((pred - gt)^2)); callers choose how ``pred`` is normalised."""
    p = np.asarray(pred.probs if isinstance(pred, KeypointPDF) else pred, dtype=np.float64)
    g = np.asarray(gt.probs if isinstance(gt, KeypointPDF) else gt, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    return float(np.sqrt(np.sum((p - g) ** 2)))
