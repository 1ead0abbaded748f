"""Coarse-to-fine match extraction.

The coarse 4D tensor is filtered by mutual matching and its per-row maxima
rank the source cells.  For each of the top-k coarse cells the filtered coarse
map is bilinearly up-sampled onto the fine target grid and used to re-weight
fine correlations of the 16 fine cells inside that coarse cell; the best
re-weighted (fine source, fine target) pair becomes the match.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .corr4d import DEFAULT_MEMORY_BUDGET, correlate, query_row
from .features import PYRAMID_RATIO, FeatureMap, FeaturePyramid, compute_pyramid
from .imgio import Image, ResizeSpec, resize_bilinear, to_grayscale, to_original, to_resized
from .mmfilter import MMConfig, mm_filter, reliability_scores

DEFAULT_RESOLUTION = 1600
DEFAULT_TOPK = 2000

TSV_HEADER = "# src_x src_y tgt_x tgt_y score"

# chunk of coarse target blocks scored at once during the pruned fine search
_BLOCK_CHUNK = 16


@dataclass(frozen=True)
class Match:
    src_xy: tuple[float, float]
    tgt_xy: tuple[float, float]
    score: float
    coarse_cell: tuple[int, int]
    src_cell: tuple[int, int]  # fine cells, (x, y)
    tgt_cell: tuple[int, int]
    reliability: float = 0.0

    def sort_key(self):
        return (-self.score, self.src_cell[1], self.src_cell[0], self.tgt_cell[1], self.tgt_cell[0])


@dataclass
class MatchSet:
    matches: list[Match] = field(default_factory=list)
    k: int = DEFAULT_TOPK

    def __len__(self) -> int:
        return len(self.matches)

    def __iter__(self):
        return iter(self.matches)

    @property
    def src_points(self) -> np.ndarray:
        return np.array([m.src_xy for m in self.matches], dtype=np.float64).reshape(-1, 2)

    @property
    def tgt_points(self) -> np.ndarray:
        return np.array([m.tgt_xy for m in self.matches], dtype=np.float64).reshape(-1, 2)

    @property
    def scores(self) -> np.ndarray:
        return np.array([m.score for m in self.matches], dtype=np.float64)

    def to_tsv(self) -> str:
        lines = [TSV_HEADER]
        for m in self.matches:
            lines.append(
                f"{m.src_xy[0]:.4f}\t{m.src_xy[1]:.4f}\t{m.tgt_xy[0]:.4f}\t{m.tgt_xy[1]:.4f}\t{m.score:.4f}"
            )
        return "\n".join(lines) + "\n"

    def write_tsv(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="ascii", newline="\n") as fh:
            fh.write(self.to_tsv())


def read_tsv(path: str | os.PathLike) -> np.ndarray:
    """Load a match TSV as an (n, 5) array: src_x src_y tgt_x tgt_y score."""
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)  # header-only file
        rows = np.loadtxt(path, comments="#", ndmin=2, dtype=np.float64)
    return rows.reshape(-1, 5)


@dataclass(frozen=True)
class PipelineConfig:
    resolution: ResizeSpec = ResizeSpec(DEFAULT_RESOLUTION)
    mm: MMConfig = MMConfig()
    topk: int = DEFAULT_TOPK
    memory_budget: int = DEFAULT_MEMORY_BUDGET
    threads: int | None = None

    def __post_init__(self):
        if self.topk < 1:
            raise ValueError("topk must be >= 1")
        if self.memory_budget < 1:
            raise ValueError("memory budget must be positive")


# --------------------------------------------------------------------------
# up-sampling
# --------------------------------------------------------------------------


def _axis(fine_idx: np.ndarray, n_coarse: int):
    # fine cell j has its centre at coarse coordinate (j - 1.5) / 4
    u = np.clip(fine_idx * 0.25 - 0.375, 0.0, n_coarse - 1)
    i0 = np.floor(u).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_coarse - 1)
    return i0, i1, u - i0


def _upsample_at(m: np.ndarray, fy: np.ndarray, fx: np.ndarray) -> np.ndarray:
    """Bilinear value of coarse map ``m`` (float64) at fine cells (fy, fx)."""
    y0, y1, wy = _axis(fy, m.shape[0])
    x0, x1, wx = _axis(fx, m.shape[1])
    a, b = m[y0, x0], m[y0, x1]
    top = a + wx * (b - a)
    c, d = m[y1, x0], m[y1, x1]
    bot = c + wx * (d - c)
    return top + wy * (bot - top)


def upsample_coarse_map(m: np.ndarray) -> np.ndarray:
    """Up-sample a coarse correlation map by 4 with aligned cell centres."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    fy, fx = np.indices((h * PYRAMID_RATIO, w * PYRAMID_RATIO), sparse=True)
    return _upsample_at(m, fy, fx)


def _dilate3(m: np.ndarray) -> np.ndarray:
    """3x3 max filter with edge replication."""
    p = np.pad(m, 1, mode="edge")
    h, w = m.shape
    out = p[1:-1, 1:-1].copy()
    for dy in range(3):
        for dx in range(3):
            np.maximum(out, p[dy : dy + h, dx : dx + w], out=out)
    return out


# --------------------------------------------------------------------------
# refinement
# --------------------------------------------------------------------------


def _fine_correlations(src_vecs: np.ndarray, tgt_t: np.ndarray) -> np.ndarray:
    out = np.empty((src_vecs.shape[0], tgt_t.shape[1]), dtype=np.float32)
    _kernels.corr_rows(np.ascontiguousarray(src_vecs), np.ascontiguousarray(tgt_t), out)
    return out


def _check_coarse_map(fine_tgt: FeatureMap, coarse_map: np.ndarray) -> None:
    expect = (fine_tgt.grid_h // PYRAMID_RATIO, fine_tgt.grid_w // PYRAMID_RATIO)
    if coarse_map.shape != expect:
        raise ValueError(f"coarse map shape {coarse_map.shape} does not match target grid {expect}")


def reweighted_fine_map(
    fine_src: FeatureMap, fine_tgt: FeatureMap, coarse_map: np.ndarray, fine_src_cell: tuple[int, int]
) -> np.ndarray:
    """Up-sampled coarse map times the fine correlation map of one fine query cell, float64."""
    _check_coarse_map(fine_tgt, coarse_map)
    x, y = fine_src_cell
    if not (0 <= x < fine_src.grid_w and 0 <= y < fine_src.grid_h):
        raise IndexError(f"fine cell {fine_src_cell} outside source grid")
    cf = _fine_correlations(fine_src.data[y, x][None, :], fine_tgt.flat.T)[0]
    u = upsample_coarse_map(coarse_map)
    return cf.astype(np.float64).reshape(u.shape) * u


def refine_query(
    fine_src: FeatureMap, fine_tgt: FeatureMap, coarse_map_filtered: np.ndarray, fine_src_cell: tuple[int, int]
) -> tuple[tuple[int, int], float]:
    """Best fine target cell ``(x', y')`` for one fine source cell, and its score."""
    scores = reweighted_fine_map(fine_src, fine_tgt, coarse_map_filtered, fine_src_cell)
    j = int(np.argmax(scores))  # first maximum in row-major order = lexicographic (y', x')
    y, x = divmod(j, scores.shape[1])
    return (x, y), float(scores[y, x])


def best_fine_pair(
    fine_src: FeatureMap,
    fine_tgt_t: np.ndarray,
    fine_tgt_w: int,
    coarse_map: np.ndarray,
    coarse_cell: tuple[int, int],
) -> tuple[int, int, float]:
    """Best re-weighted pair over the 16 fine cells inside ``coarse_cell``.

    Returns ``(src_fine_index, tgt_fine_index, score)`` with indices in row-major
    order.  Equivalent to running :func:`refine_query` for every fine source cell
    and keeping the highest score (ties: smallest ``(y, x, y', x')``), but only
    scores target blocks whose up-sampling bound can still win.  Fine
    correlations never exceed 1, and a block's up-sampled weights never exceed
    the 3x3 max of the coarse map around it.
    """
    cx, cy = coarse_cell
    r = PYRAMID_RATIO
    sy = cy * r + np.arange(r)
    sx = cx * r + np.arange(r)
    src_ids = (sy[:, None] * fine_src.grid_w + sx[None, :]).ravel()
    src_vecs = fine_src.flat[src_ids]

    m = np.asarray(coarse_map, dtype=np.float64)
    hc, wc = m.shape
    bounds = _dilate3(m).ravel()
    n_blocks = bounds.size

    # cheap partial ordering first; fall back to a full sort if the scan runs long
    head = min(n_blocks, 4 * _BLOCK_CHUNK)
    if head < n_blocks:
        top = np.argpartition(-bounds, head - 1)[:head]
        order = top[np.argsort(-bounds[top], kind="stable")]
    else:
        order = np.argsort(-bounds, kind="stable")
    full_sorted = head >= n_blocks

    best_score = -1.0
    best_key = (0, 0)
    offs = np.arange(r)
    start = 0
    while start < n_blocks:
        if start >= order.size and not full_sorted:
            # the partial head may differ from the sorted head on boundary ties;
            # rescanning blocks already seen cannot change the result
            order = np.argsort(-bounds, kind="stable")
            full_sorted = True
            start = 0
        bound = bounds[order[start]]
        if bound * (1.0 + 1e-9) < best_score or (bound == 0.0 and best_score <= 0.0):
            break
        blocks = order[start : start + _BLOCK_CHUNK]
        start += blocks.size
        by, bx = np.divmod(blocks, wc)
        fy = (by[:, None, None] * r + offs[None, :, None]) + np.zeros((1, 1, r), dtype=np.intp)
        fx = (bx[:, None, None] * r + offs[None, None, :]) + np.zeros((1, r, 1), dtype=np.intp)
        fy, fx = fy.ravel(), fx.ravel()
        tids = fy * fine_tgt_w + fx
        u = _upsample_at(m, fy, fx)
        cf = _fine_correlations(src_vecs, fine_tgt_t[:, tids])
        sc = cf.astype(np.float64) * u[None, :]
        mx = float(sc.max())
        if mx < best_score:
            continue
        si, ti = np.nonzero(sc == mx)
        cand = min(zip(src_ids[si].tolist(), tids[ti].tolist()))
        if mx > best_score or cand < best_key:
            best_score, best_key = mx, cand

    if best_score <= 0.0:
        return int(src_ids[0]), 0, 0.0
    return best_key[0], best_key[1], best_score


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------


def _prepare(img: Image, spec: ResizeSpec) -> tuple[FeaturePyramid, float, float]:
    gray = to_grayscale(img)
    resized, sx, sy = resize_bilinear(gray, spec)
    return compute_pyramid(resized), sx, sy


def filtered_tensor(src_pyr: FeaturePyramid, tgt_pyr: FeaturePyramid, cfg: PipelineConfig):
    t = correlate(src_pyr.coarse, tgt_pyr.coarse, cfg.memory_budget)
    return mm_filter(t, cfg.mm)


def select_candidates(scores: np.ndarray, topk: int) -> np.ndarray:
    """Indices of the top-k positive scores, descending, ties by cell index."""
    flat = scores.ravel()
    idx = np.arange(flat.size)
    order = np.lexsort((idx, -flat))
    order = order[flat[order] > 0]
    return order[:topk]


def match_pyramids(
    src_pyr: FeaturePyramid,
    tgt_pyr: FeaturePyramid,
    cfg: PipelineConfig = PipelineConfig(),
    src_scale: tuple[float, float] = (1.0, 1.0),
    tgt_scale: tuple[float, float] = (1.0, 1.0),
) -> MatchSet:
    """Run correlation, filtering and refinement on precomputed pyramids.

    ``src_scale``/``tgt_scale`` are the (x, y) factors mapping the pyramids'
    raster back to the coordinates matches should be reported in.
    """
    _kernels.set_threads(cfg.threads)
    t = filtered_tensor(src_pyr, tgt_pyr, cfg)
    scores = reliability_scores(t)
    cands = select_candidates(scores, cfg.topk)

    fine_src, fine_tgt = src_pyr.fine, tgt_pyr.fine
    tgt_t = np.ascontiguousarray(fine_tgt.flat.T)
    cw = t.src_grid[1]
    ox_s, ox_t = fine_src.offset, fine_tgt.offset

    matches = []
    step = t.tile_rows()
    for c0 in range(0, cands.size, step):
        chunk = cands[c0 : c0 + step]
        rows = t.rows(chunk)
        for s, row in zip(chunk.tolist(), rows):
            cy, cx = divmod(s, cw)
            coarse_map = row.reshape(t.tgt_grid)
            si, ti, score = best_fine_pair(fine_src, tgt_t, fine_tgt.grid_w, coarse_map, (cx, cy))
            fsy, fsx = divmod(si, fine_src.grid_w)
            fty, ftx = divmod(ti, fine_tgt.grid_w)
            src_xy = (
                float(to_original(fsx * fine_src.stride + ox_s, src_scale[0])),
                float(to_original(fsy * fine_src.stride + ox_s, src_scale[1])),
            )
            tgt_xy = (
                float(to_original(ftx * fine_tgt.stride + ox_t, tgt_scale[0])),
                float(to_original(fty * fine_tgt.stride + ox_t, tgt_scale[1])),
            )
            matches.append(
                Match(src_xy, tgt_xy, score, (cx, cy), (fsx, fsy), (ftx, fty), float(scores.flat[s]))
            )
    matches.sort(key=Match.sort_key)
    return MatchSet(matches, cfg.topk)


def match_pair(src_img: Image, tgt_img: Image, cfg: PipelineConfig = PipelineConfig()) -> MatchSet:
    """Match two images; coordinates are reported in the original image frames."""
    src_pyr, ssx, ssy = _prepare(src_img, cfg.resolution)
    tgt_pyr, tsx, tsy = _prepare(tgt_img, cfg.resolution)
    return match_pyramids(src_pyr, tgt_pyr, cfg, (ssx, ssy), (tsx, tsy))


# --------------------------------------------------------------------------
# heatmaps
# --------------------------------------------------------------------------

HEATMAP_STAGES = ("raw", "mm1", "mm2", "fine")


def stage_maps(
    src_pyr: FeaturePyramid,
    tgt_pyr: FeaturePyramid,
    query_xy: tuple[float, float],
    cfg: PipelineConfig = PipelineConfig(),
) -> dict[str, np.ndarray]:
    """Correlation maps for one query pixel (in the pyramid's raster).

    ``raw``/``mm1``/``mm2`` are coarse maps before and after each mutual
    matching pass, ``fine`` is the re-weighted fine map guided by ``mm2``.
    """
    fine_src = src_pyr.fine
    fx = int(fine_src.geometry.pixel_to_cell(query_xy[0], fine_src.grid_w))
    fy = int(fine_src.geometry.pixel_to_cell(query_xy[1], fine_src.grid_h))
    coarse_cell = (fx // PYRAMID_RATIO, fy // PYRAMID_RATIO)

    t = correlate(src_pyr.coarse, tgt_pyr.coarse, cfg.memory_budget)
    maps = {"raw": query_row(t, coarse_cell)}
    one = MMConfig(cfg.mm.epsilon, 1)
    t = mm_filter(t, one)
    maps["mm1"] = query_row(t, coarse_cell)
    t = mm_filter(t, one)
    maps["mm2"] = query_row(t, coarse_cell)
    maps["fine"] = reweighted_fine_map(fine_src, tgt_pyr.fine, maps["mm2"], (fx, fy))
    return maps


def query_stage_maps(
    src_img: Image, tgt_img: Image, query_xy: tuple[float, float], cfg: PipelineConfig = PipelineConfig()
) -> dict[str, np.ndarray]:
    """:func:`stage_maps` for a query given in original source-image pixels."""
    src_pyr, ssx, ssy = _prepare(src_img, cfg.resolution)
    tgt_pyr, _, _ = _prepare(tgt_img, cfg.resolution)
    q = (float(to_resized(query_xy[0], ssx)), float(to_resized(query_xy[1], ssy)))
    return stage_maps(src_pyr, tgt_pyr, q, cfg)


def quantize_heatmap(m: np.ndarray) -> np.ndarray:
    """Map [0, max] linearly onto [0, 255] (all zeros stay zero)."""
    m = np.asarray(m, dtype=np.float64)
    peak = float(m.max()) if m.size else 0.0
    if peak <= 0:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.clip(np.floor(m / peak * 255.0 + 0.5), 0, 255).astype(np.uint8)


def export_heatmap(m: np.ndarray, path: str | os.PathLike) -> np.ndarray:
    """Write a correlation map as an 8-bit PGM; returns the quantised pixels."""
    from .imgio import write_pnm

    q = quantize_heatmap(m)
    write_pnm(Image(q), path)
    return q
