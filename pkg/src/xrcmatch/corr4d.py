"""4D correlation tensor over two coarse feature maps.

A tensor is stored either densely (``raw`` float32 entries) or streamed
(only the two feature maps are kept and entries are recomputed tile by tile
under a memory budget).  Mutual-matching passes are recorded lazily as a stack
of max tables and applied on the fly, so both storages go through the same
compiled code and agree bit for bit.  Raw entries are float32; filtered
entries are float64 so that chained passes do not compound rounding error or
drop tiny values into float32 subnormals.

Rows of the tensor are source cells and columns are target cells, both in
row-major cell order: entry ``[s, t]`` with ``s = y * src_w + x`` and
``t = y' * tgt_w + x'``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from . import _kernels
from .features import FeatureMap

DEFAULT_MEMORY_BUDGET = 1 << 30
ENTRY_BYTES = 4
FILTERED_ENTRY_BYTES = 8


class BudgetExceededError(MemoryError):
    """The dense tensor does not fit; use the streamed path instead."""


@dataclass(frozen=True)
class MaxTables:
    """Row maxima (per source cell) and column maxima (per target cell)."""

    row_max: np.ndarray
    col_max: np.ndarray

    def swapped(self) -> "MaxTables":
        return MaxTables(self.col_max, self.row_max)


@dataclass(frozen=True)
class MMPass:
    tables: MaxTables
    epsilon: float


@dataclass(frozen=True)
class CorrelationTensor4D:
    src_grid: tuple[int, int]  # (h, w)
    tgt_grid: tuple[int, int]
    raw: np.ndarray | None = None  # dense storage, (n_src, n_tgt) float32
    src_feats: np.ndarray | None = None  # streamed storage, (n_src, C) float32
    tgt_feats_t: np.ndarray | None = None  # streamed storage, (C, n_tgt) float32
    passes: tuple[MMPass, ...] = ()
    memory_budget: int = DEFAULT_MEMORY_BUDGET

    @property
    def storage(self) -> str:
        return "dense" if self.raw is not None else "streamed"

    @property
    def n_src(self) -> int:
        return self.src_grid[0] * self.src_grid[1]

    @property
    def n_tgt(self) -> int:
        return self.tgt_grid[0] * self.tgt_grid[1]

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (*self.src_grid, *self.tgt_grid)

    @classmethod
    def from_array(cls, values: np.ndarray, memory_budget: int = DEFAULT_MEMORY_BUDGET):
        """Wrap an explicit ``[y][x][y'][x']`` array as a dense tensor."""
        values = np.asarray(values)
        if values.ndim != 4:
            raise ValueError(f"expected a 4D array, got shape {values.shape}")
        if not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("correlation entries must be finite and non-negative")
        hs, ws, ht, wt = values.shape
        raw = np.ascontiguousarray(values.reshape(hs * ws, ht * wt), dtype=np.float32)
        raw.setflags(write=False)
        return cls((hs, ws), (ht, wt), raw=raw, memory_budget=memory_budget)

    def with_pass(self, tables: MaxTables, epsilon: float) -> "CorrelationTensor4D":
        return replace(self, passes=self.passes + (MMPass(tables, float(epsilon)),))

    # -- tile machinery ----------------------------------------------------

    def tile_rows(self) -> int:
        """Source rows per tile: one tile (raw plus filtered copy) fits a quarter of the budget."""
        per_entry = ENTRY_BYTES + (FILTERED_ENTRY_BYTES if self.passes else 0)
        return max(1, (self.memory_budget // 4) // (self.n_tgt * per_entry))

    def _stack(self):
        n_pass = len(self.passes)
        row = np.empty((n_pass, self.n_src), dtype=np.float64)
        col = np.empty((n_pass, self.n_tgt), dtype=np.float64)
        eps = np.empty(n_pass, dtype=np.float64)
        for p, mm in enumerate(self.passes):
            row[p] = mm.tables.row_max
            col[p] = mm.tables.col_max
            eps[p] = mm.epsilon
        return row, col, eps

    def rows(self, row_ids, _stack=None) -> np.ndarray:
        """Entries for the given source rows, shape (len(row_ids), n_tgt).

        float32 for a raw tensor, float64 once mutual-matching passes are stacked.
        """
        row_ids = np.ascontiguousarray(row_ids, dtype=np.int64)
        if row_ids.size and (row_ids.min() < 0 or row_ids.max() >= self.n_src):
            raise IndexError("source cell out of range")
        if self.raw is not None:
            vals = self.raw[row_ids]
        else:
            vals = np.empty((row_ids.size, self.n_tgt), dtype=np.float32)
            _kernels.corr_rows(self.src_feats[row_ids], self.tgt_feats_t, vals)
        if not self.passes:
            return vals
        row, col, eps = _stack if _stack is not None else self._stack()
        out = np.empty(vals.shape, dtype=np.float64)
        _kernels.apply_mm_passes(vals, out, row_ids, row, col, eps)
        return out

    def iter_tiles(self) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(first_row, tile)`` blocks of filtered rows, in order."""
        stack = self._stack() if self.passes else None
        step = self.tile_rows()
        for start in range(0, self.n_src, step):
            ids = np.arange(start, min(start + step, self.n_src), dtype=np.int64)
            yield start, self.rows(ids, _stack=stack)

    def to_array(self) -> np.ndarray:
        """Materialise all entries as a ``[y][x][y'][x']`` array (dtype as :meth:`rows`)."""
        out = np.empty((self.n_src, self.n_tgt), dtype=np.float64 if self.passes else np.float32)
        for start, tile in self.iter_tiles():
            out[start : start + tile.shape[0]] = tile
        return out.reshape(self.shape)


# --------------------------------------------------------------------------
# construction
# --------------------------------------------------------------------------


def _check_pair(src: FeatureMap, tgt: FeatureMap) -> None:
    if src.channels != tgt.channels:
        raise ValueError(f"channel mismatch: {src.channels} vs {tgt.channels}")


def dense_bytes(src: FeatureMap, tgt: FeatureMap) -> int:
    return src.grid_h * src.grid_w * tgt.grid_h * tgt.grid_w * ENTRY_BYTES


def correlate_streamed(
    src: FeatureMap, tgt: FeatureMap, memory_budget: int = DEFAULT_MEMORY_BUDGET
) -> CorrelationTensor4D:
    _check_pair(src, tgt)
    s = np.ascontiguousarray(src.flat)
    t = np.ascontiguousarray(tgt.flat.T)
    return CorrelationTensor4D(
        (src.grid_h, src.grid_w),
        (tgt.grid_h, tgt.grid_w),
        src_feats=s,
        tgt_feats_t=t,
        memory_budget=memory_budget,
    )


def correlate_dense(
    src: FeatureMap, tgt: FeatureMap, memory_budget: int = DEFAULT_MEMORY_BUDGET
) -> CorrelationTensor4D:
    """Materialise every source/target dot product, summing channels in ascending order."""
    _check_pair(src, tgt)
    need = dense_bytes(src, tgt)
    if need > memory_budget:
        raise BudgetExceededError(
            f"dense tensor needs {need} bytes, budget is {memory_budget}; use the streamed path"
        )
    streamed = correlate_streamed(src, tgt, memory_budget)
    raw = streamed.to_array().reshape(streamed.n_src, streamed.n_tgt)
    raw.setflags(write=False)
    return CorrelationTensor4D(streamed.src_grid, streamed.tgt_grid, raw=raw, memory_budget=memory_budget)


def correlate(
    src: FeatureMap, tgt: FeatureMap, memory_budget: int = DEFAULT_MEMORY_BUDGET
) -> CorrelationTensor4D:
    """Dense when the tensor takes at most half the budget, streamed otherwise."""
    if 2 * dense_bytes(src, tgt) <= memory_budget:
        return correlate_dense(src, tgt, memory_budget)
    return correlate_streamed(src, tgt, memory_budget)


# --------------------------------------------------------------------------
# queries
# --------------------------------------------------------------------------


def max_tables(t: CorrelationTensor4D) -> MaxTables:
    """Exact row and column maxima in one pass over the tiles."""
    row_max = np.zeros(t.n_src, dtype=np.float64)
    col_max = np.zeros(t.n_tgt, dtype=np.float64)
    for start, tile in t.iter_tiles():
        row_max[start : start + tile.shape[0]] = tile.max(axis=1)
        np.maximum(col_max, tile.max(axis=0), out=col_max)
    return MaxTables(row_max, col_max)


def transpose(t: CorrelationTensor4D) -> CorrelationTensor4D:
    """Swap source and target roles; entry ``[j, i]`` of the result is entry ``[i, j]`` of ``t``."""
    passes = tuple(MMPass(p.tables.swapped(), p.epsilon) for p in t.passes)
    if t.raw is not None:
        raw = np.ascontiguousarray(t.raw.T)
        raw.setflags(write=False)
        return replace(t, src_grid=t.tgt_grid, tgt_grid=t.src_grid, raw=raw, passes=passes)
    return replace(
        t,
        src_grid=t.tgt_grid,
        tgt_grid=t.src_grid,
        src_feats=np.ascontiguousarray(t.tgt_feats_t.T),
        tgt_feats_t=np.ascontiguousarray(t.src_feats.T),
        passes=passes,
    )


def cell_index(grid: tuple[int, int], cell: tuple[int, int]) -> int:
    x, y = cell
    h, w = grid
    if not (0 <= x < w and 0 <= y < h):
        raise IndexError(f"cell {cell} outside grid {w}x{h}")
    return y * w + x


def query_row(t: CorrelationTensor4D, src_cell: tuple[int, int]) -> np.ndarray:
    """2D correlation map (over the target grid) for one source cell ``(x, y)``."""
    s = cell_index(t.src_grid, src_cell)
    return t.rows([s])[0].reshape(t.tgt_grid)
