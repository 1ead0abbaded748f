"""Compiled inner loops.

All reductions run in a fixed order per output entry (ascending channel,
float64 accumulator, one rounding to float32), and each output entry is
produced by exactly one thread, so results do not depend on thread count or
on how rows are grouped into tiles.
"""

from __future__ import annotations

import os

import numba
import numpy as np
from numba import njit, prange

if "NUMBA_THREADING_LAYER" not in os.environ:
    # omp is thread-safe for concurrent callers and avoids probing an old TBB
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]


def set_threads(n: int | None) -> int:
    """Set the compiled-kernel thread count, clamped to what numba can launch."""
    limit = numba.config.NUMBA_NUM_THREADS
    n = limit if n is None else max(1, min(int(n), limit))
    numba.set_num_threads(n)
    return n


@njit(parallel=True, cache=True)
def corr_rows(src, tgt_t, out):
    """out[r, j] = clamp(sum_c src[r, c] * tgt_t[c, j], 0, 1) as float32.

    src: (n, C) float32, tgt_t: (C, m) float32, out: (n, m) float32.
    """
    n, n_ch = src.shape
    m = tgt_t.shape[1]
    for r in prange(n):
        acc = np.zeros(m, np.float64)
        for c in range(n_ch):
            a = np.float64(src[r, c])
            if a != 0.0:
                for j in range(m):
                    acc[j] += a * tgt_t[c, j]
        for j in range(m):
            v = acc[j]
            if v > 1.0:
                v = 1.0
            elif v < 0.0:
                v = 0.0
            out[r, j] = np.float32(v)


@njit(parallel=True, cache=True)
def apply_mm_passes(vals, out, row_ids, row_max, col_max, eps):
    """Apply a stack of mutual-matching passes to rows of a correlation tensor.

    vals: (n, m) float32 raw correlations, out: (n, m) float64 filtered values.
    row_ids[r] is the tensor row held in vals[r].  row_max: (P, n_rows_total),
    col_max: (P, m), eps: (P,).  Passes chain in float64 without intermediate
    rounding.  The two normalised ratios are multiplied first so the result is
    symmetric under swapping rows and columns.
    """
    n, m = vals.shape
    n_pass = eps.shape[0]
    for r in prange(n):
        rid = row_ids[r]
        for j in range(m):
            x = np.float64(vals[r, j])
            for p in range(n_pass):
                ratio_row = x / (row_max[p, rid] + eps[p])
                ratio_col = x / (col_max[p, j] + eps[p])
                x = x * (ratio_row * ratio_col)
            out[r, j] = x
