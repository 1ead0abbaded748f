"""Soft mutual-matching filter.

One pass rescales every entry by how close it is to the best entry of its
row and of its column::

    row_ratio = corr / (row_max + epsilon)
    col_ratio = corr / (col_max + epsilon)
    filtered  = corr * row_ratio * col_ratio

Entries that are the maximum in both directions keep (almost) their value;
everything else is damped.  A pass needs the max tables of its input, so on
streamed tensors each pass costs one sweep over the tiles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .corr4d import CorrelationTensor4D, max_tables

DEFAULT_EPSILON = 1e-8
DEFAULT_PASSES = 2


@dataclass(frozen=True)
class MMConfig:
    epsilon: float = DEFAULT_EPSILON
    passes: int = DEFAULT_PASSES

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.passes < 1:
            raise ValueError("passes must be >= 1")


def mm_filter(t: CorrelationTensor4D, cfg: MMConfig = MMConfig()) -> CorrelationTensor4D:
    for _ in range(cfg.passes):
        t = t.with_pass(max_tables(t), cfg.epsilon)
    return t


def reliability_scores(t: CorrelationTensor4D) -> np.ndarray:
    """Best filtered correlation of each source cell, shaped like the source grid."""
    return max_tables(t).row_max.reshape(t.src_grid)
