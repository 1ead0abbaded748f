"""Dense image correspondence from a filtered 4D correlation tensor with coarse-to-fine re-weighting."""

from .corr4d import (
    BudgetExceededError,
    CorrelationTensor4D,
    MaxTables,
    correlate,
    correlate_dense,
    correlate_streamed,
    max_tables,
    query_row,
    transpose,
)
from .features import FeatureMap, FeaturePyramid, compute_pyramid, read_features, write_features
from .imgio import Image, ResizeSpec, load_image, resize_bilinear, to_grayscale
from .matcher import Match, MatchSet, PipelineConfig, match_pair, refine_query, upsample_coarse_map
from .mmfilter import MMConfig, mm_filter, reliability_scores

__version__ = "0.1.0"
