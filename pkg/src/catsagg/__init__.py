"""Transformer cost aggregation for dense correspondence on a small numpy engine."""

from catsagg.aggregator import (
    AggregatorConfig,
    AggregatorParams,
    cats_forward,
    collapse_levels,
    project_appearance,
    transformer_agg,
)
from catsagg.correlation import CorrelationStack, FeatureStack, Orientation, build_correlation, resize_normalize
from catsagg.flow import FlowField, KeypointSet, aepe, pck, soft_argmax, transfer_keypoints
from catsagg.synthetic import SynthConfig, SyntheticPair, generate_pair, wta_baseline

__version__ = "0.1.0"
