"""Handcrafted-feature baselines: acoustic descriptors, aggregates, GOP ingestion, baseline head."""

from .acoustic import (
    AGGREGATE_NAMES,
    LLD_NAMES,
    SUMMARY_NAMES,
    AggregateFeatures,
    SegmentConfig,
    SequenceFeatures,
    extract_aggregate_features,
    extract_sequence_features,
    track_pitch,
)
from .gop import GopFeatures, GopTable, GopValidationError, ingest_gop, write_toy_gop
from .head import (
    FEATURE_SETS,
    FeatureNormalizer,
    baseline_head_config,
    baseline_score_head,
    baseline_vectors,
    normalized_source,
)

__all__ = [
    "AGGREGATE_NAMES",
    "FEATURE_SETS",
    "LLD_NAMES",
    "SUMMARY_NAMES",
    "AggregateFeatures",
    "FeatureNormalizer",
    "GopFeatures",
    "GopTable",
    "GopValidationError",
    "SegmentConfig",
    "SequenceFeatures",
    "baseline_head_config",
    "baseline_score_head",
    "baseline_vectors",
    "extract_aggregate_features",
    "extract_sequence_features",
    "ingest_gop",
    "normalized_source",
    "track_pitch",
    "write_toy_gop",
]
