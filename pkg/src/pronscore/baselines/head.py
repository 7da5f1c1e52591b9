"""Fold-local feature normalization, baseline feature tables and the baseline head."""

from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..dataset import DatasetManifest, read_waveform
from ..scorer import Scorer, ScorerConfig
from .acoustic import (
    AGGREGATE_NAMES,
    SUMMARY_NAMES,
    SegmentConfig,
    extract_aggregate_features,
    extract_sequence_features,
)
from .gop import GopTable

FEATURE_SETS = ("agg", "seq", "gop")
BASELINE_HIDDEN = 256


@dataclass(frozen=True)
class FeatureNormalizer:
    """Per-dimension standardization fitted on one split and reused on others."""

    mean: np.ndarray
    std: np.ndarray
    source_split: str
    n: int

    @classmethod
    def fit(cls, matrix: np.ndarray, source_split: str = "train") -> FeatureNormalizer:
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] == 0:
            raise ValueError("need a non-empty (n, F) matrix to fit normalization statistics")
        std = matrix.std(axis=0)
        # constant columns pass through centred rather than dividing by zero
        std = np.where(std > 0, std, 1.0)
        return cls(matrix.mean(axis=0), std, source_split, matrix.shape[0])

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def baseline_vectors(
    manifest: DatasetManifest,
    feature_sets: Sequence[str],
    gop: GopTable | None = None,
    segment_config: SegmentConfig = SegmentConfig(),
    load_audio: Callable[[Path], np.ndarray] = read_waveform,
) -> tuple[dict[str, np.ndarray], tuple[str, ...]]:
    """Concatenate the requested feature blocks into one pooled vector per utterance.

    Sequence features are pooled over segments by averaging. Utterances
    missing a GOP record are left out of the result.
    """
    unknown = set(feature_sets) - set(FEATURE_SETS)
    if unknown or not feature_sets:
        raise ValueError(f"feature sets must be a non-empty subset of {FEATURE_SETS}, got {list(feature_sets)}")
    if "gop" in feature_sets and gop is None:
        raise ValueError("the gop feature set needs an ingested GOP table")
    names: list[str] = []
    for block in FEATURE_SETS:
        if block not in feature_sets:
            continue
        names += {"agg": [f"agg:{n}" for n in AGGREGATE_NAMES],
                  "seq": [f"seq:{n}" for n in SUMMARY_NAMES],
                  "gop": [f"gop:{n}" for n in (gop.names if gop is not None else ())]}[block]
    out = {}
    for utt in manifest:
        if "gop" in feature_sets and utt.utterance_id not in gop:
            continue
        audio = load_audio(utt.audio_path) if {"agg", "seq"} & set(feature_sets) else None
        blocks = []
        if "agg" in feature_sets:
            blocks.append(extract_aggregate_features(audio, utt.transcript, segment_config, utt.utterance_id).values)
        if "seq" in feature_sets:
            blocks.append(extract_sequence_features(audio, segment_config, utt.utterance_id).values.mean(axis=0))
        if "gop" in feature_sets:
            blocks.append(gop[utt.utterance_id].values)
        out[utt.utterance_id] = np.concatenate(blocks)
    return out, tuple(names)


def normalized_source(
    vectors: Mapping[str, np.ndarray], train_ids: Sequence[str]
) -> tuple[Callable[[str], np.ndarray], FeatureNormalizer]:
    """Feature source yielding 1 x F normalized rows, statistics from ``train_ids`` only."""
    norm = FeatureNormalizer.fit(np.stack([vectors[i] for i in train_ids if i in vectors]), "train")

    def source(uid: str) -> np.ndarray:
        return norm.transform(vectors[uid])[None, :]

    return source, norm


def baseline_head_config(width: int, target_dimension: str) -> ScorerConfig:
    """Two linear layers (256 units, then 1) over the pooled baseline vector."""
    return ScorerConfig(head="mlp", audio_dim=width, mlp_hidden=BASELINE_HIDDEN, target_dimension=target_dimension)


def baseline_score_head(features: np.ndarray, scorer: Scorer) -> float:
    features = np.asarray(features)
    if features.ndim == 1:
        features = features[None, :]
    return scorer.predict(features, "")
