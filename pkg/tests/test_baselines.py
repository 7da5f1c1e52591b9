import json
import logging

import numpy as np
import pytest
import torch
from conftest import make_manifest, tone, write_jsonl_corpus
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from pronscore.baselines import (
    AGGREGATE_NAMES,
    LLD_NAMES,
    SUMMARY_NAMES,
    FeatureNormalizer,
    GopValidationError,
    baseline_head_config,
    baseline_score_head,
    baseline_vectors,
    extract_aggregate_features,
    extract_sequence_features,
    ingest_gop,
    normalized_source,
    track_pitch,
    write_toy_gop,
)
from pronscore.dataset import SAMPLE_RATE, load_manifest
from pronscore.scorer import Scorer, ScorerError

LLD = {n: i for i, n in enumerate(LLD_NAMES)}


def summary(seq, name, stat="mean"):
    return seq.values[:, SUMMARY_NAMES.index(f"{name}_{stat}")]


# ---------------------------------------------------------------- descriptor inventory


def test_inventory_sizes():
    assert len(LLD_NAMES) == 23 and len(SUMMARY_NAMES) == 46
    assert len(AGGREGATE_NAMES) == 12
    seq = extract_sequence_features(tone(2.0, 220))
    assert seq.values.shape == (2, 46)


def test_pure_sine_pitch_and_jitter():
    seq = extract_sequence_features(tone(1.0, 440.0, amp=0.5))
    assert abs(summary(seq, "f0_hz")[0] - 440.0) <= 2.0
    assert summary(seq, "jitter_local")[0] < 1e-3
    f0, _ = track_pitch(tone(1.0, 440.0, amp=0.5))
    voiced = f0[f0 > 0]
    assert len(voiced) > 0.8 * len(f0)
    assert np.all(np.abs(voiced - 440.0) <= 2.0)


def test_silence_floor_and_unvoiced():
    silence = np.zeros(SAMPLE_RATE)
    seq = extract_sequence_features(silence)
    assert np.all(seq.values == 0.0)
    f0, _ = track_pitch(silence)
    assert np.all(f0 == 0)
    agg = extract_aggregate_features(silence, "one two").as_dict()
    assert agg["phonation_ratio"] == 0.0 and agg["phonation_time_s"] == 0.0


def test_sequence_features_deterministic():
    x = tone(1.5, 180) + 0.01 * np.random.default_rng(0).normal(size=int(1.5 * SAMPLE_RATE))
    np.testing.assert_array_equal(extract_sequence_features(x).values, extract_sequence_features(x).values)


def test_short_audio_single_segment_warning(caplog):
    with caplog.at_level(logging.WARNING):
        seq = extract_sequence_features(tone(0.3), utterance_id="tiny")
    assert seq.values.shape[0] == 1
    assert "tiny" in caplog.text


def test_segment_shift_covariance():
    rng = np.random.default_rng(1)
    seg = [tone(1.0, f) * a for f, a in ((150, 0.3), (260, 0.5), (200, 0.2))]
    base = np.concatenate(seg[1:]) + 0.01 * rng.normal(size=2 * SAMPLE_RATE)
    shifted = np.concatenate([seg[0], base])
    a = extract_sequence_features(base).values
    b = extract_sequence_features(shifted).values
    np.testing.assert_allclose(b[1:], a, rtol=1e-9, atol=1e-9)


# ---------------------------------------------------------------- aggregates


def test_speaking_rate_without_pauses():
    agg = extract_aggregate_features(tone(2.0, 200, amp=0.3), "one two three four")
    assert agg.as_dict()["speaking_rate_wps"] == pytest.approx(2.0, abs=1e-9)
    assert agg.as_dict()["num_pauses"] == 0.0
    assert np.isfinite(agg.values).all()


def test_pause_detection():
    x = np.concatenate([tone(0.5, 200, 0.3), np.zeros(int(0.4 * SAMPLE_RATE)), tone(0.5, 200, 0.3)])
    agg = extract_aggregate_features(x, "a b").as_dict()
    assert agg["num_pauses"] == 1.0
    assert agg["mean_pause_s"] == pytest.approx(0.4, abs=0.03)
    assert agg["phonation_time_s"] == pytest.approx(1.0, abs=0.03)


def test_empty_transcript_marks_rates_missing():
    agg = extract_aggregate_features(tone(1.0), "")
    assert {"speaking_rate_wps", "overall_rate_wps"} <= agg.missing
    assert np.isfinite(agg.values).all()


def test_aggregates_deterministic():
    x = tone(1.2, 170)
    np.testing.assert_array_equal(extract_aggregate_features(x, "a b").values,
                                  extract_aggregate_features(x, "a b").values)


# ---------------------------------------------------------------- GOP


def write_gop(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_gop_full_coverage(tmp_path):
    m = make_manifest([2, 2])
    t = ingest_gop(write_toy_gop(m, tmp_path / "g.jsonl", "holistic"), m)
    assert len(t) == 4 and t.coverage == 1.0 and not t.uncovered
    assert t.names == ("gop_mean", "gop_std", "gop_min", "gop_frac_below_minus1", "num_phones")


def test_gop_empty_file(tmp_path):
    m = make_manifest([2])
    t = ingest_gop(write_gop(tmp_path / "g.jsonl", []), m)
    assert len(t) == 0 and t.coverage == 0.0 and t.uncovered == m.ids


def test_gop_nan_names_utterance(tmp_path):
    m = make_manifest([2])
    rows = [{"utterance_id": m.ids[0], "features": {"g": 1.0}}, {"utterance_id": m.ids[1], "features": {"g": "NaN"}}]
    with pytest.raises(GopValidationError, match=m.ids[1]):
        ingest_gop(write_gop(tmp_path / "g.jsonl", rows), m)


def test_gop_unknown_ids_skipped(tmp_path, caplog):
    m = make_manifest([2])
    rows = [{"utterance_id": m.ids[0], "features": {"g": 1.0}}, {"utterance_id": "ghost", "features": {"g": 2.0}}]
    with caplog.at_level(logging.WARNING):
        t = ingest_gop(write_gop(tmp_path / "g.jsonl", rows), m)
    assert list(t) == [m.ids[0]] and t.unknown == ["ghost"] and t.uncovered == [m.ids[1]]
    assert "not in the manifest" in caplog.text


def test_gop_inconsistent_names(tmp_path):
    m = make_manifest([2])
    rows = [{"utterance_id": m.ids[0], "features": {"a": 1.0}}, {"utterance_id": m.ids[1], "features": {"b": 1.0}}]
    with pytest.raises(GopValidationError):
        ingest_gop(write_gop(tmp_path / "g.jsonl", rows), m)


# ---------------------------------------------------------------- normalization and head


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 40), f=st.integers(1, 8), seed=st.integers(0, 2**31))
def test_normalizer_train_statistics(n, f, seed):
    rng = np.random.default_rng(seed)
    train = rng.normal(3.0, 5.0, size=(n, f))
    norm = FeatureNormalizer.fit(train)
    z = norm.transform(train)
    assert norm.source_split == "train" and norm.n == n
    assert np.all(np.abs(z.mean(axis=0)) < 1e-9)
    assert np.all(np.abs(z.std(axis=0) - 1.0) < 1e-6)


def test_normalized_source_uses_train_only():
    rng = np.random.default_rng(0)
    vectors = {f"u{i}": rng.normal(size=3) + (100.0 if i >= 6 else 0.0) for i in range(10)}
    train = [f"u{i}" for i in range(6)]
    source, norm = normalized_source(vectors, train)
    np.testing.assert_allclose(norm.mean, np.mean([vectors[u] for u in train], axis=0))
    assert source("u0").shape == (1, 3)
    assert np.all(source("u9") > 10)  # test rows are not re-centred


def test_constant_column_passes_through():
    norm = FeatureNormalizer.fit(np.array([[1.0, 2.0], [1.0, 4.0]]))
    assert np.isfinite(norm.transform(np.array([1.0, 3.0]))).all()


def test_baseline_head_zero_weights():
    torch.manual_seed(0)
    scorer = Scorer(baseline_head_config(5, "holistic"), (1.0, 5.0))
    assert scorer.config.mlp_hidden == 256
    last = [m for m in scorer.head.modules() if isinstance(m, nn.Linear)][-1]
    nn.init.zeros_(last.weight)
    nn.init.zeros_(last.bias)
    assert scorer.forward_normalized(np.ones((1, 5)), "") == 0.0
    assert baseline_score_head(np.ones(5), scorer) == 1.0
    with pytest.raises(ScorerError):
        baseline_score_head(np.ones(6), scorer)


def test_baseline_vectors_concatenate_blocks(tmp_path):
    records, waves = [], {}
    for i in range(3):
        uid = f"u{i}"
        records.append({"utterance_id": uid, "audio": f"wav/{uid}.wav", "speaker": f"s{i}", "transcript": "A B C",
                        "scores": {"holistic": 2.0 + i}, "score_scale": {"holistic": [1, 5]}})
        waves[uid] = tone(1.0 + 0.3 * i, 150 + 40 * i, 0.3)
    m = load_manifest(write_jsonl_corpus(tmp_path, records, waves))
    gop = ingest_gop(write_toy_gop(m, tmp_path / "gop.jsonl"), m)
    vectors, names = baseline_vectors(m, ["agg", "seq", "gop"], gop)
    assert len(names) == 12 + 46 + 5
    assert all(v.shape == (63,) for v in vectors.values())
    agg_only, _ = baseline_vectors(m, ["agg"])
    np.testing.assert_array_equal(vectors["u1"][:12], agg_only["u1"])
    with pytest.raises(ValueError):
        baseline_vectors(m, ["gop"])
    with pytest.raises(ValueError):
        baseline_vectors(m, ["mfcc"])
