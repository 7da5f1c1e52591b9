"""Acceptance criteria 1-9, each at its stated tolerance and runtime budget.

A summary line per criterion is printed at the end of the pytest run.
Criterion 8 needs the public Speechocean762 corpus and a pretrained
checkpoint; set ``PRONSCORE_SO762_ROOT`` (and optionally
``PRONSCORE_SO762_CHECKPOINT``) to run it.
"""

import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import make_manifest
from hypothesis import given, settings
from hypothesis import strategies as st
from test_dataset import check_speaker_kfold
from test_evaluation import textbook_pearson
from test_finetune import run_overfit
from test_scorer import gradient_errors, tiny_scorer

from pronscore.archive import extract_corpus
from pronscore.config import load_config
from pronscore.dataset import make_fixed_split, make_speaker_kfold
from pronscore.encoder import LayerSelection, LayerStack, aggregate, load_backend
from pronscore.evaluation import (
    EvalReport,
    MethodSpec,
    pearson,
    run_experiment,
    run_layer_ablation,
)
from pronscore.finetune import greedy_decode
from pronscore.scorer import TrainRunConfig
from pronscore.synthetic import (
    PlantedStackConfig,
    SyntheticCorpusConfig,
    load_synthetic_corpus,
    planted_layer_stacks,
    synthetic_manifest,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

REPO = Path(__file__).resolve().parents[1]


class Budget:
    def __init__(self, seconds: float):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f} s, budget {self.seconds} s"


# ---------------------------------------------------------------- 1


@settings(max_examples=300, deadline=None, derandomize=True)
@given(n=st.integers(3, 200), seed=st.integers(0, 2**31), a=st.floats(0.01, 1e3), b=st.floats(-1e3, 1e3))
def affine_property(n, seed, a, b):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=n)
    r = pearson(x, y)
    assert abs(pearson(a * x + b, y) - r) <= 1e-9
    assert abs(pearson(x, a * y + b) - r) <= 1e-9
    assert abs(pearson(-a * x + b, y) + r) <= 1e-9


def test_criterion_1_metric_oracle():
    with Budget(5):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            n = int(rng.integers(2, 501))
            x = rng.normal(size=n)
            y = rng.uniform(-1, 1) * x + rng.normal(size=n)
            assert abs(pearson(x, y) - textbook_pearson(x.tolist(), y.tolist())) <= 1e-12
        affine_property()


# ---------------------------------------------------------------- 2


def test_criterion_2_split_integrity():
    with Budget(10):
        rng = np.random.default_rng(7)
        for i in range(200):
            k = int(rng.integers(2, 11))
            sizes = rng.integers(1, 6, size=int(rng.integers(k, 40))).tolist()
            m = make_manifest(sizes, seed=i)
            plan = make_speaker_kfold(m, k, float(rng.uniform(0.05, 0.5)), seed=i)
            check_speaker_kfold(m, plan)


# ---------------------------------------------------------------- 3


def test_criterion_3_gradient_check():
    with Budget(30):
        scorer = tiny_scorer("blstm", D=4, H=3, seed=11)
        x = np.random.default_rng(11).normal(size=(5, 4))
        errors = gradient_errors(scorer, x, "ABCD EFG", 0.7)
        assert max(errors.values()) < 1e-4, errors


# ---------------------------------------------------------------- 4


stacks = st.builds(
    lambda L, T, D, seed: LayerStack(
        "u", np.random.default_rng(seed).normal(size=(T, 3)),
        tuple(np.random.default_rng(seed + j + 1).normal(size=(T, D)) for j in range(L))),
    st.integers(1, 8), st.integers(1, 10), st.integers(1, 6), st.integers(0, 2**31),
)


@settings(max_examples=200, deadline=None, derandomize=True)
@given(stack=stacks, alpha=st.floats(-10, 10), data=st.data())
def aggregation_algebra(stack, alpha, data):
    L = stack.num_layers
    uniform = aggregate(stack, LayerSelection.uniform())
    np.testing.assert_allclose(uniform, aggregate(stack, LayerSelection.weighted([1.0 / L] * L)), rtol=0, atol=1e-9)
    k = data.draw(st.integers(1, L))
    np.testing.assert_array_equal(aggregate(stack, LayerSelection.single(k)), stack.layer_states[k - 1])
    np.testing.assert_array_equal(aggregate(stack, LayerSelection.single(0)), stack.conv_features)
    np.testing.assert_allclose(aggregate(stack.scaled(alpha), LayerSelection.uniform()), alpha * uniform, atol=1e-9)
    other = LayerStack("u", stack.conv_features, tuple(s[::-1] for s in stack.layer_states))
    summed = LayerStack("u", stack.conv_features, tuple(a + b for a, b in zip(stack.layer_states, other.layer_states)))
    np.testing.assert_allclose(aggregate(summed, LayerSelection.uniform()),
                               uniform + aggregate(other, LayerSelection.uniform()), atol=1e-9)


def test_criterion_4_aggregation_algebra():
    with Budget(5):
        aggregation_algebra()


# ---------------------------------------------------------------- 5


@settings(max_examples=100, deadline=None, derandomize=True)
@given(st.lists(st.integers(1, 9), max_size=30))
def decode_round_trip(raw):
    labels = [x for i, x in enumerate(raw) if i == 0 or x != raw[i - 1]]
    assert greedy_decode(labels, blank=0) == labels
    assert greedy_decode([y for x in labels for y in (0, x, x)], blank=0) == labels


def test_criterion_5_ctc_wiring(tmp_path):
    with Budget(600):
        _, encoder, conv_before, result = run_overfit(tmp_path)
        assert len(result.losses) <= 200
        reduction = 1.0 - result.losses[-1] / result.losses[0]
        assert reduction >= 0.9, f"CTC loss fell by only {reduction:.1%}"
        decode_round_trip()


# ---------------------------------------------------------------- 6


def synthetic_pipeline(root: Path) -> EvalReport:
    manifest = load_synthetic_corpus(root / "corpus", SyntheticCorpusConfig(num_speakers=20, utterances_per_speaker=10))
    archive = extract_corpus(manifest, load_backend("stub"), LayerSelection.uniform(), root / "features").archive
    plan = make_fixed_split(manifest, 0.7, seed=0, validation_fraction=0.2, use_canonical=False)
    method = MethodSpec("stub encoder", "ssl_pretrained", head="blstm", selection=LayerSelection.uniform())
    run = TrainRunConfig(learning_rate=3e-3, early_stopping_patience=10, max_epochs=150, seed=0)
    return run_experiment(manifest, plan, method, ["holistic"], root / "out", features=archive, run=run,
                          scorer_overrides={"blstm_hidden": 16, "char_embedding_dim": 8})


def test_criterion_6_synthetic_end_to_end(tmp_path):
    with Budget(300):
        first = synthetic_pipeline(tmp_path / "a")
        pcc = first.entries[0].pooled_pcc
        assert pcc is not None and pcc >= 0.9, f"held-out PCC {pcc}"
        second = synthetic_pipeline(tmp_path / "b")
        assert first.body_json() == second.body_json()


# ---------------------------------------------------------------- 7


def test_criterion_7_layer_ablation_oracle(tmp_path):
    config = PlantedStackConfig(num_layers=6)
    run = TrainRunConfig(learning_rate=3e-3, early_stopping_patience=5, max_epochs=40, seed=0)
    ks = np.random.default_rng(99).choice(np.arange(1, config.num_layers + 1), size=5, replace=False)
    with Budget(300):
        for trial, k in enumerate(ks.tolist()):
            manifest = synthetic_manifest(12, 10, seed=trial)
            archive = planted_layer_stacks(manifest, k, "holistic", tmp_path / f"stacks{trial}", config, seed=trial)
            plan = make_fixed_split(manifest, 0.7, seed=trial, validation_fraction=0.2)
            _, curve = run_layer_ablation(manifest, plan, archive, ["holistic"], tmp_path / f"out{trial}",
                                          head="mlp", run=run)
            assert len(curve) == config.num_layers + 2
            singles = [r for r in curve if r["layer_index"] != "avg"]
            best = max(singles, key=lambda r: r["pcc"])
            assert best["layer_index"] == str(k), f"planted layer {k}, curve peaked at {best['layer_index']}"


# ---------------------------------------------------------------- 8


@pytest.mark.corpus
@pytest.mark.skipif("PRONSCORE_SO762_ROOT" not in os.environ,
                    reason="set PRONSCORE_SO762_ROOT to the Speechocean762 corpus to run this check")
def test_criterion_8_speechocean762_smoke(tmp_path):
    from pronscore.cli import main

    checkpoint = os.environ.get("PRONSCORE_SO762_CHECKPOINT", "facebook/hubert-base-ls960")
    cfg = tmp_path / "so762.toml"
    cfg.write_text(f"""
[run]
out_dir = "{tmp_path / 'out'}"

[dataset]
format = "speechocean762"
path = "{os.environ['PRONSCORE_SO762_ROOT']}"
dimensions = ["fluency", "prosodic"]
limit = 50

[split]
strategy = "fixed"
use_canonical = false
train_fraction = 0.6
validation_fraction = 0.2

[encoder]
backend = "hf"
checkpoint = "{checkpoint}"
layer_selection = "uniform_average"

[train]
max_epochs = 10
""")
    with Budget(1200):
        for verb in ("ingest", "extract", "train-scorer", "evaluate"):
            assert main([verb, str(cfg)]) == 0, verb
    report = EvalReport.load(tmp_path / "out" / "report.json")
    assert {e.dimension for e in report.entries} == {"fluency", "prosodic"}
    for e in report.entries:
        assert e.pooled_pcc is not None and np.isfinite(e.pooled_pcc)


# ---------------------------------------------------------------- 9


def test_criterion_9_full_scale_configs():
    with Budget(30):
        docs = (REPO / "docs" / "full_scale_targets.md").read_text()
        paths = sorted((REPO / "configs" / "full_scale").glob("*.toml"))
        assert paths
        for path in paths:
            load_config(path, environ={})
            raw = tomllib.loads(path.read_text())
            rows = [line for line in docs.splitlines() if f"`{path.name}`" in line]
            assert len(rows) == 1, f"{path.name} should have one row in the targets table"
            if path.name.startswith("finetune_"):
                continue
            reference = raw["experiment"]["reference"]
            assert set(reference) == set(raw["dataset"]["dimensions"])
            for dim, value in reference.items():
                assert f"{dim} {value:.2f}" in rows[0], (path.name, dim)
