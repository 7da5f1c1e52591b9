import csv
import io
import json
import math

import numpy as np
import pytest
from conftest import make_manifest
from hypothesis import given, settings
from hypothesis import strategies as st

from pronscore import evaluation
from pronscore.dataset import (
    DatasetManifest,
    ScoredUtterance,
    make_fixed_split,
    make_speaker_kfold,
)
from pronscore.encoder import LayerSelection
from pronscore.evaluation import (
    CSV_COLUMNS,
    CURVE_COLUMNS,
    AblationGrid,
    EvalReport,
    MethodSpec,
    ReportEntry,
    UndefinedCorrelationError,
    emit_report,
    pearson,
    render_report,
    run_experiment,
    run_head_ablation,
    run_layer_ablation,
    write_curve,
)
from pronscore.scorer import TrainRunConfig
from pronscore.synthetic import (
    PlantedStackConfig,
    planted_layer_stacks,
    synthetic_manifest,
)


def textbook_pearson(x, y):
    """Sum-of-products definition, in plain Python floats."""
    n = len(x)
    mx, my = math.fsum(x) / n, math.fsum(y) / n
    sxy = math.fsum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = math.fsum((a - mx) ** 2 for a in x)
    syy = math.fsum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


# ---------------------------------------------------------------- pearson


def test_pearson_examples():
    x = [0.3, 1.7, -2.0, 4.4]
    assert pearson(x, x) == 1.0
    assert pearson(x, [-v for v in x]) == -1.0
    assert pearson([1, 2, 3], [1, 2, 4]) == pytest.approx(9 / math.sqrt(84), abs=1e-15)
    assert 9 / math.sqrt(84) == pytest.approx(0.98198, abs=1e-5)


def test_pearson_matches_textbook_oracle():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(2, 501))
        x, y = rng.normal(size=n), rng.normal(size=n)
        if rng.random() < 0.5:
            y = y + rng.uniform(-2, 2) * x
        assert abs(pearson(x, y) - textbook_pearson(x.tolist(), y.tolist())) <= 1e-12


def test_pearson_errors():
    with pytest.raises(UndefinedCorrelationError):
        pearson([1, 2, 3], [2, 2, 2])
    with pytest.raises(UndefinedCorrelationError):
        pearson([5, 5], [1, 2])
    with pytest.raises(ValueError):
        pearson([1], [1])
    with pytest.raises(ValueError):
        pearson([1, 2], [1, 2, 3])


vectors = st.integers(3, 50).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(0, 2**31))
)


@settings(max_examples=200, deadline=None)
@given(nv=vectors, a=st.floats(0.01, 100), b=st.floats(-100, 100))
def test_pearson_affine_invariance(nv, a, b):
    n, seed = nv
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=n)
    r = pearson(x, y)
    assert abs(pearson(a * x + b, y) - r) <= 1e-9
    assert abs(pearson(x, a * y + b) - r) <= 1e-9
    assert abs(pearson(-a * x + b, y) + r) <= 1e-9


# ---------------------------------------------------------------- reports


def entry(**kw):
    base = dict(dataset="kesl", dimension="holistic", method="m", head="blstm", layer_selection="uniform_average",
                fold_pcc={0: 0.5, 1: 0.7}, pooled_pcc=0.61, mean_fold_pcc=0.6, n_utterances=20)
    return ReportEntry(**{**base, **kw})


def test_report_entry_range_checked():
    with pytest.raises(ValueError):
        entry(pooled_pcc=1.2)
    with pytest.raises(ValueError):
        entry(fold_pcc={0: -1.5})


def test_empty_report_csv_is_header_only():
    text = render_report(EvalReport(), "csv")
    assert text == ",".join(CSV_COLUMNS) + "\n"


def test_one_entry_one_row():
    rows = list(csv.DictReader(io.StringIO(render_report(EvalReport([entry()]), "csv"))))
    assert len(rows) == 1
    assert rows[0]["pooled_pcc"] == "0.61" and rows[0]["fold_pccs"] == "0:0.5;1:0.7"
    assert rows[0]["n_folds"] == "2" and rows[0]["n_failed_folds"] == "0"


def test_json_round_trip_identity(tmp_path):
    report = EvalReport([entry(), entry(dimension="fluency", fold_pcc={0: None}, pooled_pcc=None,
                                        mean_fold_pcc=None, failed_folds=[1])],
                        {"config_hash": "abc", "seeds": [0, 1]}, {"created": "2024-01-01T00:00:00"})
    first = emit_report(report, "json", tmp_path / "a.json")
    loaded = EvalReport.load(first)
    assert loaded == report
    second = emit_report(loaded, "json", tmp_path / "b.json")
    assert first.read_bytes() == second.read_bytes()
    assert loaded.has_failures


def test_table_text_layout():
    report = EvalReport([entry(), entry(dimension="fluency", dataset="so762", pooled_pcc=0.78),
                         entry(method="agg+seq", head="mlp", layer_selection="-", pooled_pcc=None)])
    lines = render_report(report, "table_text").splitlines()
    assert lines[0].split("|")[1].strip() == "kesl" and lines[0].split("|")[2].strip() == "so762"
    assert "Holistic" in lines[1] and "Fluency" in lines[1]
    assert lines[3].startswith("m [uniform_average] (blstm)")
    assert "0.61" in lines[3] and "0.78" in lines[3]
    assert lines[4].startswith("agg+seq (mlp)") and "-" in lines[4].split("|")[1]


def test_body_excludes_timestamps():
    a = EvalReport([entry()], {"x": 1}, {"created": "t1"})
    b = EvalReport([entry()], {"x": 1}, {"created": "t2"})
    assert a.body_json() == b.body_json()
    with pytest.raises(ValueError):
        render_report(a, "xml")


def test_method_and_grid_validation():
    with pytest.raises(ValueError):
        MethodSpec("x", "wav2vec")
    with pytest.raises(ValueError):
        MethodSpec("x", "baseline")
    with pytest.raises(ValueError):
        MethodSpec("x", "ssl_pretrained")
    with pytest.raises(ValueError):
        AblationGrid("layer", ())
    with pytest.raises(ValueError):
        AblationGrid("epochs", (1,))
    labels = [s.label() for s in AblationGrid.all_layers(2).points]
    assert labels == ["single_layer:0", "single_layer:1", "single_layer:2", "uniform_average"]


def test_curve_file(tmp_path):
    path = write_curve([{"layer_index": "0", "dimension": "holistic", "pcc": 0.25, "fold_count": 1}],
                       tmp_path / "c.csv")
    assert path.read_text().splitlines() == [",".join(CURVE_COLUMNS), "0,holistic,0.25,1"]


# ---------------------------------------------------------------- experiments


FAST = TrainRunConfig(learning_rate=3e-3, max_epochs=40, early_stopping_patience=5, seed=0)


def separable_vectors(manifest, dims, seed=0):
    rng = np.random.default_rng(seed)
    return {u.utterance_id: np.array([u.normalized_score(d) for d in dims] + [0.0]) + 0.05 * rng.normal(size=len(dims) + 1)
            for u in manifest}


def two_dim_manifest(n_speakers=8, per=5, seed=0):
    rng = np.random.default_rng(seed)
    utts = tuple(
        ScoredUtterance(f"s{s}u{u}", f"/none/s{s}u{u}.wav", "A B", f"s{s}",
                        {"fluency": float(rng.uniform(0, 10)), "prosodic": float(rng.uniform(0, 10))},
                        {"fluency": (0.0, 10.0), "prosodic": (0.0, 10.0)})
        for s in range(n_speakers) for u in range(per))
    return DatasetManifest("toy", utts)


def test_single_fold_lr_plumbing(tmp_path):
    m = two_dim_manifest()
    plan = make_fixed_split(m, 0.6, seed=0, validation_fraction=0.25)
    method = MethodSpec("toy", "baseline", head="lr", feature_sets=("gop",))
    report = run_experiment(m, plan, method, ["fluency", "prosodic"], tmp_path,
                            features=separable_vectors(m, ["fluency", "prosodic"]), config_hash="h",
                            run=TrainRunConfig(learning_rate=3e-2, max_epochs=100, early_stopping_patience=10))
    assert [e.dimension for e in report.entries] == ["fluency", "prosodic"]
    for e in report.entries:
        assert list(e.fold_pcc) == [0] and e.pooled_pcc == e.fold_pcc[0] == e.mean_fold_pcc
        assert e.pooled_pcc > 0.9
        assert e.n_utterances == len(plan.folds[0].test_ids)
    assert report.metadata["config_hash"] == "h"
    assert report.metadata["fold_seeds"] == [0]
    assert "created" in report.timestamps


def test_rerun_is_byte_identical(tmp_path):
    m = make_manifest([4] * 6, seed=1)
    plan = make_speaker_kfold(m, 3, 0.2, seed=0)
    method = MethodSpec("toy", "baseline", head="mlp", feature_sets=("agg",))
    feats = separable_vectors(m, ["holistic"])
    a = run_experiment(m, plan, method, ["holistic"], tmp_path / "a", features=feats, run=FAST)
    b = run_experiment(m, plan, method, ["holistic"], tmp_path / "b", features=feats, run=FAST)
    assert a.body_json() == b.body_json()
    assert len(a.entries[0].fold_pcc) == 3
    assert a.entries[0].n_utterances == len(m)


def test_resume_reuses_finished_folds(tmp_path, monkeypatch):
    m = make_manifest([4] * 6, seed=2)
    plan = make_speaker_kfold(m, 3, 0.2, seed=0)
    method = MethodSpec("toy", "baseline", head="lr", feature_sets=("agg",))
    feats = separable_vectors(m, ["holistic"])
    first = run_experiment(m, plan, method, ["holistic"], tmp_path, features=feats, run=FAST)

    def refuse(*a, **k):
        raise AssertionError("fold retrained")

    monkeypatch.setattr(evaluation, "train_scorer", refuse)
    again = run_experiment(m, plan, method, ["holistic"], tmp_path, features=feats, run=FAST)
    assert again.body_json() == first.body_json()
    # a changed training config invalidates the cache
    changed = run_experiment(m, plan, method, ["holistic"], tmp_path, features=feats,
                             run=TrainRunConfig(learning_rate=1e-3, max_epochs=5))
    assert changed.entries[0].failed_folds == [0, 1, 2]


def test_failed_fold_is_marked(tmp_path, monkeypatch):
    m = make_manifest([4] * 6, seed=3)
    plan = make_speaker_kfold(m, 3, 0.2, seed=0)
    method = MethodSpec("toy", "baseline", head="lr", feature_sets=("agg",))
    real = evaluation.train_scorer
    calls = {"n": 0}

    def flaky(*a, **k):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("out of memory")
        return real(*a, **k)

    monkeypatch.setattr(evaluation, "train_scorer", flaky)
    report = run_experiment(m, plan, method, ["holistic"], tmp_path, features=separable_vectors(m, ["holistic"]),
                            run=FAST)
    e = report.entries[0]
    assert e.failed_folds == [1] and sorted(e.fold_pcc) == [0, 2]
    assert report.has_failures
    assert e.n_utterances == len(plan.folds[0].test_ids) + len(plan.folds[2].test_ids)


def planted(tmp_path, num_layers, k, seed=0):
    m = synthetic_manifest(12, 10, seed=seed)
    archive = planted_layer_stacks(m, k, "holistic", tmp_path / "stacks",
                                   PlantedStackConfig(num_layers=num_layers), seed=seed)
    plan = make_fixed_split(m, 0.7, seed=seed, validation_fraction=0.2)
    return m, archive, plan


def test_single_layer_encoder_curve_length(tmp_path):
    m, archive, plan = planted(tmp_path, 1, 1)
    report, curve = run_layer_ablation(m, plan, archive, ["holistic"], tmp_path / "out", head="mlp", run=FAST)
    assert [r["layer_index"] for r in curve] == ["0", "1", "avg"]
    assert len(report.entries) == 3
    assert report.metadata["ablation"]["points"] == ["single_layer:0", "single_layer:1", "uniform_average"]


def test_layer_ablation_peaks_at_planted_layer(tmp_path):
    m, archive, plan = planted(tmp_path, 4, 3, seed=5)
    _, curve = run_layer_ablation(m, plan, archive, ["holistic"], tmp_path / "out", head="mlp", run=FAST)
    assert len(curve) == 4 + 2
    singles = [r for r in curve if r["layer_index"] != "avg"]
    assert max(singles, key=lambda r: r["pcc"])["layer_index"] == "3"


def test_layer_ablation_needs_stack_archive(tmp_path):
    from pronscore.archive import FeatureArchive

    m = synthetic_manifest(4, 2)
    matrix = FeatureArchive.open_or_create(tmp_path / "a", {"x": 1}, "matrix")
    with pytest.raises(ValueError, match="stack"):
        run_layer_ablation(m, make_fixed_split(m, 0.5), matrix, ["holistic"], tmp_path / "o")
    method = MethodSpec("x", "ssl_finetuned", selection=LayerSelection.parse("learnable"))
    report = run_experiment(m, make_fixed_split(m, 0.5, validation_fraction=0.3), method, ["holistic"],
                            tmp_path / "o", features=matrix, run=FAST)
    assert report.entries[0].failed_folds == [0]


def test_head_ablation_and_learnable(tmp_path):
    m, archive, plan = planted(tmp_path, 3, 2, seed=1)
    report = run_head_ablation(m, plan, archive, LayerSelection.uniform(), ["holistic"], tmp_path / "out",
                               run=FAST, scorer_overrides={"blstm_hidden": 8, "char_embedding_dim": 4})
    assert [e.head for e in report.entries] == ["lr", "mlp", "blstm"]
    assert all(e.pooled_pcc is not None and -1 <= e.pooled_pcc <= 1 for e in report.entries)
    learn = MethodSpec("learn", "ssl_finetuned", head="mlp", selection=LayerSelection.parse("learnable"))
    r = run_experiment(m, plan, learn, ["holistic"], tmp_path / "out", features=archive, run=FAST)
    assert not r.has_failures and r.entries[0].layer_selection == "learnable"
    assert json.loads(render_report(r, "json"))["entries"][0]["method"] == "learn"
