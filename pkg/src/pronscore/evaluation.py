"""Pearson correlation, cross-validated experiments, ablations and report files.

Fold aggregation: each utterance is tested in exactly one fold, so the
headline number is the PCC over the pooled test predictions of all folds.
The mean of per-fold PCCs is recorded next to it.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import re
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .archive import FeatureArchive
from .baselines.head import baseline_head_config, normalized_source
from .dataset import DatasetManifest, SplitPlan
from .encoder import LayerSelection
from .scorer import (
    ScorerConfig,
    TrainRunConfig,
    build_char_vocabulary,
    predict_batch,
    train_scorer,
)

logger = logging.getLogger(__name__)

METHOD_KINDS = ("ssl_pretrained", "ssl_finetuned", "baseline")
CSV_COLUMNS = (
    "dataset",
    "dimension",
    "method",
    "head",
    "layer_selection",
    "pooled_pcc",
    "mean_fold_pcc",
    "n_folds",
    "n_failed_folds",
    "n_utterances",
    "fold_pccs",
)
CURVE_COLUMNS = ("layer_index", "dimension", "pcc", "fold_count")


class UndefinedCorrelationError(ValueError):
    """Pearson correlation requested for a constant input."""


def pearson(predictions: Sequence[float], labels: Sequence[float]) -> float:
    """Sample Pearson correlation coefficient."""
    x = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"need two equal-length vectors, got shapes {x.shape} and {y.shape}")
    if len(x) < 2:
        raise ValueError("need at least two points for a correlation")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise UndefinedCorrelationError("correlation is undefined when an input has zero variance")
    xc, yc = x - x.mean(), y - y.mean()
    r = float(np.dot(xc, yc) / math.sqrt(float(np.dot(xc, xc)) * float(np.dot(yc, yc))))
    return max(-1.0, min(1.0, r))


# --------------------------------------------------------------------------- report


@dataclass
class ReportEntry:
    dataset: str
    dimension: str
    method: str
    head: str
    layer_selection: str
    fold_pcc: dict[int, float | None]
    pooled_pcc: float | None
    mean_fold_pcc: float | None
    n_utterances: int
    failed_folds: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.fold_pcc = {int(k): v for k, v in self.fold_pcc.items()}
        for v in [*self.fold_pcc.values(), self.pooled_pcc, self.mean_fold_pcc]:
            if v is not None and not -1.0 <= v <= 1.0:
                raise ValueError(f"PCC {v} outside [-1, 1]")

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["fold_pcc"] = {str(k): v for k, v in sorted(self.fold_pcc.items())}
        return d


@dataclass
class EvalReport:
    entries: list[ReportEntry] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)
    timestamps: dict[str, str] = field(default_factory=dict)

    def body(self) -> dict[str, Any]:
        return {"entries": [e.to_json() for e in self.entries], "metadata": self.metadata}

    def body_json(self) -> str:
        """Serialization without timestamps; identical for identical runs."""
        return json.dumps(self.body(), indent=1, sort_keys=True)

    def to_json(self) -> dict[str, Any]:
        return {**self.body(), "timestamps": self.timestamps}

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> EvalReport:
        return cls([ReportEntry(**e) for e in data.get("entries", [])],
                   dict(data.get("metadata", {})), dict(data.get("timestamps", {})))

    @classmethod
    def load(cls, path: str | Path) -> EvalReport:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def merge(self, other: EvalReport) -> EvalReport:
        return EvalReport(self.entries + other.entries, {**self.metadata, **other.metadata},
                          {**self.timestamps, **other.timestamps})

    @property
    def has_failures(self) -> bool:
        return any(e.failed_folds for e in self.entries)


def _fmt(v: float | None) -> str:
    return "" if v is None else repr(float(v))


def render_report(report: EvalReport, format: str) -> str:
    if format == "json":
        return json.dumps(report.to_json(), indent=1, sort_keys=True) + "\n"
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for e in report.entries:
            folds = ";".join(f"{k}:{_fmt(v)}" for k, v in sorted(e.fold_pcc.items()))
            w.writerow([e.dataset, e.dimension, e.method, e.head, e.layer_selection, _fmt(e.pooled_pcc),
                        _fmt(e.mean_fold_pcc), len(e.fold_pcc), len(e.failed_folds), e.n_utterances, folds])
        return buf.getvalue()
    if format == "table_text":
        return _table_text(report)
    raise ValueError(f"unknown report format {format!r}")


def emit_report(report: EvalReport, format: str, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_report(report, format), encoding="utf-8")
    return path


def _table_text(report: EvalReport) -> str:
    """Methods as rows, (dataset, dimension) as columns, pooled PCC to two decimals."""
    columns = list(dict.fromkeys((e.dataset, e.dimension) for e in report.entries))
    rows = list(dict.fromkeys(_row_label(e) for e in report.entries))
    cell = {(_row_label(e), (e.dataset, e.dimension)): e.pooled_pcc for e in report.entries}
    width = max([len("Method"), *map(len, rows)])
    col_w = max([8, *(len(d) for d, _ in columns), *(len(m) for _, m in columns)])
    datasets = " | ".join(f"{d:^{col_w}}" for d, _ in columns)
    dims = " | ".join(f"{m.capitalize():^{col_w}}" for _, m in columns)
    lines = [f"{'Method':<{width}} | {datasets}", f"{'':<{width}} | {dims}",
             "-" * (width + 3 + len(dims))]
    for r in rows:
        vals = " | ".join(
            f"{('-' if cell.get((r, c)) is None else format(cell[(r, c)], '.2f')):^{col_w}}" for c in columns
        )
        lines.append(f"{r:<{width}} | {vals}")
    return "\n".join(lines) + "\n"


def _row_label(e: ReportEntry) -> str:
    label = e.method
    if e.layer_selection and e.layer_selection != "-":
        label += f" [{e.layer_selection}]"
    if e.head:
        label += f" ({e.head})"
    return label


# --------------------------------------------------------------------------- experiments


@dataclass(frozen=True)
class MethodSpec:
    name: str
    kind: str
    head: str = "blstm"
    selection: LayerSelection | None = None
    feature_sets: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}; expected one of {METHOD_KINDS}")
        if self.kind == "baseline" and not self.feature_sets:
            raise ValueError("baseline methods need feature_sets")
        if self.kind != "baseline" and self.selection is None:
            raise ValueError("SSL methods need a layer selection")

    def to_json(self) -> dict[str, Any]:
        return {"name": self.name, "kind": self.kind, "head": self.head,
                "selection": self.selection.label() if self.selection else None,
                "feature_sets": list(self.feature_sets)}


@dataclass(frozen=True)
class AblationGrid:
    axis: str  # "layer" | "head" | "feature_set"
    points: tuple

    def __post_init__(self):
        if self.axis not in ("layer", "head", "feature_set"):
            raise ValueError(f"unknown ablation axis {self.axis!r}")
        if not self.points:
            raise ValueError("ablation grid needs at least one point")

    @classmethod
    def all_layers(cls, num_layers: int) -> AblationGrid:
        """Conv features, every transformer layer, then the uniform average."""
        return cls("layer", tuple(LayerSelection.single(i) for i in range(num_layers + 1))
                   + (LayerSelection.uniform(),))


def stable_hash(obj: Any) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _slug(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text).strip("_") or "x"


def feature_source(method: MethodSpec, features, fold) -> Callable[[str], np.ndarray]:
    if method.kind == "baseline":
        source, _ = normalized_source(features, fold.train_ids)
        return source
    archive: FeatureArchive = features
    sel = method.selection
    if sel.learnable:
        if archive.store != "stack":
            raise ValueError("learnable layer weights need a stack archive")
        return lambda uid: np.stack(archive.read_stack(uid).layer_states)
    return lambda uid: archive.features(uid, sel if archive.store == "stack" else None)


def scorer_config_for(method: MethodSpec, source, manifest, fold, dim, overrides) -> ScorerConfig:
    sample = np.asarray(source(fold.train_ids[0]))
    if method.kind == "baseline":
        cfg = baseline_head_config(sample.shape[-1], dim)
        if method.head != "mlp":
            cfg = ScorerConfig(**{**asdict(cfg), "head": method.head})
        return cfg
    by_id = manifest.by_id()
    vocab = build_char_vocabulary(by_id[u].transcript for u in fold.train_ids)
    params = {"head": method.head, "audio_dim": sample.shape[-1], "vocabulary": vocab,
              "target_dimension": dim, "mix_layers": sample.shape[0] if sample.ndim == 3 else 0}
    params.update(overrides or {})
    return ScorerConfig(**params)


def run_experiment(
    manifest: DatasetManifest,
    split_plan: SplitPlan,
    method: MethodSpec,
    dimensions: Sequence[str],
    out_dir: str | Path,
    *,
    features,
    run: TrainRunConfig = TrainRunConfig(),
    scorer_overrides: Mapping[str, Any] | None = None,
    config_hash: str | None = None,
) -> EvalReport:
    """Train and test one method on every fold and score dimension.

    ``features`` is a :class:`FeatureArchive` for SSL methods or a mapping
    utterance_id -> pooled vector for baselines. Finished folds are cached
    under ``out_dir/folds`` and reused when the inputs match.
    """
    out_dir = Path(out_dir)
    labels_by_id = manifest.by_id()
    feature_id = features.spec_hash if isinstance(features, FeatureArchive) else stable_hash(
        {k: np.asarray(v).tolist() for k, v in sorted(features.items())})
    entries = []
    for dim in dimensions:
        fold_preds: dict[int, dict[str, float]] = {}
        failed: list[int] = []
        for i, fold in enumerate(split_plan.folds):
            fold_run = TrainRunConfig(**{**asdict(run), "seed": run.seed + i})
            fingerprint = stable_hash({
                "method": method.to_json(), "run": asdict(fold_run), "overrides": dict(scorer_overrides or {}),
                "fold": [fold.train_ids, fold.validation_ids, fold.test_ids], "dim": dim, "features": feature_id,
            })
            fold_dir = out_dir / "folds" / _slug(method.name) / _slug(method.to_json()["selection"] or "-") / method.head / dim
            cache = fold_dir / f"fold_{i}.json"
            if cache.exists():
                saved = json.loads(cache.read_text(encoding="utf-8"))
                if saved.get("fingerprint") == fingerprint:
                    fold_preds[i] = saved["predictions"]
                    continue
            try:
                source = feature_source(method, features, fold)
                cfg = scorer_config_for(method, source, manifest, fold, dim, scorer_overrides)
                fold_dir.mkdir(parents=True, exist_ok=True)
                log_path = fold_dir / f"fold_{i}.train_log.jsonl"
                log_path.unlink(missing_ok=True)
                result = train_scorer(source, manifest, fold, cfg, fold_run, log_path=log_path)
                test_utts = [labels_by_id[u] for u in fold.test_ids]
                preds = predict_batch(source, test_utts, result.scorer)
                fold_preds[i] = dict(sorted(preds.items()))
                cache.write_text(json.dumps({"fingerprint": fingerprint, "predictions": fold_preds[i],
                                             "best_epoch": result.best_epoch}, sort_keys=True), encoding="utf-8")
            except Exception as exc:  # the fold is marked failed; other folds proceed
                logger.error("fold %d (%s, %s) failed: %s", i, method.name, dim, exc)
                failed.append(i)
        entries.append(_entry(manifest.name, dim, method, fold_preds, failed, labels_by_id))
    meta = {
        "config_hash": config_hash,
        "dataset": manifest.name,
        "method": method.to_json(),
        "run": asdict(run),
        "scorer_overrides": dict(scorer_overrides or {}),
        "split": {"strategy": split_plan.strategy, "n_folds": len(split_plan.folds), "seed": split_plan.seed},
        "fold_seeds": [run.seed + i for i in range(len(split_plan.folds))],
        "aggregation": "pooled_pcc over concatenated test predictions of all folds; mean_fold_pcc alongside",
    }
    return EvalReport(entries, meta, {"created": time.strftime("%Y-%m-%dT%H:%M:%S%z")})


def _safe_pearson(pred, gold) -> float | None:
    try:
        return pearson(pred, gold)
    except (UndefinedCorrelationError, ValueError) as exc:
        logger.warning("PCC undefined: %s", exc)
        return None


def _entry(dataset, dim, method, fold_preds, failed, by_id) -> ReportEntry:
    fold_pcc: dict[int, float | None] = {}
    pooled_p, pooled_y = [], []
    for i, preds in sorted(fold_preds.items()):
        ids = sorted(preds)
        p = [preds[u] for u in ids]
        y = [by_id[u].scores[dim] for u in ids]
        fold_pcc[i] = _safe_pearson(p, y)
        pooled_p += p
        pooled_y += y
    defined = [v for v in fold_pcc.values() if v is not None]
    return ReportEntry(
        dataset=dataset,
        dimension=dim,
        method=method.name,
        head=method.head,
        layer_selection=method.selection.label() if method.selection else "-",
        fold_pcc=fold_pcc,
        pooled_pcc=_safe_pearson(pooled_p, pooled_y) if len(pooled_p) >= 2 else None,
        mean_fold_pcc=float(np.mean(defined)) if defined else None,
        n_utterances=len(pooled_p),
        failed_folds=failed,
    )


def run_layer_ablation(
    manifest: DatasetManifest,
    split_plan: SplitPlan,
    archive: FeatureArchive,
    dimensions: Sequence[str],
    out_dir: str | Path,
    *,
    grid: AblationGrid | None = None,
    head: str = "blstm",
    method_name: str = "layer_ablation",
    run: TrainRunConfig = TrainRunConfig(),
    scorer_overrides: Mapping[str, Any] | None = None,
    config_hash: str | None = None,
) -> tuple[EvalReport, list[dict[str, Any]]]:
    """One experiment per layer point; returns the merged report and the curve rows.

    The archive must hold full layer stacks. The default grid is the conv
    features, each transformer layer, and the uniform average, so the curve
    has L + 2 points per dimension.
    """
    if archive.store != "stack":
        raise ValueError("layer ablation needs an archive built with store='stack'")
    num_layers = archive.spec["encoder"]["num_transformer_layers"]
    grid = grid or AblationGrid.all_layers(num_layers)
    if grid.axis != "layer":
        raise ValueError("run_layer_ablation needs a layer grid")
    report = EvalReport()
    curve = []
    for sel in grid.points:
        method = MethodSpec(method_name, "ssl_finetuned", head=head, selection=sel)
        sub = run_experiment(manifest, split_plan, method, dimensions, out_dir, features=archive, run=run,
                             scorer_overrides=scorer_overrides, config_hash=config_hash)
        report = report.merge(sub)
        for e in sub.entries:
            idx = str(sel.index) if sel.mode == "single_layer" else ("avg" if sel.mode == "uniform_average" else sel.label())
            curve.append({"layer_index": idx, "dimension": e.dimension, "pcc": e.pooled_pcc,
                          "fold_count": len(e.fold_pcc)})
    report.metadata = {**report.metadata, "ablation": {"axis": "layer", "points": [s.label() for s in grid.points]}}
    report.metadata.pop("method", None)
    return report, curve


def write_curve(curve: Sequence[Mapping[str, Any]], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_COLUMNS)
    for row in curve:
        w.writerow([row["layer_index"], row["dimension"], _fmt(row["pcc"]), row["fold_count"]])
    path.write_text(buf.getvalue(), encoding="utf-8")
    return path


def run_head_ablation(
    manifest: DatasetManifest,
    split_plan: SplitPlan,
    archive: FeatureArchive,
    selection: LayerSelection,
    dimensions: Sequence[str],
    out_dir: str | Path,
    *,
    heads: Sequence[str] = ("lr", "mlp", "blstm"),
    method_name: str = "head_ablation",
    run: TrainRunConfig = TrainRunConfig(),
    scorer_overrides: Mapping[str, Any] | None = None,
    config_hash: str | None = None,
) -> EvalReport:
    grid = AblationGrid("head", tuple(heads))
    report = EvalReport()
    for head in grid.points:
        method = MethodSpec(method_name, "ssl_finetuned", head=head, selection=selection)
        report = report.merge(run_experiment(manifest, split_plan, method, dimensions, out_dir, features=archive,
                                             run=run, scorer_overrides=scorer_overrides, config_hash=config_hash))
    report.metadata = {**report.metadata, "ablation": {"axis": "head", "points": list(grid.points)}}
    report.metadata.pop("method", None)
    return report
