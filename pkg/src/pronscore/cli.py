"""``pronscore`` command line.

Every verb takes one TOML config plus ``--set section.key=value`` overrides.
Exit codes: 0 success, 1 invalid input or config, 2 partial failure (some
folds or utterances failed), 3 fatal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .archive import ArchiveMismatchError, FeatureArchive, extract_corpus
from .config import ConfigError, config_hash, load_config
from .dataset import (
    DatasetError,
    DatasetManifest,
    SplitPlan,
    load_manifest,
    make_fixed_split,
    make_speaker_kfold,
    write_manifest,
)
from .encoder import LayerSelection, load_backend
from .evaluation import (
    AblationGrid,
    EvalReport,
    MethodSpec,
    emit_report,
    feature_source,
    run_experiment,
    run_head_ablation,
    run_layer_ablation,
    scorer_config_for,
    write_curve,
)
from .scorer import TrainRunConfig, train_scorer

logger = logging.getLogger("pronscore")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_FATAL = 0, 1, 2, 3
REPORT_SUFFIX = {"table_text": "txt", "csv": "csv", "json": "json"}


# --------------------------------------------------------------------------- shared steps


def _out_dir(cfg) -> Path:
    path = Path(cfg["run"]["out_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _manifest(cfg) -> DatasetManifest:
    ds = cfg["dataset"]
    manifest = load_manifest(ds["path"], ds["format"], name=ds.get("name"), strict=ds["strict"])
    if "limit" in ds and ds["limit"] < len(manifest):
        rng = np.random.default_rng(cfg["run"]["seed"])
        keep = sorted(rng.choice(len(manifest), ds["limit"], replace=False))
        manifest = manifest.subset([manifest.ids[i] for i in keep])
    if len(manifest) == 0:
        raise DatasetError("manifest has no usable utterances")
    return manifest


def _dimensions(cfg, manifest: DatasetManifest) -> list[str]:
    dims = cfg["dataset"].get("dimensions") or manifest.dimensions()
    missing = [d for d in dims if any(d not in u.scores for u in manifest)]
    if missing:
        raise DatasetError(f"score dimension(s) {missing} missing from some utterances")
    return list(dims)


def _split(cfg, manifest: DatasetManifest) -> SplitPlan:
    sp = cfg["split"]
    if sp.get("plan"):
        plan = SplitPlan.load(sp["plan"])
    elif sp["strategy"] == "fixed":
        plan = make_fixed_split(manifest, sp["train_fraction"], sp["seed"],
                                validation_fraction=sp["validation_fraction"], use_canonical=sp["use_canonical"])
    else:
        plan = make_speaker_kfold(manifest, sp["k"], sp["validation_fraction"], sp["seed"])
    plan.check(manifest)
    return plan


def _backend(cfg):
    enc = cfg["encoder"]
    return load_backend(enc["backend"], enc.get("checkpoint"), family=enc.get("family"), variant=enc.get("variant"))


def _archive(cfg, manifest: DatasetManifest, store: str | None = None) -> FeatureArchive:
    """Open the feature cache, encoding whatever is missing."""
    enc = cfg["encoder"]
    store = store or enc["store"]
    selection = LayerSelection.parse(enc["layer_selection"])
    if selection.learnable:
        store = "stack"
    cache_dir = Path(enc.get("cache_dir") or Path(cfg["run"]["out_dir"]) / "features" / store)
    backend = _backend(cfg)
    factory = (lambda: _backend(cfg)) if enc["workers"] > 1 else None
    result = extract_corpus(manifest, backend, None if store == "stack" else selection, cache_dir, store=store,
                            dtype=enc["dtype"], workers=enc["workers"], backend_factory=factory)
    logger.info("features: %d encoded, %d cached, %d failed -> %s", result.encoded, result.cache_hits,
                len(result.failed), cache_dir)
    if result.failed:
        logger.warning("%d utterance(s) could not be encoded and will be excluded", len(result.failed))
    return result.archive


def _run_config(cfg) -> TrainRunConfig:
    t = cfg["train"]
    return TrainRunConfig(learning_rate=t["learning_rate"], early_stopping_patience=t["early_stopping_patience"],
                          max_epochs=t["max_epochs"], batch_size=t["batch_size"], seed=t["seed"])


def _scorer_overrides(cfg) -> dict[str, Any]:
    return {k: v for k, v in cfg["scorer"].items() if k != "head"}


def _method(cfg, head: str | None = None) -> MethodSpec:
    exp, enc = cfg["experiment"], cfg["encoder"]
    kind = exp["kind"]
    name = exp.get("method_name") or (
        "+".join(exp["feature_sets"]) if kind == "baseline" else f"{enc['backend']}:{enc.get('checkpoint', 'tiny')}"
    )
    selection = None if kind == "baseline" else LayerSelection.parse(enc["layer_selection"])
    default_head = "mlp" if kind == "baseline" else cfg["scorer"]["head"]
    return MethodSpec(name, kind, head or default_head, selection, tuple(exp["feature_sets"]))


def _features(cfg, manifest: DatasetManifest, method: MethodSpec):
    if method.kind != "baseline":
        return _archive(cfg, manifest)
    from .baselines import baseline_vectors, ingest_gop

    gop = ingest_gop(cfg["experiment"]["gop_path"], manifest) if "gop" in method.feature_sets else None
    vectors, _ = baseline_vectors(manifest, method.feature_sets, gop)
    return vectors


def _write_reports(cfg, report: EvalReport, stem: str) -> list[Path]:
    out = _out_dir(cfg)
    return [emit_report(report, fmt, out / f"{stem}.{REPORT_SUFFIX[fmt]}") for fmt in cfg["experiment"]["report_formats"]]


# --------------------------------------------------------------------------- verbs


def cmd_ingest(cfg, args) -> int:
    manifest = _manifest(cfg)
    path = _out_dir(cfg) / "manifest.jsonl"
    write_manifest(manifest, path)
    print(f"{len(manifest)} utterances, {len(manifest.speakers)} speakers, dimensions {manifest.dimensions()}"
          f"; {len(manifest.skipped)} skipped -> {path}")
    return EXIT_OK


def cmd_split(cfg, args) -> int:
    manifest = _manifest(cfg)
    plan = _split(cfg, manifest)
    path = _out_dir(cfg) / "split.json"
    plan.save(path)
    for i, f in enumerate(plan.folds):
        print(f"fold {i}: train {len(f.train_ids)} / validation {len(f.validation_ids)} / test {len(f.test_ids)}")
    print(f"-> {path}")
    return EXIT_OK


def cmd_finetune(cfg, args) -> int:
    from .finetune import FinetuneConfig, build_vocabulary, finetune
    from .ssl_models import TinyEncoderConfig, TinySSLEncoder, load_hf_encoder

    ft, enc = cfg["finetune"], cfg["encoder"]
    if "train_manifest" not in ft or "dev_manifest" not in ft:
        raise ConfigError("finetune needs finetune.train_manifest and finetune.dev_manifest")
    train = load_manifest(ft["train_manifest"], ft["manifest_format"])
    dev = load_manifest(ft["dev_manifest"], ft["manifest_format"])
    if enc["backend"] == "hf":
        if not enc.get("checkpoint"):
            raise ConfigError("encoder.checkpoint is required for the hf backend")
        module = load_hf_encoder(enc["checkpoint"], enc.get("family"))
    else:
        module = (TinySSLEncoder.load(enc["checkpoint"]) if enc.get("checkpoint")
                  else TinySSLEncoder(TinyEncoderConfig(seed=cfg["run"]["seed"])))
    config = FinetuneConfig(total_steps=ft["total_steps"], batch_size=ft["batch_size"],
                            peak_learning_rate=ft["peak_learning_rate"], warmup_steps=ft["warmup_steps"],
                            checkpoint_interval=ft["checkpoint_interval"], decay=ft["decay"], seed=cfg["run"]["seed"])
    out = Path(ft.get("out_dir") or _out_dir(cfg) / "finetune")
    result = finetune(module, train, dev, build_vocabulary([u.transcript for u in train]), config, out)
    # stable name for downstream configs (encoder.checkpoint = "<out_dir>/best")
    best = out / "best"
    if best.is_dir():
        shutil.rmtree(best)
    if result.best.path.is_dir():
        shutil.copytree(result.best.path, best)
    else:
        shutil.copy2(result.best.path, best)
    print(f"best checkpoint: step {result.best.step}, dev WER {result.best.dev_wer:.4f} -> {best}")
    return EXIT_OK


def cmd_extract(cfg, args) -> int:
    manifest = _manifest(cfg)
    archive = _archive(cfg, manifest)
    missing = [u for u in manifest.ids if u not in archive]
    print(f"{len(manifest) - len(missing)}/{len(manifest)} utterances in {archive.root}")
    return EXIT_PARTIAL if missing else EXIT_OK


def cmd_train_scorer(cfg, args) -> int:
    manifest = _manifest(cfg)
    plan = _split(cfg, manifest)
    if not 0 <= args.fold < len(plan.folds):
        raise ConfigError(f"fold {args.fold} out of range; the plan has {len(plan.folds)} fold(s)")
    fold = plan.folds[args.fold]
    method = _method(cfg)
    features = _features(cfg, manifest, method)
    out = _out_dir(cfg) / "scorers"
    out.mkdir(exist_ok=True)

    source = feature_source(method, features, fold)
    for dim in _dimensions(cfg, manifest):
        config = scorer_config_for(method, source, manifest, fold, dim, _scorer_overrides(cfg))
        result = train_scorer(source, manifest, fold, config, _run_config(cfg),
                              log_path=out / f"{dim}_fold{args.fold}.train_log.jsonl")
        path = out / f"{dim}_fold{args.fold}.pt"
        result.scorer.save(path)
        print(f"{dim}: best epoch {result.best_epoch}, validation MSE {result.best_val_loss:.5f} -> {path}")
    return EXIT_OK


def cmd_evaluate(cfg, args) -> int:
    manifest = _manifest(cfg)
    plan = _split(cfg, manifest)
    method = _method(cfg)
    features = _features(cfg, manifest, method)
    report = run_experiment(manifest, plan, method, _dimensions(cfg, manifest), _out_dir(cfg), features=features,
                            run=_run_config(cfg), scorer_overrides=_scorer_overrides(cfg),
                            config_hash=config_hash(cfg))
    _finish(cfg, report, "report")
    return EXIT_PARTIAL if report.has_failures else EXIT_OK


def cmd_ablate_layers(cfg, args) -> int:
    manifest = _manifest(cfg)
    plan = _split(cfg, manifest)
    archive = _archive(cfg, manifest, store="stack")
    layers = cfg["experiment"]["layers"]
    grid = AblationGrid("layer", tuple(LayerSelection.parse(x) for x in layers)) if layers else None
    report, curve = run_layer_ablation(manifest, plan, archive, _dimensions(cfg, manifest), _out_dir(cfg), grid=grid,
                                       head=cfg["scorer"]["head"], method_name=_method(cfg).name,
                                       run=_run_config(cfg), scorer_overrides=_scorer_overrides(cfg),
                                       config_hash=config_hash(cfg))
    print(f"curve -> {write_curve(curve, _out_dir(cfg) / 'layer_curve.csv')}")
    _finish(cfg, report, "layer_ablation")
    return EXIT_PARTIAL if report.has_failures else EXIT_OK


def cmd_ablate_heads(cfg, args) -> int:
    manifest = _manifest(cfg)
    plan = _split(cfg, manifest)
    archive = _archive(cfg, manifest)
    report = run_head_ablation(manifest, plan, archive, LayerSelection.parse(cfg["encoder"]["layer_selection"]),
                               _dimensions(cfg, manifest), _out_dir(cfg), heads=cfg["experiment"]["heads"],
                               method_name=_method(cfg).name, run=_run_config(cfg),
                               scorer_overrides=_scorer_overrides(cfg), config_hash=config_hash(cfg))
    _finish(cfg, report, "head_ablation")
    return EXIT_PARTIAL if report.has_failures else EXIT_OK


def cmd_report(cfg, args) -> int:
    out = _out_dir(cfg)
    inputs = args.inputs or [out / "report.json"]
    report = EvalReport()
    for path in inputs:
        report = report.merge(EvalReport.load(path))
    for fmt in args.format or cfg["experiment"]["report_formats"]:
        target = Path(args.output) if args.output and len(args.format or []) == 1 else out / f"merged.{REPORT_SUFFIX[fmt]}"
        print(f"{fmt} -> {emit_report(report, fmt, target)}")
    return EXIT_OK


def _finish(cfg, report: EvalReport, stem: str) -> None:
    for path in _write_reports(cfg, report, stem):
        print(f"report -> {path}")
    for e in report.entries:
        pooled = "undefined" if e.pooled_pcc is None else f"{e.pooled_pcc:.4f}"
        failed = f" (failed folds: {e.failed_folds})" if e.failed_folds else ""
        print(f"{e.dataset} {e.dimension} {e.method} [{e.layer_selection}] {e.head}: PCC {pooled}{failed}")


VERBS = {
    "ingest": (cmd_ingest, "validate a corpus and write a normalized manifest"),
    "split": (cmd_split, "build and save a speaker-disjoint split plan"),
    "finetune": (cmd_finetune, "fine-tune an encoder with a CTC head"),
    "extract": (cmd_extract, "encode the corpus into the feature cache"),
    "train-scorer": (cmd_train_scorer, "train scoring heads on one fold"),
    "evaluate": (cmd_evaluate, "cross-validated evaluation of one method"),
    "ablate-layers": (cmd_ablate_layers, "one experiment per encoder layer plus the average"),
    "ablate-heads": (cmd_ablate_heads, "compare scoring heads on the same features"),
    "report": (cmd_report, "merge report files and render them"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pronscore", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb, (_, help_text) in VERBS.items():
        p = sub.add_parser(verb, help=help_text)
        p.add_argument("config", help="TOML run configuration")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        if verb == "train-scorer":
            p.add_argument("--fold", type=int, default=0, help="fold index to train on")
        if verb == "report":
            p.add_argument("inputs", nargs="*", help="report json files (default: <out_dir>/report.json)")
            p.add_argument("--format", action="append", choices=sorted(REPORT_SUFFIX), help="output format(s)")
            p.add_argument("--output", help="output path when a single format is requested")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=cfg["run"]["log_level"], format="%(levelname)s %(name)s: %(message)s")
    handler, _ = VERBS[args.verb]
    try:
        return handler(cfg, args)
    except (ConfigError, DatasetError, ArchiveMismatchError, ValueError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # anything else is a fatal error with a short message
        logger.debug("fatal error", exc_info=True)
        print(f"fatal: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
