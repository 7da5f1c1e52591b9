"""Synthetic corpora and layer stacks with a known relation between input and label.

Used by the end-to-end and layer-ablation checks, and handy for trying the
CLI without a real corpus.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .archive import FeatureArchive
from .dataset import (
    SAMPLE_RATE,
    DatasetManifest,
    ScoredUtterance,
    load_manifest,
    write_waveform,
)
from .encoder import LayerStack

SWEEP_HZ_PER_S = 150.0
WORDS = ("THE", "CAT", "SAT", "ON", "A", "MAT", "RED", "SUN", "BIG", "DOG")


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    num_speakers: int = 10
    utterances_per_speaker: int = 8
    min_duration_s: float = 0.5
    max_duration_s: float = 2.5
    dimensions: tuple[str, ...] = ("holistic",)
    score_scale: tuple[float, float] = (1.0, 5.0)
    label_noise: float = 0.0
    seed: int = 0


def duration_label(duration_s: float, config: SyntheticCorpusConfig) -> float:
    """Score rises linearly with duration across the configured range."""
    lo, hi = config.score_scale
    frac = (duration_s - config.min_duration_s) / (config.max_duration_s - config.min_duration_s)
    return lo + (hi - lo) * float(np.clip(frac, 0.0, 1.0))


def _waveform(rng: np.random.Generator, n: int) -> np.ndarray:
    """Rising harmonic sweep; every utterance follows the same trajectory, so longer ones reach higher pitch."""
    t = np.arange(n) / SAMPLE_RATE
    f0 = rng.uniform(100.0, 130.0) + SWEEP_HZ_PER_S * t
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    voiced = sum(np.sin(h * phase) / h for h in (1, 2, 3))
    return (0.3 * voiced / 1.8 + 0.01 * rng.standard_normal(n)).astype(np.float32)


def write_synthetic_corpus(out_dir: str | Path, config: SyntheticCorpusConfig = SyntheticCorpusConfig()) -> Path:
    """Write WAVs and a generic JSONL manifest whose labels depend only on duration.

    Returns the manifest path.
    """
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(config.seed)
    lines = []
    for s in range(config.num_speakers):
        spk = f"spk{s:03d}"
        for u in range(config.utterances_per_speaker):
            uid = f"{spk}_{u:03d}"
            dur = float(rng.uniform(config.min_duration_s, config.max_duration_s))
            n = int(round(dur * SAMPLE_RATE))
            write_waveform(out_dir / "wav" / f"{uid}.wav", _waveform(rng, n))
            words = rng.choice(WORDS, size=int(rng.integers(2, 6)))
            scores = {}
            for dim in config.dimensions:
                value = duration_label(n / SAMPLE_RATE, config) + config.label_noise * rng.standard_normal()
                scores[dim] = float(np.clip(value, *config.score_scale))
            lines.append({
                "utterance_id": uid,
                "audio": f"wav/{uid}.wav",
                "speaker": spk,
                "transcript": " ".join(words),
                "scores": scores,
                "score_scale": {d: list(config.score_scale) for d in config.dimensions},
            })
    path = out_dir / "manifest.jsonl"
    path.write_text("".join(json.dumps(rec) + "\n" for rec in lines), encoding="utf-8")
    return path


def load_synthetic_corpus(out_dir: str | Path, config: SyntheticCorpusConfig = SyntheticCorpusConfig()) -> DatasetManifest:
    return load_manifest(write_synthetic_corpus(out_dir, config), "generic_jsonl", name="synthetic")


@dataclass(frozen=True)
class PlantedStackConfig:
    num_layers: int = 6
    hidden_dim: int = 8
    conv_dim: int = 8
    min_frames: int = 10
    max_frames: int = 30
    signal_strength: float = 1.0
    noise_std: float = 1.0


def planted_layer_stacks(
    manifest: DatasetManifest,
    signal_layer: int,
    dimension: str,
    archive_dir: str | Path,
    config: PlantedStackConfig = PlantedStackConfig(),
    seed: int = 0,
) -> FeatureArchive:
    """Stack archive where only layer ``signal_layer`` (1-based) tracks the label.

    Every layer gets independent frame noise plus a random per-utterance
    offset, so the mean over frames of a noise layer is itself noise. In the
    signal layer the first channel's offset is the normalized label instead.
    """
    if not 1 <= signal_layer <= config.num_layers:
        raise ValueError(f"signal layer must lie in 1..{config.num_layers}")
    L, D = config.num_layers, config.hidden_dim
    spec = {
        "source": "synthetic_planted",
        "encoder": {"family": "synthetic", "variant": f"planted-L{L}", "num_transformer_layers": L,
                    "hidden_dim": D, "frame_stride": 0.02},
        "signal_layer": signal_layer,
        "dimension": dimension,
        "config": {k: getattr(config, k) for k in config.__dataclass_fields__},
        "seed": seed,
        "selection": None,
    }
    archive = FeatureArchive.open_or_create(archive_dir, spec, store="stack", dtype="float32")
    rng = np.random.default_rng(seed)
    for utt in manifest:
        T = int(rng.integers(config.min_frames, config.max_frames + 1))
        conv = rng.normal(0.0, config.noise_std, (T, config.conv_dim)) + rng.normal(0.0, 1.0, config.conv_dim)
        layers = []
        for layer in range(1, L + 1):
            offset = rng.normal(0.0, 1.0, D)
            if layer == signal_layer:
                offset[0] = config.signal_strength * (2.0 * utt.normalized_score(dimension) - 1.0)
            layers.append(rng.normal(0.0, config.noise_std, (T, D)) + offset)
        archive.write_stack(LayerStack(utt.utterance_id, conv.astype(np.float32),
                                       tuple(x.astype(np.float32) for x in layers)))
    return archive


def synthetic_manifest(num_speakers: int = 10, per_speaker: int = 10, dimension: str = "holistic",
                       seed: int = 0) -> DatasetManifest:
    """Audio-free manifest with uniform random labels on [1, 5], for feature-level experiments."""
    rng = np.random.default_rng(seed)
    utts = []
    for s in range(num_speakers):
        for u in range(per_speaker):
            utts.append(ScoredUtterance(
                utterance_id=f"s{s:02d}u{u:02d}",
                audio_path=Path(f"/nonexistent/s{s:02d}u{u:02d}.wav"),
                transcript=" ".join(rng.choice(WORDS, size=3)),
                speaker_id=f"s{s:02d}",
                scores={dimension: float(rng.uniform(1.0, 5.0))},
                score_scale={dimension: (1.0, 5.0)},
            ))
    return DatasetManifest("synthetic_planted", tuple(utts))


def main(argv: list[str] | None = None) -> None:
    import argparse

    parser = argparse.ArgumentParser(description="write a synthetic duration-scored corpus")
    parser.add_argument("out_dir")
    parser.add_argument("--speakers", type=int, default=SyntheticCorpusConfig.num_speakers)
    parser.add_argument("--per-speaker", type=int, default=SyntheticCorpusConfig.utterances_per_speaker)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    config = SyntheticCorpusConfig(num_speakers=args.speakers, utterances_per_speaker=args.per_speaker, seed=args.seed)
    print(write_synthetic_corpus(args.out_dir, config))


if __name__ == "__main__":
    main()
