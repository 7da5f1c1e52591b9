"""Corpus data model, manifest loaders and speaker-disjoint splits.

Two on-disk formats are understood:

* ``generic_jsonl``: one JSON object per line with keys ``utterance_id``,
  ``audio``, ``speaker``, ``transcript`` and ``scores`` (a map of
  dimension name to number). An optional ``score_scale`` map gives
  ``[min, max]`` per dimension; otherwise :data:`DEFAULT_SCALES` is used.
  Relative audio paths are resolved against the manifest's directory.
* ``speechocean762``: the published corpus layout, i.e.
  ``resource/scores.json`` plus ``train/`` and ``test/`` directories each
  holding a Kaldi-style ``wav.scp`` (and optionally ``utt2spk``).
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000

KESL_DIMENSIONS = ("holistic", "segmental", "stress", "pause", "intonation")
SO762_DIMENSIONS = ("accuracy", "completeness", "fluency", "prosodic", "total")

DEFAULT_SCALES: dict[str, tuple[float, float]] = {
    **{dim: (1.0, 5.0) for dim in KESL_DIMENSIONS},
    **{dim: (0.0, 10.0) for dim in SO762_DIMENSIONS},
}

FORMATS = ("generic_jsonl", "speechocean762")


class DatasetError(Exception):
    """Fatal problem while loading or validating a corpus."""


class ManifestValidationError(DatasetError):
    pass


@dataclass(frozen=True)
class ScoredUtterance:
    utterance_id: str
    audio_path: Path
    transcript: str
    speaker_id: str
    scores: Mapping[str, float]
    score_scale: Mapping[str, tuple[float, float]]
    # canonical partition ("train"/"test") when the corpus publishes one
    subset: str | None = None

    def validate(self) -> None:
        uid = self.utterance_id
        if not uid:
            raise ManifestValidationError("utterance with empty utterance_id")
        if not self.transcript.strip():
            raise ManifestValidationError(f"{uid}: transcript is empty")
        if not self.speaker_id:
            raise ManifestValidationError(f"{uid}: speaker_id is empty")
        for dim, value in self.scores.items():
            if dim not in self.score_scale:
                raise ManifestValidationError(f"{uid}: no scale declared for score dimension {dim!r}")
            lo, hi = self.score_scale[dim]
            if not (math.isfinite(value) and lo <= value <= hi):
                raise ManifestValidationError(
                    f"{uid}: score {dim}={value} outside declared scale [{lo}, {hi}]"
                )

    def normalized_score(self, dim: str) -> float:
        return normalize_score(self.scores[dim], self.score_scale[dim])


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    utterances: tuple[ScoredUtterance, ...]
    sample_rate: int = SAMPLE_RATE
    # utterances dropped at load time because their audio was missing
    skipped: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.sample_rate != SAMPLE_RATE:
            raise ManifestValidationError(f"sample_rate must be {SAMPLE_RATE}, got {self.sample_rate}")
        seen: set[str] = set()
        for utt in self.utterances:
            if utt.utterance_id in seen:
                raise ManifestValidationError(f"duplicate utterance_id {utt.utterance_id!r}")
            seen.add(utt.utterance_id)
            utt.validate()

    def __len__(self) -> int:
        return len(self.utterances)

    def __iter__(self):
        return iter(self.utterances)

    @property
    def ids(self) -> list[str]:
        return [u.utterance_id for u in self.utterances]

    @property
    def speakers(self) -> list[str]:
        """Distinct speakers in first-appearance order."""
        return list(dict.fromkeys(u.speaker_id for u in self.utterances))

    def by_id(self) -> dict[str, ScoredUtterance]:
        return {u.utterance_id: u for u in self.utterances}

    def subset(self, ids: Iterable[str], name: str | None = None) -> DatasetManifest:
        wanted = set(ids)
        utts = tuple(u for u in self.utterances if u.utterance_id in wanted)
        missing = wanted - {u.utterance_id for u in utts}
        if missing:
            raise DatasetError(f"ids not in manifest {self.name!r}: {sorted(missing)[:5]}")
        return DatasetManifest(name or self.name, utts, self.sample_rate)

    def dimensions(self) -> list[str]:
        return sorted({d for u in self.utterances for d in u.scores})


def normalize_score(value: float, scale: Sequence[float]) -> float:
    lo, hi = scale
    return (value - lo) / (hi - lo)


def denormalize_score(value: float, scale: Sequence[float]) -> float:
    lo, hi = scale
    return value * (hi - lo) + lo


# --------------------------------------------------------------------------- loading


def load_manifest(
    path: str | Path,
    format: str = "generic_jsonl",
    *,
    name: str | None = None,
    strict: bool = False,
    check_audio: bool = True,
) -> DatasetManifest:
    """Parse a corpus into a validated :class:`DatasetManifest`.

    Utterances whose audio file is absent are skipped and listed in
    ``manifest.skipped``; with ``strict=True`` they are fatal instead.
    """
    path = Path(path)
    if format not in FORMATS:
        raise DatasetError(f"unknown manifest format {format!r}; expected one of {FORMATS}")
    if not path.exists():
        raise DatasetError(f"manifest path not found: {path}")
    if format == "generic_jsonl":
        utts = _read_generic_jsonl(path)
        default_name = path.stem
    else:
        utts = _read_speechocean762(path)
        default_name = "speechocean762"

    kept: list[ScoredUtterance] = []
    skipped: list[str] = []
    for utt in utts:
        if check_audio and not utt.audio_path.is_file():
            if strict:
                raise DatasetError(f"{utt.utterance_id}: audio file not found: {utt.audio_path}")
            skipped.append(utt.utterance_id)
            continue
        kept.append(utt)
    if skipped:
        logger.warning("skipped %d utterance(s) with missing audio", len(skipped))
    if not kept:
        logger.warning("manifest %s contains no utterances", path)
    return DatasetManifest(name or default_name, tuple(kept), SAMPLE_RATE, tuple(skipped))


def _read_generic_jsonl(path: Path) -> list[ScoredUtterance]:
    base = path.parent
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            out.append(_utterance_from_record(rec, base, where=f"{path}:{lineno}"))
    return out


def _utterance_from_record(rec: Mapping[str, Any], base: Path, where: str = "") -> ScoredUtterance:
    try:
        uid = str(rec["utterance_id"])
        audio = Path(rec["audio"])
        speaker = str(rec["speaker"])
        transcript = str(rec["transcript"])
        scores = {str(k): float(v) for k, v in rec["scores"].items()}
    except (KeyError, TypeError, AttributeError, ValueError) as exc:
        raise ManifestValidationError(f"{where}: malformed record ({exc!r})") from None
    scales = dict(DEFAULT_SCALES)
    for dim, bounds in (rec.get("score_scale") or {}).items():
        scales[dim] = (float(bounds[0]), float(bounds[1]))
    if not audio.is_absolute():
        audio = base / audio
    return ScoredUtterance(
        utterance_id=uid,
        audio_path=audio,
        transcript=transcript,
        speaker_id=speaker,
        scores=scores,
        score_scale={d: scales[d] for d in scores if d in scales} or {},
        subset=rec.get("subset"),
    )


def _read_kaldi_map(path: Path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for line in f:
            parts = line.strip().split(maxsplit=1)
            if len(parts) == 2:
                out[parts[0]] = parts[1]
    return out


def _read_speechocean762(root: Path) -> list[ScoredUtterance]:
    scores_file = root / "resource" / "scores.json"
    if not scores_file.is_file():
        raise DatasetError(f"missing Speechocean762 score file: {scores_file}")
    with open(scores_file, encoding="utf-8") as f:
        scores = json.load(f)

    wav_index: dict[str, tuple[str, str]] = {}
    speakers: dict[str, str] = {}
    for subset in ("train", "test"):
        scp = root / subset / "wav.scp"
        if not scp.is_file():
            raise DatasetError(f"missing Speechocean762 wave index: {scp}")
        for uid, rel in _read_kaldi_map(scp).items():
            wav_index[uid] = (rel, subset)
        utt2spk = root / subset / "utt2spk"
        if utt2spk.is_file():
            speakers.update(_read_kaldi_map(utt2spk))

    out = []
    for uid in sorted(scores):
        rec = scores[uid]
        if uid not in wav_index:
            logger.warning("%s: scored but absent from wav.scp; ignored", uid)
            continue
        rel, subset = wav_index[uid]
        audio = Path(rel) if Path(rel).is_absolute() else root / rel
        dims = {dim: float(rec[dim]) for dim in SO762_DIMENSIONS if dim in rec}
        out.append(
            ScoredUtterance(
                utterance_id=uid,
                audio_path=audio,
                transcript=str(rec.get("text", "")).strip(),
                # utterance ids embed the 4-digit speaker id as a prefix
                speaker_id=speakers.get(uid, uid[:4]),
                scores=dims,
                score_scale={d: DEFAULT_SCALES[d] for d in dims},
                subset=subset,
            )
        )
    return out


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest in ``generic_jsonl`` form with absolute audio paths."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for u in manifest:
            rec = {
                "utterance_id": u.utterance_id,
                "audio": str(Path(u.audio_path).resolve()),
                "speaker": u.speaker_id,
                "transcript": u.transcript,
                "scores": dict(u.scores),
                "score_scale": {d: list(s) for d, s in u.score_scale.items()},
            }
            if u.subset is not None:
                rec["subset"] = u.subset
            f.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_waveform(path: str | Path) -> np.ndarray:
    """Read a 16 kHz mono WAVE file into float32 samples in [-1, 1]."""
    from scipy.io import wavfile

    sr, data = wavfile.read(str(path))
    if sr != SAMPLE_RATE:
        raise DatasetError(f"{path}: sample rate {sr} Hz, expected {SAMPLE_RATE}")
    if data.ndim > 1:
        raise DatasetError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float32) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float32) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float32) - 128.0) / 128.0
    return data.astype(np.float32)


def write_waveform(path: str | Path, samples: np.ndarray) -> None:
    from scipy.io import wavfile

    pcm = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 32767 / 32768)
    wavfile.write(str(path), SAMPLE_RATE, np.round(pcm * 32768).astype(np.int16))


# --------------------------------------------------------------------------- splits


@dataclass(frozen=True)
class Fold:
    train_ids: tuple[str, ...]
    validation_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]
    strategy: str  # "speaker_kfold" | "fixed_train_test"
    seed: int | None = None

    def to_json(self) -> dict[str, Any]:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "folds": [
                {"train": list(f.train_ids), "validation": list(f.validation_ids), "test": list(f.test_ids)}
                for f in self.folds
            ],
        }

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> SplitPlan:
        folds = tuple(
            Fold(tuple(f["train"]), tuple(f["validation"]), tuple(f["test"])) for f in data["folds"]
        )
        return cls(folds, data["strategy"], data.get("seed"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> SplitPlan:
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))

    def check(self, manifest: DatasetManifest) -> None:
        """Raise if a fold overlaps, misses utterances, or (k-fold) shares speakers."""
        all_ids = set(manifest.ids)
        spk = {u.utterance_id: u.speaker_id for u in manifest}
        for i, fold in enumerate(self.folds):
            parts = [set(fold.train_ids), set(fold.validation_ids), set(fold.test_ids)]
            if sum(map(len, parts)) != len(set().union(*parts)):
                raise DatasetError(f"fold {i}: train/validation/test overlap")
            if set().union(*parts) != all_ids:
                raise DatasetError(f"fold {i}: split does not cover the manifest")
            if self.strategy == "speaker_kfold":
                spk_sets = [{spk[u] for u in p} for p in parts]
                if spk_sets[0] & spk_sets[1] or spk_sets[0] & spk_sets[2] or spk_sets[1] & spk_sets[2]:
                    raise DatasetError(f"fold {i}: a speaker appears in more than one partition")


def _ids_for(manifest: DatasetManifest, speakers: Iterable[str]) -> tuple[str, ...]:
    wanted = set(speakers)
    return tuple(u.utterance_id for u in manifest if u.speaker_id in wanted)


def _validation_count(n_pool: int, fraction: float) -> int:
    if n_pool <= 1 or fraction <= 0:
        return 0
    return min(max(1, round(fraction * n_pool)), n_pool - 1)


def make_speaker_kfold(
    manifest: DatasetManifest, k: int = 10, validation_fraction: float = 0.1, seed: int = 0
) -> SplitPlan:
    """Partition speakers into ``k`` near-equal groups; fold ``i`` tests on group ``i``.

    Validation speakers are drawn (seeded, per fold) from the remaining
    speakers; the rest train.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if not 0 < validation_fraction < 1:
        raise ValueError(f"validation_fraction must be in (0, 1), got {validation_fraction}")
    speakers = sorted(manifest.speakers)
    if len(speakers) < k:
        raise DatasetError(f"need at least k={k} speakers for speaker k-fold, manifest has {len(speakers)}")

    rng = np.random.default_rng(seed)
    order = [speakers[i] for i in rng.permutation(len(speakers))]
    groups = [list(g) for g in np.array_split(np.array(order, dtype=object), k)]

    folds = []
    for i, test_spk in enumerate(groups):
        rest = [s for j, g in enumerate(groups) if j != i for s in g]
        fold_rng = np.random.default_rng([seed, i])
        rest = [rest[j] for j in fold_rng.permutation(len(rest))]
        n_val = _validation_count(len(rest), validation_fraction)
        folds.append(
            Fold(
                train_ids=_ids_for(manifest, rest[n_val:]),
                validation_ids=_ids_for(manifest, rest[:n_val]),
                test_ids=_ids_for(manifest, test_spk),
            )
        )
    return SplitPlan(tuple(folds), "speaker_kfold", seed)


def make_fixed_split(
    manifest: DatasetManifest,
    train_fraction: float = 0.5,
    seed: int = 0,
    by_speaker: bool = True,
    validation_fraction: float = 0.1,
    use_canonical: bool = True,
) -> SplitPlan:
    """Single train/test split, with validation carved out of the training side.

    When every utterance carries a published ``subset`` label (as in
    Speechocean762) that assignment is used instead of a random draw.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    canonical = use_canonical and len(manifest) > 0 and all(u.subset in ("train", "test") for u in manifest)

    if canonical:
        train_pool = [u.utterance_id for u in manifest if u.subset == "train"]
        test = tuple(u.utterance_id for u in manifest if u.subset == "test")
        spk = {u.utterance_id: u.speaker_id for u in manifest}
        units = sorted({spk[i] for i in train_pool}) if by_speaker else sorted(train_pool)
        units = [units[j] for j in rng.permutation(len(units))]
        n_val = _validation_count(len(units), validation_fraction)
        val_units = set(units[:n_val])
        key = (lambda i: spk[i]) if by_speaker else (lambda i: i)
        val = tuple(i for i in train_pool if key(i) in val_units)
        train = tuple(i for i in train_pool if key(i) not in val_units)
        return SplitPlan((Fold(train, val, test),), "fixed_train_test", seed)

    if by_speaker:
        units = sorted(manifest.speakers)
        member = {u.utterance_id: u.speaker_id for u in manifest}
    else:
        units = sorted(manifest.ids)
        member = {i: i for i in manifest.ids}
    units = [units[j] for j in rng.permutation(len(units))]
    n_train_side = min(max(1, round(train_fraction * len(units))), max(len(units) - 1, 1))
    train_side, test_units = units[:n_train_side], set(units[n_train_side:])
    n_val = _validation_count(len(train_side), validation_fraction)
    val_units = set(train_side[:n_val])
    train = tuple(i for i in manifest.ids if member[i] not in test_units and member[i] not in val_units)
    val = tuple(i for i in manifest.ids if member[i] in val_units)
    test = tuple(i for i in manifest.ids if member[i] in test_units)
    return SplitPlan((Fold(train, val, test),), "fixed_train_test", seed)
