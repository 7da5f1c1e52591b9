from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import pytest

from pronscore.dataset import (
    SAMPLE_RATE,
    DatasetManifest,
    ScoredUtterance,
    write_waveform,
)


def make_utterance(uid: str, speaker: str, score: float = 3.0, transcript: str = "HELLO WORLD",
                   audio_path: Path | None = None, dim: str = "holistic") -> ScoredUtterance:
    return ScoredUtterance(uid, audio_path or Path(f"/nonexistent/{uid}.wav"), transcript, speaker,
                           {dim: score}, {dim: (1.0, 5.0)})


def make_manifest(speaker_sizes: list[int], seed: int = 0, name: str = "toy") -> DatasetManifest:
    rng = np.random.default_rng(seed)
    utts = []
    for s, n in enumerate(speaker_sizes):
        for u in range(n):
            utts.append(make_utterance(f"s{s:03d}_u{u:02d}", f"s{s:03d}", float(rng.uniform(1, 5))))
    return DatasetManifest(name, tuple(utts))


def tone(seconds: float, freq: float = 220.0, amp: float = 0.3) -> np.ndarray:
    t = np.arange(int(round(seconds * SAMPLE_RATE))) / SAMPLE_RATE
    return (amp * np.sin(2 * np.pi * freq * t)).astype(np.float32)


def write_jsonl_corpus(root: Path, records: list[dict], waves: dict[str, np.ndarray]) -> Path:
    (root / "wav").mkdir(parents=True, exist_ok=True)
    for uid, w in waves.items():
        write_waveform(root / "wav" / f"{uid}.wav", w)
    path = root / "manifest.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    return path


def write_speechocean_layout(root: Path, n_speakers: int = 4, per_speaker: int = 4, seed: int = 0) -> Path:
    """Miniature copy of the published Speechocean762 directory layout."""
    rng = np.random.default_rng(seed)
    scores, train_scp, test_scp, train_spk, test_spk = {}, [], [], [], []
    (root / "resource").mkdir(parents=True, exist_ok=True)
    for s in range(n_speakers):
        spk = f"{s + 1:04d}"
        subset = "train" if s % 2 == 0 else "test"
        (root / "WAVE" / f"SPEAKER{spk}").mkdir(parents=True, exist_ok=True)
        for u in range(per_speaker):
            uid = f"{spk}{u + 1:05d}"
            wav = root / "WAVE" / f"SPEAKER{spk}" / f"{uid}.WAV"
            write_waveform(wav, tone(float(rng.uniform(0.6, 1.2)), float(rng.uniform(120, 300))))
            scores[uid] = {
                "accuracy": int(rng.integers(3, 11)), "completeness": float(rng.choice([9.0, 10.0])),
                "fluency": int(rng.integers(3, 11)), "prosodic": int(rng.integers(3, 11)),
                "total": int(rng.integers(3, 11)), "text": "WE CALL IT BEAR", "words": [],
            }
            (train_scp if subset == "train" else test_scp).append(f"{uid}\tWAVE/SPEAKER{spk}/{uid}.WAV")
            (train_spk if subset == "train" else test_spk).append(f"{uid}\t{spk}")
    (root / "resource" / "scores.json").write_text(json.dumps(scores), encoding="utf-8")
    for sub, scp, spk in (("train", train_scp, train_spk), ("test", test_scp, test_spk)):
        (root / sub).mkdir(exist_ok=True)
        (root / sub / "wav.scp").write_text("\n".join(scp) + "\n", encoding="utf-8")
        (root / sub / "utt2spk").write_text("\n".join(spk) + "\n", encoding="utf-8")
    return root


@pytest.fixture
def so762_root(tmp_path) -> Path:
    return write_speechocean_layout(tmp_path / "so762")


# ---------------------------------------------------------------- acceptance summary

_CRITERION_RESULTS: dict[int, tuple[str, str, float]] = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    number = int(name.split("_")[2])
    title = " ".join(name.split("_")[3:])
    if report.when == "call" or report.outcome != "passed":
        status = {"passed": "PASS", "failed": "FAIL", "skipped": "SKIP"}[report.outcome]
        note = ""
        if report.skipped and isinstance(report.longrepr, tuple):
            note = f" ({report.longrepr[2].removeprefix('Skipped: ')})"
        _CRITERION_RESULTS[number] = (title, status + note, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERION_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, (title, status, seconds) in sorted(_CRITERION_RESULTS.items()):
        terminalreporter.write_line(f"criterion {number} ({title}): {status} [{seconds:.1f} s]")
