"""Ingestion of externally computed GOP features, plus a toy generator.

File format: UTF-8, one JSON object per line::

    {"utterance_id": "000010011", "features": {"gop_mean": -0.41, "gop_min": -3.2}}

Every record must carry the same feature names.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..dataset import DatasetManifest

logger = logging.getLogger(__name__)


class GopValidationError(ValueError):
    pass


@dataclass(frozen=True)
class GopFeatures:
    utterance_id: str
    values: np.ndarray
    names: tuple[str, ...]


class GopTable(dict):
    """utterance_id -> GopFeatures, with coverage bookkeeping against a manifest."""

    def __init__(self, *args, names=(), unknown=(), uncovered=(), total=0, **kwargs):
        super().__init__(*args, **kwargs)
        self.names = tuple(names)
        self.unknown = list(unknown)
        self.uncovered = list(uncovered)
        self.total = total

    @property
    def coverage(self) -> float:
        return len(self) / self.total if self.total else 0.0


def ingest_gop(path: str | Path, manifest: DatasetManifest) -> GopTable:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"GOP file not found: {path}")
    known = set(manifest.ids)
    names: tuple[str, ...] | None = None
    table: dict[str, GopFeatures] = {}
    unknown = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            uid = str(rec["utterance_id"])
            feats = rec["features"]
            rec_names = tuple(feats)
            if names is None:
                names = rec_names
            elif rec_names != names:
                raise GopValidationError(f"{path}:{lineno}: {uid} has feature names {rec_names}, expected {names}")
            values = np.array([float(feats[n]) for n in names])
            if not np.isfinite(values).all():
                bad = [n for n, v in zip(names, values) if not math.isfinite(v)]
                raise GopValidationError(f"{uid}: non-finite GOP feature(s) {bad}")
            if uid not in known:
                unknown.append(uid)
                continue
            table[uid] = GopFeatures(uid, values, names)
    if unknown:
        logger.warning("%d GOP record(s) for utterances not in the manifest were skipped", len(unknown))
    uncovered = [u for u in manifest.ids if u not in table]
    return GopTable(table, names=names or (), unknown=unknown, uncovered=uncovered, total=len(manifest))


TOY_NAMES = ("gop_mean", "gop_std", "gop_min", "gop_frac_below_minus1", "num_phones")


def toy_gop_record(utterance_id: str, transcript: str, quality: float | None = None) -> dict:
    """Stand-in for an aligner: one pseudo-phone per letter, GOP drawn from a seeded RNG.

    ``quality`` in [0, 1] (e.g. a normalized human score) shifts the GOP
    distribution so the toy features carry some signal; None gives noise.
    """
    seed = int.from_bytes(hashlib.sha256(utterance_id.encode()).digest()[:8], "little")
    rng = np.random.default_rng(seed)
    n = max(1, sum(ch.isalpha() for ch in transcript))
    centre = -2.0 * (1.0 - quality) if quality is not None else -1.0
    gop = centre - np.abs(rng.normal(0.0, 0.5, size=n))
    return {
        "utterance_id": utterance_id,
        "features": {
            "gop_mean": float(gop.mean()),
            "gop_std": float(gop.std()),
            "gop_min": float(gop.min()),
            "gop_frac_below_minus1": float(np.mean(gop < -1.0)),
            "num_phones": float(n),
        },
    }


def write_toy_gop(manifest: DatasetManifest, path: str | Path, dimension: str | None = None) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        for u in manifest:
            quality = u.normalized_score(dimension) if dimension and dimension in u.scores else None
            f.write(json.dumps(toy_gop_record(u.utterance_id, u.transcript, quality)) + "\n")
    return path
