"""On-disk feature archive and the corpus extraction driver.

Layout of an archive directory (see ``docs/feature_archive.md``)::

    archive.json        provenance: spec dict and its hash, store kind, dtype
    index.tsv           append-only "utterance_id<TAB>records/<sha1>.bin" lines
    records/<sha1>.bin  one binary record per utterance

Record files start with a fixed 88-byte little-endian header followed by
the payload; see :data:`HEADER`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import threading
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .dataset import DatasetManifest, read_waveform
from .encoder import EncoderBackend, LayerSelection, LayerStack, aggregate, encode

logger = logging.getLogger(__name__)

MAGIC = b"PSFA"
VERSION = 1
# magic, version, kind, dtype, spec_hash, T, D, L, D_conv, payload sha256
HEADER = struct.Struct("<4sHBB32sIIII32s")
KIND_MATRIX, KIND_STACK = 0, 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<f2")}
DTYPE_CODES = {v: k for k, v in DTYPES.items()}


class ArchiveError(Exception):
    pass


class ArchiveMismatchError(ArchiveError):
    """Existing archive was built with a different encoder/selection."""


class CorruptRecordError(ArchiveError):
    pass


def spec_hash(spec: dict[str, Any]) -> str:
    return hashlib.sha256(json.dumps(spec, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def encoder_archive_spec(backend: EncoderBackend, selection: LayerSelection | None) -> dict[str, Any]:
    return {
        "source": "encoder",
        "encoder": backend.spec.to_json(),
        "checkpoint_hash": backend.checkpoint_hash(),
        "selection": selection.label() if selection is not None else None,
    }


def _record_name(utterance_id: str) -> str:
    return hashlib.sha1(utterance_id.encode("utf-8")).hexdigest() + ".bin"


class FeatureArchive:
    def __init__(self, root: str | Path, meta: dict[str, Any]):
        self.root = Path(root)
        self.meta = meta
        self.spec = meta["spec"]
        self.spec_hash = meta["spec_hash"]
        self.store = meta["store"]
        self.dtype = np.dtype(meta["dtype"]).newbyteorder("<")
        self._lock = threading.Lock()

    # ---- construction

    @classmethod
    def open_or_create(cls, root: str | Path, spec: dict[str, Any], store: str = "matrix",
                       dtype: str = "float32") -> FeatureArchive:
        if store not in ("matrix", "stack"):
            raise ValueError(f"store must be 'matrix' or 'stack', got {store!r}")
        root = Path(root)
        meta_path = root / "archive.json"
        h = spec_hash(spec)
        if meta_path.exists():
            archive = cls.open(root)
            if archive.spec_hash != h or archive.store != store:
                raise ArchiveMismatchError(
                    f"{root} holds features for a different spec "
                    f"(cached {archive.spec_hash[:12]}/{archive.store}, requested {h[:12]}/{store}); "
                    "use a fresh cache directory"
                )
            return archive
        (root / "records").mkdir(parents=True, exist_ok=True)
        meta = {"format": "pronscore-feature-archive", "version": VERSION, "spec": spec, "spec_hash": h,
                "store": store, "dtype": str(np.dtype(dtype))}
        tmp = meta_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        os.replace(tmp, meta_path)
        (root / "index.tsv").touch()
        return cls(root, meta)

    @classmethod
    def open(cls, root: str | Path) -> FeatureArchive:
        meta_path = Path(root) / "archive.json"
        if not meta_path.is_file():
            raise ArchiveError(f"no feature archive at {root}")
        return cls(root, json.loads(meta_path.read_text(encoding="utf-8")))

    # ---- index

    def ids(self) -> list[str]:
        out: dict[str, None] = {}
        index = self.root / "index.tsv"
        if index.exists():
            for line in index.read_text(encoding="utf-8").splitlines():
                if line:
                    out[line.split("\t", 1)[0]] = None
        return [u for u in out if self.path_for(u).exists()]

    def __contains__(self, utterance_id: str) -> bool:
        return self.path_for(utterance_id).exists()

    def __len__(self) -> int:
        return len(self.ids())

    def path_for(self, utterance_id: str) -> Path:
        return self.root / "records" / _record_name(utterance_id)

    # ---- records

    def _write(self, utterance_id: str, kind: int, arrays: list[np.ndarray], dims: tuple[int, int, int, int]):
        payload = b"".join(np.ascontiguousarray(a, dtype=self.dtype).tobytes() for a in arrays)
        header = HEADER.pack(MAGIC, VERSION, kind, DTYPE_CODES[self.dtype], bytes.fromhex(self.spec_hash),
                             *dims, hashlib.sha256(payload).digest())
        path = self.path_for(utterance_id)
        tmp = path.with_name(f"{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        with open(tmp, "wb") as f:
            f.write(header)
            f.write(payload)
        os.replace(tmp, path)
        with self._lock, open(self.root / "index.tsv", "a", encoding="utf-8") as f:
            f.write(f"{utterance_id}\trecords/{path.name}\n")

    def write_matrix(self, utterance_id: str, matrix: np.ndarray) -> None:
        if self.store != "matrix":
            raise ArchiveError("this archive stores full layer stacks")
        matrix = np.asarray(matrix)
        if matrix.ndim != 2:
            raise ValueError(f"expected a T x D matrix, got shape {matrix.shape}")
        self._write(utterance_id, KIND_MATRIX, [matrix], (matrix.shape[0], matrix.shape[1], 0, 0))

    def write_stack(self, stack: LayerStack) -> None:
        if self.store != "stack":
            raise ArchiveError("this archive stores aggregated matrices")
        T, D = stack.num_frames, stack.hidden_dim
        arrays = [stack.conv_features, *stack.layer_states]
        self._write(stack.utterance_id, KIND_STACK, arrays, (T, D, stack.num_layers, stack.conv_features.shape[1]))

    def _read(self, utterance_id: str):
        path = self.path_for(utterance_id)
        if not path.exists():
            raise KeyError(utterance_id)
        blob = path.read_bytes()
        if len(blob) < HEADER.size:
            raise CorruptRecordError(f"{utterance_id}: truncated record")
        magic, version, kind, dcode, shash, T, D, L, Dc, checksum = HEADER.unpack_from(blob)
        if magic != MAGIC or version != VERSION or dcode not in DTYPES:
            raise CorruptRecordError(f"{utterance_id}: bad record header")
        payload = blob[HEADER.size:]
        if hashlib.sha256(payload).digest() != checksum:
            raise CorruptRecordError(f"{utterance_id}: checksum mismatch")
        if shash.hex() != self.spec_hash:
            raise CorruptRecordError(f"{utterance_id}: record written for a different spec")
        data = np.frombuffer(payload, dtype=DTYPES[dcode])
        return kind, data, (T, D, L, Dc)

    def verify(self, utterance_id: str) -> bool:
        try:
            self._read(utterance_id)
        except (KeyError, CorruptRecordError):
            return False
        return True

    def read_matrix(self, utterance_id: str) -> np.ndarray:
        kind, data, (T, D, _, _) = self._read(utterance_id)
        if kind != KIND_MATRIX:
            raise ArchiveError(f"{utterance_id}: record is a layer stack; use read_stack")
        return data.reshape(T, D)

    def read_stack(self, utterance_id: str) -> LayerStack:
        kind, data, (T, D, L, Dc) = self._read(utterance_id)
        if kind != KIND_STACK:
            raise ArchiveError(f"{utterance_id}: record is an aggregated matrix")
        conv = data[: T * Dc].reshape(T, Dc)
        layers = data[T * Dc:].reshape(L, T, D)
        return LayerStack(utterance_id, conv, tuple(layers))

    def features(self, utterance_id: str, selection: LayerSelection | None = None) -> np.ndarray:
        """T x D matrix for an utterance, aggregating on the fly for stack archives."""
        if self.store == "matrix":
            stored = self.spec.get("selection")
            if selection is not None and stored is not None and selection.label() != stored:
                raise ArchiveMismatchError(f"archive holds {stored!r}, requested {selection.label()!r}")
            return self.read_matrix(utterance_id)
        if selection is None:
            raise ValueError("stack archives need a layer selection")
        return aggregate(self.read_stack(utterance_id), selection)


@dataclass
class ExtractionResult:
    archive: FeatureArchive
    encoded: int = 0
    cache_hits: int = 0
    reextracted: int = 0
    failed: dict[str, str] = field(default_factory=dict)


def extract_corpus(
    manifest: DatasetManifest,
    backend: EncoderBackend,
    selection: LayerSelection | None,
    cache_dir: str | Path,
    *,
    store: str = "matrix",
    dtype: str = "float32",
    workers: int = 1,
    backend_factory: Callable[[], EncoderBackend] | None = None,
    load_audio: Callable[[Path], np.ndarray] = read_waveform,
) -> ExtractionResult:
    """Encode every utterance of ``manifest`` into ``cache_dir``.

    Utterances with a valid record are skipped; corrupt records are
    re-encoded. With ``workers > 1`` each thread owns a backend built by
    ``backend_factory``.
    """
    if store == "matrix" and selection is None:
        raise ValueError("matrix archives need a layer selection")
    if selection is not None:
        selection.check(backend.spec.num_transformer_layers)
    archive = FeatureArchive.open_or_create(cache_dir, encoder_archive_spec(backend, selection), store, dtype)
    result = ExtractionResult(archive)

    todo = []
    for utt in manifest:
        uid = utt.utterance_id
        if uid in archive:
            if archive.verify(uid):
                result.cache_hits += 1
                continue
            logger.warning("%s: corrupt cache record, re-extracting", uid)
            result.reextracted += 1
        todo.append(utt)

    local = threading.local()

    def backend_for_thread() -> EncoderBackend:
        if workers <= 1 or backend_factory is None:
            return backend
        if not hasattr(local, "backend"):
            local.backend = backend_factory()
        return local.backend

    def work(utt) -> tuple[str, str | None]:
        try:
            stack = encode(load_audio(utt.audio_path), backend_for_thread(), utt.utterance_id)
            if store == "stack":
                archive.write_stack(stack)
            else:
                archive.write_matrix(utt.utterance_id, aggregate(stack, selection))
        except Exception as exc:  # recorded per utterance, extraction continues
            return utt.utterance_id, str(exc)
        return utt.utterance_id, None

    if workers > 1 and backend_factory is not None:
        with ThreadPoolExecutor(workers) as pool:
            outcomes = list(pool.map(work, todo))
    else:
        outcomes = [work(u) for u in todo]
    for uid, err in outcomes:
        if err is None:
            result.encoded += 1
        else:
            logger.error("extraction failed for %s", err)
            result.failed[uid] = err
    return result
