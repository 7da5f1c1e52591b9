"""CTC fine-tuning of an encoder on the learner corpus, with dev-WER checkpoint selection."""

from __future__ import annotations

import json
import logging
import shutil
import time
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .dataset import DatasetManifest, read_waveform
from .ssl_models import HFEncoder, TinySSLEncoder

logger = logging.getLogger(__name__)

BLANK = "<blank>"
SPACE = "|"
APOSTROPHE = "'"


class FinetuneError(Exception):
    pass


class DivergenceError(FinetuneError):
    def __init__(self, message: str, last_checkpoint: CheckpointRecord | None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


# --------------------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class LetterVocabulary:
    """Letter alphabet for CTC.

    Order is fixed: blank first, then the corpus letters sorted, then the
    apostrophe, then the word delimiter ``|``.
    """

    tokens: tuple[str, ...]

    def __post_init__(self):
        for special in (BLANK, SPACE, APOSTROPHE):
            if self.tokens.count(special) != 1:
                raise ValueError(f"vocabulary must contain {special!r} exactly once")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate vocabulary tokens")

    @property
    def blank(self) -> int:
        return self.tokens.index(BLANK)

    @property
    def space(self) -> int:
        return self.tokens.index(SPACE)

    @property
    def apostrophe(self) -> int:
        return self.tokens.index(APOSTROPHE)

    def __len__(self) -> int:
        return len(self.tokens)

    def normalize(self, text: str) -> str:
        """Upper-case, drop out-of-vocabulary characters, squeeze whitespace."""
        known = set(self.tokens)
        kept, dropped = [], set()
        for ch in text.upper():
            if ch.isspace():
                kept.append(" ")
            elif ch in known and ch not in (BLANK, SPACE):
                kept.append(ch)
            else:
                dropped.add(ch)
        if dropped:
            logger.warning("dropping out-of-vocabulary characters %s", "".join(sorted(dropped)))
        return " ".join("".join(kept).split())

    def encode(self, text: str) -> list[int]:
        index = {t: i for i, t in enumerate(self.tokens)}
        return [self.space if ch == " " else index[ch] for ch in self.normalize(text)]

    def decode(self, ids: Iterable[int]) -> str:
        chars = []
        for i in ids:
            if i == self.blank:
                continue
            chars.append(" " if i == self.space else self.tokens[i])
        return " ".join("".join(chars).split())

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> LetterVocabulary:
        return cls(tuple(Path(path).read_text(encoding="utf-8").splitlines()))


def build_vocabulary(transcripts: Sequence[str]) -> LetterVocabulary:
    if not transcripts or not any(t.strip() for t in transcripts):
        raise ValueError("cannot build a vocabulary from no transcripts")
    letters = sorted({ch for t in transcripts for ch in t.upper() if ch.isalpha()})
    return LetterVocabulary((BLANK, *letters, APOSTROPHE, SPACE))


# --------------------------------------------------------------------------- decoding / WER


def greedy_decode(frame_labels: Sequence[int], blank: int = 0) -> list[int]:
    """Collapse repeated labels, then drop blanks."""
    out = []
    prev = None
    for label in frame_labels:
        label = int(label)
        if label != prev and label != blank:
            out.append(label)
        prev = label
    return out


def edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    row = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, 1):
        prev_diag, row[0] = row[0], i
        for j, h in enumerate(hyp, 1):
            cur = min(row[j] + 1, row[j - 1] + 1, prev_diag + (r != h))
            prev_diag, row[j] = row[j], cur
    return row[-1]


def word_error_rate(references: Sequence[str], hypotheses: Sequence[str]) -> float:
    """Corpus WER: summed word edit distance over summed reference length."""
    errors = sum(edit_distance(r.split(), h.split()) for r, h in zip(references, hypotheses, strict=True))
    words = sum(len(r.split()) for r in references)
    if words == 0:
        raise ValueError("references contain no words")
    return errors / words


# --------------------------------------------------------------------------- model


class CTCModel(nn.Module):
    """Encoder plus a kernel-1 convolution to vocabulary logits."""

    def __init__(self, encoder: nn.Module, hidden_dim: int, vocab_size: int):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Conv1d(hidden_dim, vocab_size, kernel_size=1)

    def forward(self, wave: torch.Tensor, lengths: torch.Tensor | None = None):
        hidden, frame_lengths = self.encoder(wave, lengths)
        logits = self.head(hidden.transpose(1, 2)).transpose(1, 2)
        return logits.log_softmax(-1), frame_lengths


def hidden_size(encoder: nn.Module) -> int:
    if isinstance(encoder, TinySSLEncoder):
        return encoder.config.hidden_dim
    return encoder.config.hidden_size


@dataclass
class FinetuneConfig:
    total_steps: int = 150_000
    batch_size: int = 8
    peak_learning_rate: float = 1e-4
    warmup_steps: int = 1000
    frozen_components: tuple[str, ...] = ("feature_encoder",)
    checkpoint_interval: int = 1000
    decay: str = "constant"  # or "linear" to zero at total_steps
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.warmup_steps < 0 or self.checkpoint_interval < 1:
            raise ValueError("invalid fine-tuning schedule")
        if self.decay not in ("constant", "linear"):
            raise ValueError(f"unknown decay {self.decay!r}")


def learning_rate_at(step: int, config: FinetuneConfig) -> float:
    """Linear warmup from zero to the peak rate, then constant (or linear decay)."""
    peak = config.peak_learning_rate
    if config.warmup_steps and step < config.warmup_steps:
        return peak * step / config.warmup_steps
    if config.decay == "linear":
        span = max(config.total_steps - config.warmup_steps, 1)
        return peak * max(0.0, 1.0 - (step - config.warmup_steps) / span)
    return peak


@dataclass(frozen=True)
class CheckpointRecord:
    step: int
    dev_wer: float
    path: Path

    def __post_init__(self):
        if not self.dev_wer >= 0:
            raise ValueError("dev_wer must be non-negative")


def select_best(records: Sequence[CheckpointRecord]) -> CheckpointRecord:
    """Lowest dev WER; earliest step wins ties."""
    if not records:
        raise FinetuneError("no checkpoints were evaluated")
    return min(records, key=lambda r: (r.dev_wer, r.step))


@dataclass
class FinetuneResult:
    best: CheckpointRecord
    records: list[CheckpointRecord]
    losses: list[float] = field(default_factory=list)


def _pad(waves: list[np.ndarray]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(w) for w in waves], dtype=torch.long)
    batch = torch.zeros(len(waves), int(lengths.max()))
    for i, w in enumerate(waves):
        batch[i, : len(w)] = torch.from_numpy(_normalize(w))
    return batch, lengths


def _normalize(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float32)
    return (w - w.mean()) / np.sqrt(w.var() + 1e-7)


@torch.no_grad()
def transcribe(model: CTCModel, waveform: np.ndarray, vocab: LetterVocabulary) -> str:
    was_training = model.training
    model.eval()
    try:
        x = torch.from_numpy(_normalize(waveform))[None, :]
        log_probs, _ = model(x)
        return vocab.decode(greedy_decode(log_probs[0].argmax(-1).tolist(), vocab.blank))
    finally:
        model.train(was_training)


def dev_wer(
    model: CTCModel,
    manifest_dev: DatasetManifest,
    vocab: LetterVocabulary,
    load_audio: Callable[[Path], np.ndarray] = read_waveform,
) -> float:
    if len(manifest_dev) == 0:
        raise FinetuneError("development set is empty")
    refs = [vocab.normalize(u.transcript) for u in manifest_dev]
    hyps = [transcribe(model, load_audio(u.audio_path), vocab) for u in manifest_dev]
    return word_error_rate(refs, hyps)


def save_checkpoint(model: CTCModel, vocab: LetterVocabulary, path: Path, step: int) -> Path:
    """Write an encoder checkpoint loadable by ``encoder.load_backend``."""
    extra = {"ctc_head": model.head.state_dict(), "vocab": list(vocab.tokens), "step": step}
    if isinstance(model.encoder, TinySSLEncoder):
        path = path.with_suffix(".pt")
        model.encoder.save(path, extra)
    elif isinstance(model.encoder, HFEncoder):
        model.encoder.model.save_pretrained(path)
        torch.save(extra, path / "ctc_head.pt")
    else:
        raise TypeError(f"cannot checkpoint encoder of type {type(model.encoder).__name__}")
    return path


def _remove(path: Path) -> None:
    if path.is_dir():
        shutil.rmtree(path, ignore_errors=True)
    elif path.exists():
        path.unlink()


def _freeze(encoder: nn.Module, components: Iterable[str]) -> None:
    for name in components:
        if name == "feature_encoder":
            params = encoder.conv_parameters()
        else:
            params = encoder.get_submodule(name).parameters()
        for p in params:
            p.requires_grad_(False)


def finetune(
    encoder: nn.Module,
    manifest_train: DatasetManifest,
    manifest_dev: DatasetManifest,
    vocab: LetterVocabulary,
    config: FinetuneConfig,
    out_dir: str | Path,
    load_audio: Callable[[Path], np.ndarray] = read_waveform,
) -> FinetuneResult:
    """Train ``encoder`` + CTC head; keep the checkpoint with the lowest dev WER.

    Checkpoints are written every ``checkpoint_interval`` steps and after the
    final step; only the best and the most recent are kept on disk.
    """
    if len(manifest_dev) == 0:
        raise FinetuneError("development set is empty")
    if len(manifest_train) == 0:
        raise FinetuneError("training set is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / "vocab.txt")
    (out_dir / "config.json").write_text(json.dumps(asdict(config), indent=1) + "\n", encoding="utf-8")
    wer_log = out_dir / "wer_log.jsonl"

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = CTCModel(encoder, hidden_size(encoder), len(vocab))
    _freeze(encoder, config.frozen_components)
    params = [p for p in model.parameters() if p.requires_grad]
    optim = torch.optim.Adam(params, lr=config.peak_learning_rate, betas=config.adam_betas, eps=config.adam_eps)
    sched = torch.optim.lr_scheduler.LambdaLR(
        optim, lambda s: learning_rate_at(s, config) / config.peak_learning_rate
    )
    ctc = nn.CTCLoss(blank=vocab.blank, zero_infinity=True)

    utts = list(manifest_train)
    waves = [load_audio(u.audio_path) for u in utts]
    targets = [torch.tensor(vocab.encode(u.transcript), dtype=torch.long) for u in utts]

    records: list[CheckpointRecord] = []
    losses: list[float] = []
    latest: Path | None = None
    order: list[int] = []
    model.train()
    for step in range(config.total_steps):
        if len(order) < config.batch_size:
            order.extend(rng.permutation(len(utts)).tolist())
        batch, order = order[: config.batch_size], order[config.batch_size:]
        wave, lengths = _pad([waves[i] for i in batch])
        log_probs, frame_lengths = model(wave, lengths)
        tgt = [targets[i] for i in batch]
        loss = ctc(
            log_probs.transpose(0, 1),
            torch.cat(tgt),
            frame_lengths,
            torch.tensor([len(t) for t in tgt], dtype=torch.long),
        )
        if not torch.isfinite(loss):
            best = select_best(records) if records else None
            raise DivergenceError(f"CTC loss became {loss.item()} at step {step}", best)
        optim.zero_grad()
        loss.backward()
        optim.step()
        sched.step()
        losses.append(loss.item())

        done = step + 1
        if done % config.checkpoint_interval == 0 or done == config.total_steps:
            wer = dev_wer(model, manifest_dev, vocab, load_audio)
            path = save_checkpoint(model, vocab, out_dir / f"step_{done}", done)
            with open(wer_log, "a", encoding="utf-8") as f:
                f.write(json.dumps({"step": done, "wer": wer, "timestamp": time.time()}) + "\n")
            prev_best = select_best(records).path if records else None
            records.append(CheckpointRecord(done, wer, path))
            best_path = select_best(records).path
            for old in {latest, prev_best} - {None, best_path, path}:
                _remove(old)
            latest = path
            logger.info("step %d: loss %.4f dev WER %.4f", done, losses[-1], wer)
    return FinetuneResult(select_best(records), records, losses)
