"""Utterance-level scoring heads and their MSE training loop.

The ``blstm`` head has two branches. Audio frames go through a
bidirectional LSTM and a linear projection; the script's characters go
through an embedding, a second bidirectional LSTM and a linear projection.
Each branch is mean-pooled over its own time axis, the two pooled vectors
are concatenated, and one linear layer maps them to the score.

``mlp`` and ``lr`` heads pool the audio frames and ignore the script.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from .dataset import DatasetManifest, Fold, denormalize_score

logger = logging.getLogger(__name__)

HEADS = ("blstm", "mlp", "lr")
PAD, UNK = "<pad>", "<unk>"

FeatureSource = Callable[[str], np.ndarray]


class ScorerError(Exception):
    pass


class TrainingDivergedError(ScorerError):
    pass


def build_char_vocabulary(scripts: Iterable[str]) -> tuple[str, ...]:
    """Text-branch symbols: padding, unknown, then the sorted upper-cased characters."""
    chars = sorted({ch for s in scripts for ch in s.upper()})
    return (PAD, UNK, *chars)


@dataclass
class ScorerConfig:
    head: str = "blstm"
    audio_dim: int = 1024
    blstm_hidden: int = 128
    char_embedding_dim: int = 64
    projection_dim: int | None = None  # per-branch width after the BLSTM; defaults to blstm_hidden
    mlp_hidden: int = 256
    vocabulary: tuple[str, ...] = (PAD, UNK)
    target_dimension: str = "holistic"
    mix_layers: int = 0  # >0: input is a full layer stack mixed by learned softmax weights

    def __post_init__(self):
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}; expected one of {HEADS}")
        if self.blstm_hidden < 1 or self.char_embedding_dim < 1 or self.audio_dim < 1:
            raise ValueError("blstm_hidden, char_embedding_dim and audio_dim must be >= 1")
        self.vocabulary = tuple(self.vocabulary)
        if self.vocabulary[:2] != (PAD, UNK):
            raise ValueError("text vocabulary must start with <pad>, <unk>")

    @property
    def proj_dim(self) -> int:
        return self.projection_dim or self.blstm_hidden


@dataclass
class TrainRunConfig:
    learning_rate: float = 1e-4
    early_stopping_patience: int = 3
    max_epochs: int = 100
    batch_size: int = 8
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.early_stopping_patience < 1:
            raise ValueError("patience must be >= 1")
        if self.optimizer != "adam":
            raise ValueError("only the adam optimizer is supported")


# --------------------------------------------------------------------------- modules


def masked_mean(x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    """Mean over axis 1 of ``(B, T, F)`` counting only the first ``lengths[b]`` steps."""
    mask = (torch.arange(x.shape[1], device=x.device)[None, :] < lengths[:, None]).to(x.dtype)
    return (x * mask[..., None]).sum(1) / lengths.to(x.dtype)[:, None]


def run_recurrence(rnn: nn.Module, x: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
    if isinstance(rnn, nn.LSTM):
        if bool((lengths == x.shape[1]).all()):
            return rnn(x)[0]
        packed = pack_padded_sequence(x, lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = rnn(packed)
        return pad_packed_sequence(out, batch_first=True, total_length=x.shape[1])[0]
    return rnn(x)[0]


class LayerMixer(nn.Module):
    """Softmax-weighted sum over a stack of layers, ``(B, L, T, D) -> (B, T, D)``."""

    def __init__(self, num_layers: int):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(num_layers))

    def weights(self) -> torch.Tensor:
        return self.logits.softmax(0)

    def forward(self, stack: torch.Tensor) -> torch.Tensor:
        return torch.einsum("l,bltd->btd", self.weights(), stack)


class ScoringHead(nn.Module):
    def __init__(self, config: ScorerConfig):
        super().__init__()
        self.config = config
        self.mixer = LayerMixer(config.mix_layers) if config.mix_layers else None
        D, H, P = config.audio_dim, config.blstm_hidden, config.proj_dim
        if config.head == "blstm":
            self.audio_rnn = nn.LSTM(D, H, batch_first=True, bidirectional=True)
            self.audio_proj = nn.Linear(2 * H, P)
            self.embedding = nn.Embedding(len(config.vocabulary), config.char_embedding_dim, padding_idx=0)
            self.text_rnn = nn.LSTM(config.char_embedding_dim, H, batch_first=True, bidirectional=True)
            self.text_proj = nn.Linear(2 * H, P)
            self.output = nn.Linear(2 * P, 1)
        elif config.head == "mlp":
            self.hidden = nn.Linear(D, config.mlp_hidden)
            self.output = nn.Linear(config.mlp_hidden, 1)
        else:
            self.output = nn.Linear(D, 1)

    def branch_vectors(self, audio, audio_lengths, chars=None, char_lengths=None):
        """Pooled branch outputs; ``(audio_vec, text_vec)`` for blstm, ``(pooled, None)`` otherwise."""
        if self.mixer is not None:
            audio = self.mixer(audio)
        if audio.shape[-1] != self.config.audio_dim:
            raise ScorerError(f"audio feature width {audio.shape[-1]} != configured audio_dim {self.config.audio_dim}")
        if self.config.head != "blstm":
            return masked_mean(audio, audio_lengths), None
        a = self.audio_proj(run_recurrence(self.audio_rnn, audio, audio_lengths))
        t = self.text_proj(run_recurrence(self.text_rnn, self.embedding(chars), char_lengths))
        return masked_mean(a, audio_lengths), masked_mean(t, char_lengths)

    def forward(self, audio, audio_lengths, chars=None, char_lengths=None) -> torch.Tensor:
        a, t = self.branch_vectors(audio, audio_lengths, chars, char_lengths)
        if self.config.head == "blstm":
            return self.output(torch.cat([a, t], dim=-1)).squeeze(-1)
        if self.config.head == "mlp":
            return self.output(torch.relu(self.hidden(a))).squeeze(-1)
        return self.output(a).squeeze(-1)


# --------------------------------------------------------------------------- scorer


class Scorer:
    """A scoring head bundled with its config and the label scale it was trained on.

    The head works on labels mapped to [0, 1]; :meth:`predict` maps back.
    """

    def __init__(self, config: ScorerConfig, score_scale: tuple[float, float] = (0.0, 1.0),
                 head: ScoringHead | None = None, dtype: torch.dtype = torch.float32):
        self.config = config
        self.score_scale = tuple(score_scale)
        self.head = head if head is not None else ScoringHead(config).to(dtype)
        self._warned_unknown = False

    @property
    def dtype(self) -> torch.dtype:
        return next(self.head.parameters()).dtype

    def char_ids(self, script: str) -> list[int]:
        index = {c: i for i, c in enumerate(self.config.vocabulary)}
        ids = [index.get(ch, 1) for ch in script.upper()]
        if 1 in ids and not self._warned_unknown:
            logger.warning("script characters outside the text vocabulary mapped to <unk>")
            self._warned_unknown = True
        return ids

    def batch(self, feats: Sequence[np.ndarray], scripts: Sequence[str]):
        dtype = self.dtype
        lengths = torch.tensor([f.shape[-2] for f in feats], dtype=torch.long)
        shape = (len(feats), *feats[0].shape[:-2], int(lengths.max()), feats[0].shape[-1])
        audio = torch.zeros(shape, dtype=dtype)
        for i, f in enumerate(feats):
            audio[i, ..., : f.shape[-2], :] = torch.tensor(np.asarray(f), dtype=dtype)
        if self.config.head != "blstm":
            return audio, lengths, None, None
        ids = [self.char_ids(s) for s in scripts]
        char_lengths = torch.tensor([len(x) for x in ids], dtype=torch.long)
        chars = torch.zeros(len(ids), int(char_lengths.max()), dtype=torch.long)
        for i, x in enumerate(ids):
            chars[i, : len(x)] = torch.tensor(x, dtype=torch.long)
        return audio, lengths, chars, char_lengths

    def forward_normalized(self, audio_repr: np.ndarray, script: str) -> float:
        self._check(audio_repr, script)
        with torch.no_grad():
            self.head.eval()
            return float(self.head(*self.batch([audio_repr], [script]))[0])

    def predict(self, audio_repr: np.ndarray, script: str) -> float:
        return denormalize_score(self.forward_normalized(audio_repr, script), self.score_scale)

    def _check(self, audio_repr: np.ndarray, script: str) -> None:
        if audio_repr.shape[-2] < 1:
            raise ScorerError("audio representation has no frames")
        if audio_repr.shape[-1] != self.config.audio_dim:
            raise ScorerError(f"expected audio_dim {self.config.audio_dim}, got {audio_repr.shape[-1]}")
        if self.config.head == "blstm" and not script.strip():
            raise ScorerError("script is empty")

    def state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.head.state_dict().items()}

    def save(self, path: str | Path) -> None:
        torch.save(
            {"config": asdict(self.config), "score_scale": list(self.score_scale), "state_dict": self.head.state_dict()},
            path,
        )

    @classmethod
    def load(cls, path: str | Path) -> Scorer:
        blob = torch.load(path, map_location="cpu", weights_only=False)
        cfg = blob["config"]
        cfg["vocabulary"] = tuple(cfg["vocabulary"])
        scorer = cls(ScorerConfig(**cfg), tuple(blob["score_scale"]))
        scorer.head = scorer.head.to(next(iter(blob["state_dict"].values())).dtype)
        scorer.head.load_state_dict(blob["state_dict"])
        return scorer


def forward(audio_repr: np.ndarray, script: str, scorer: Scorer) -> float:
    """Score one utterance on the original label scale."""
    return scorer.predict(audio_repr, script)


# --------------------------------------------------------------------------- training


class EarlyStopping:
    """Stop once validation loss has not improved for ``patience`` consecutive epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch: int | None = None
        self.bad_epochs = 0

    def step(self, epoch: int, val_loss: float) -> bool:
        """Record an epoch; return True when it is the new best."""
        if val_loss < self.best_loss:
            self.best_loss, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


@dataclass
class TrainResult:
    scorer: Scorer
    log: list[tuple[int, float, float]]  # (epoch, train_loss, val_loss)
    best_epoch: int
    best_val_loss: float
    stopped_epoch: int
    never_improved: bool = False
    excluded: list[str] = field(default_factory=list)


def _collect(features: FeatureSource, manifest: DatasetManifest, ids: Sequence[str], dim: str):
    by_id = manifest.by_id()
    feats, scripts, targets = [], [], []
    for uid in ids:
        utt = by_id[uid]
        if dim not in utt.scores:
            raise ScorerError(f"{uid}: no label for dimension {dim!r}")
        feats.append(np.asarray(features(uid)))
        scripts.append(utt.transcript)
        targets.append(utt.normalized_score(dim))
    return feats, scripts, np.asarray(targets)


def _mse(scorer: Scorer, feats, scripts, targets, batch_size: int) -> float:
    if not feats:
        return math.nan
    scorer.head.eval()
    total = 0.0
    with torch.no_grad():
        for s in range(0, len(feats), batch_size):
            pred = scorer.head(*scorer.batch(feats[s:s + batch_size], scripts[s:s + batch_size]))
            y = torch.as_tensor(targets[s:s + batch_size], dtype=pred.dtype)
            total += float(((pred - y) ** 2).sum())
    return total / len(feats)


def train_scorer(
    features: FeatureSource,
    manifest: DatasetManifest,
    fold: Fold,
    config: ScorerConfig,
    run: TrainRunConfig,
    *,
    log_path: str | Path | None = None,
    dtype: torch.dtype = torch.float32,
) -> TrainResult:
    """Minimise MSE on normalized labels with Adam; early-stop on validation MSE.

    Returns the scorer restored to its best-validation epoch.
    """
    dim = config.target_dimension
    if not fold.train_ids:
        raise ScorerError("training split is empty")
    train = _collect(features, manifest, fold.train_ids, dim)
    val = _collect(features, manifest, fold.validation_ids, dim)
    if not fold.validation_ids:
        logger.warning("no validation utterances; early stopping monitors training loss")
        val = train
    scale = manifest.by_id()[fold.train_ids[0]].score_scale[dim]

    torch.manual_seed(run.seed)
    scorer = Scorer(config, scale, dtype=dtype)
    optim = torch.optim.Adam(scorer.head.parameters(), lr=run.learning_rate)
    rng = np.random.default_rng(run.seed)
    stopper = EarlyStopping(run.early_stopping_patience)
    best_state = scorer.state()
    log: list[tuple[int, float, float]] = []
    feats, scripts, targets = train
    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        epoch = 0
        for epoch in range(1, run.max_epochs + 1):
            scorer.head.train()
            order = rng.permutation(len(feats))
            total = 0.0
            for s in range(0, len(order), run.batch_size):
                idx = order[s:s + run.batch_size]
                pred = scorer.head(*scorer.batch([feats[i] for i in idx], [scripts[i] for i in idx]))
                y = torch.as_tensor(targets[idx], dtype=pred.dtype)
                loss = ((pred - y) ** 2).mean()
                if not torch.isfinite(loss):
                    raise TrainingDivergedError(
                        f"non-finite training loss at epoch {epoch}, batch {s // run.batch_size}"
                    )
                optim.zero_grad()
                loss.backward()
                optim.step()
                total += loss.item() * len(idx)
            train_loss = total / len(feats)
            val_loss = _mse(scorer, *val, run.batch_size)
            if not math.isfinite(val_loss):
                raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
            log.append((epoch, train_loss, val_loss))
            if log_file:
                log_file.write(json.dumps({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss}) + "\n")
            if stopper.step(epoch, val_loss):
                best_state = scorer.state()
            if stopper.should_stop:
                break
    finally:
        if log_file:
            log_file.close()
    scorer.head.load_state_dict(best_state)
    return TrainResult(scorer, log, stopper.best_epoch, stopper.best_loss, epoch,
                       never_improved=stopper.best_epoch == 1 and len(log) > 1)


class Predictions(dict):
    """utterance_id -> predicted score; ``excluded`` lists ids lacking features."""

    def __init__(self, *args, excluded: Sequence[str] = (), **kwargs):
        super().__init__(*args, **kwargs)
        self.excluded = list(excluded)


def predict_batch(
    features: FeatureSource,
    utterances: Iterable,
    scorer: Scorer,
    batch_size: int = 16,
) -> Predictions:
    utts = list(utterances)
    ready, excluded = [], []
    for utt in utts:
        try:
            ready.append((utt, np.asarray(features(utt.utterance_id))))
        except KeyError:
            excluded.append(utt.utterance_id)
    if excluded:
        logger.warning("%d utterance(s) without features excluded from prediction", len(excluded))
    # fixed batch composition regardless of input order
    ready.sort(key=lambda pair: pair[0].utterance_id)
    out = Predictions(excluded=excluded)
    scorer.head.eval()
    with torch.no_grad():
        for s in range(0, len(ready), batch_size):
            chunk = ready[s:s + batch_size]
            pred = scorer.head(*scorer.batch([f for _, f in chunk], [u.transcript for u, _ in chunk]))
            for (u, _), p in zip(chunk, pred.tolist()):
                out[u.utterance_id] = denormalize_score(p, scorer.score_scale)
    return out
