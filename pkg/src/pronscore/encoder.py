"""Encoder backends, per-utterance layer stacks and layer aggregation."""

from __future__ import annotations

import abc
import logging
import re
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .dataset import SAMPLE_RATE
from .ssl_models import (
    HFEncoder,
    TinyEncoderConfig,
    TinySSLEncoder,
    load_hf_encoder,
    min_samples,
    state_hash,
)

logger = logging.getLogger(__name__)

FAMILIES = ("wav2vec2_style", "hubert_style")

# Published geometry of the checkpoints used for full-scale runs.
KNOWN_VARIANTS = {
    "base": (12, 768),
    "large": (24, 1024),
}


class EncoderError(Exception):
    pass


class AudioTooShortError(EncoderError):
    pass


@dataclass(frozen=True)
class EncoderSpec:
    family: str
    variant: str
    num_transformer_layers: int
    hidden_dim: int
    frame_stride: float = 0.02

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown encoder family {self.family!r}")
        if self.num_transformer_layers < 1 or self.hidden_dim < 1:
            raise ValueError("encoder needs at least one layer and a positive hidden size")
        size = self.variant.split("-")[0]
        if size in KNOWN_VARIANTS and (self.num_transformer_layers, self.hidden_dim) != KNOWN_VARIANTS[size]:
            L, D = KNOWN_VARIANTS[size]
            raise ValueError(f"{size} variants have L={L}, D={D}; got L={self.num_transformer_layers}, D={self.hidden_dim}")

    def to_json(self) -> dict:
        return {
            "family": self.family,
            "variant": self.variant,
            "num_transformer_layers": self.num_transformer_layers,
            "hidden_dim": self.hidden_dim,
            "frame_stride": self.frame_stride,
        }


@dataclass(frozen=True)
class LayerStack:
    utterance_id: str
    conv_features: np.ndarray  # T x D_c
    layer_states: tuple[np.ndarray, ...]  # L matrices, T x D, layer 1 first

    def __post_init__(self):
        if not self.layer_states:
            raise ValueError("LayerStack needs at least one transformer layer")
        shape = self.layer_states[0].shape
        if any(s.shape != shape for s in self.layer_states):
            raise ValueError(f"{self.utterance_id}: layer matrices differ in shape")
        if self.conv_features.shape[0] != shape[0]:
            raise ValueError(f"{self.utterance_id}: conv features have {self.conv_features.shape[0]} frames, layers {shape[0]}")

    @property
    def num_layers(self) -> int:
        return len(self.layer_states)

    @property
    def num_frames(self) -> int:
        return self.layer_states[0].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.layer_states[0].shape[1]

    def scaled(self, alpha: float) -> LayerStack:
        return LayerStack(self.utterance_id, alpha * self.conv_features, tuple(alpha * s for s in self.layer_states))


_SINGLE = re.compile(r"^single_layer[:(\[]?(\d+)[)\]]?$")


@dataclass(frozen=True)
class LayerSelection:
    mode: str  # "single_layer" | "uniform_average" | "weighted_average"
    index: int | None = None
    weights: tuple[float, ...] | None = None
    learnable: bool = False

    def __post_init__(self):
        if self.mode == "single_layer":
            if self.index is None or self.index < 0:
                raise ValueError("single_layer selection needs a non-negative index")
        elif self.mode == "weighted_average":
            if self.weights is not None:
                w = np.asarray(self.weights, dtype=float)
                if (w < 0).any() or abs(w.sum() - 1.0) > 1e-9:
                    raise ValueError("layer weights must be non-negative and sum to 1")
            elif not self.learnable:
                raise ValueError("weighted_average needs weights unless learnable")
        elif self.mode != "uniform_average":
            raise ValueError(f"unknown layer selection mode {self.mode!r}")

    @classmethod
    def single(cls, index: int) -> LayerSelection:
        return cls("single_layer", index=index)

    @classmethod
    def uniform(cls) -> LayerSelection:
        return cls("uniform_average")

    @classmethod
    def weighted(cls, weights: Sequence[float]) -> LayerSelection:
        return cls("weighted_average", weights=tuple(float(w) for w in weights))

    @classmethod
    def parse(cls, text: str) -> LayerSelection:
        """Parse ``uniform_average``, ``single_layer:3``, ``weighted_average:0.5,0.5``, ``learnable``."""
        text = text.strip()
        if text in ("uniform_average", "average", "all"):
            return cls.uniform()
        if text == "learnable":
            return cls("weighted_average", learnable=True)
        m = _SINGLE.match(text)
        if m:
            return cls.single(int(m.group(1)))
        if text.startswith("weighted_average:"):
            return cls.weighted([float(x) for x in text.split(":", 1)[1].split(",")])
        raise ValueError(f"cannot parse layer selection {text!r}")

    def label(self) -> str:
        if self.mode == "single_layer":
            return f"single_layer:{self.index}"
        if self.mode == "weighted_average":
            if self.learnable:
                return "learnable"
            return "weighted_average:" + ",".join(repr(w) for w in self.weights)
        return "uniform_average"

    def check(self, num_layers: int) -> None:
        if self.mode == "single_layer" and self.index > num_layers:
            raise IndexError(f"layer index {self.index} out of range for L={num_layers} (valid: 0..{num_layers})")
        if self.weights is not None and len(self.weights) != num_layers:
            raise ValueError(f"{len(self.weights)} layer weights given for L={num_layers}")


def aggregate(stack: LayerStack, selection: LayerSelection) -> np.ndarray:
    """Reduce a layer stack to a single ``T x D`` matrix.

    Index 0 selects the convolutional features; ``uniform_average`` and
    ``weighted_average`` range over the transformer layers only.
    """
    selection.check(stack.num_layers)
    if selection.mode == "single_layer":
        if selection.index == 0:
            return stack.conv_features
        return stack.layer_states[selection.index - 1]
    if selection.mode == "uniform_average":
        return np.mean(np.stack(stack.layer_states), axis=0)
    if selection.weights is None:
        raise ValueError("learnable layer weights are applied inside the scorer, not at extraction time")
    w = np.asarray(selection.weights, dtype=np.float64)
    out = np.tensordot(w, np.stack(stack.layer_states).astype(np.float64), axes=1)
    return out.astype(stack.layer_states[0].dtype, copy=False)


# --------------------------------------------------------------------------- backends


class EncoderBackend(abc.ABC):
    """Loaded encoder checkpoint: waveform in, per-layer hidden states out."""

    spec: EncoderSpec

    @abc.abstractmethod
    def checkpoint_hash(self) -> str: ...

    @abc.abstractmethod
    def num_frames(self, n_samples: int) -> int: ...

    @abc.abstractmethod
    def layer_states(self, waveform: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Return ``(conv_features, [layer_1 .. layer_L])`` for one utterance."""


class TorchEncoderBackend(EncoderBackend):
    """Backend around any module from :mod:`pronscore.ssl_models`, run in eval mode."""

    def __init__(self, module, spec: EncoderSpec, normalize: bool = True):
        self.module = module.eval()
        self.spec = spec
        self.normalize = normalize
        self._hash: str | None = None

    def checkpoint_hash(self) -> str:
        if self._hash is None:
            self._hash = state_hash(self.module)
        return self._hash

    def num_frames(self, n_samples: int) -> int:
        return self.module.num_frames(n_samples)

    @torch.inference_mode()
    def layer_states(self, waveform: np.ndarray):
        x = torch.as_tensor(np.asarray(waveform, dtype=np.float32))
        if self.normalize:
            x = (x - x.mean()) / torch.sqrt(x.var(unbiased=False) + 1e-7)
        conv, states, _ = self.module.layer_outputs(x[None, :])
        return conv[0].numpy().copy(), [s[0].numpy().copy() for s in states]


def encode(audio: np.ndarray, backend: EncoderBackend, utterance_id: str = "") -> LayerStack:
    audio = np.asarray(audio)
    if audio.ndim != 1:
        raise EncoderError(f"{utterance_id}: expected mono waveform, got shape {audio.shape}")
    need = min_samples()
    if audio.shape[0] < need:
        raise AudioTooShortError(
            f"{utterance_id}: {audio.shape[0]} samples is shorter than one frame ({need} samples)"
        )
    try:
        conv, states = backend.layer_states(audio)
    except Exception as exc:
        raise EncoderError(f"{utterance_id}: encoder backend failed: {exc}") from exc
    if len(states) != backend.spec.num_transformer_layers:
        raise EncoderError(
            f"{utterance_id}: backend returned {len(states)} layers, spec says {backend.spec.num_transformer_layers}"
        )
    return LayerStack(utterance_id, conv, tuple(states))


def load_backend(
    kind: str,
    checkpoint: str | Path | None = None,
    *,
    family: str | None = None,
    variant: str | None = None,
    tiny_config: TinyEncoderConfig | None = None,
) -> TorchEncoderBackend:
    """Build a backend.

    ``kind="stub"`` loads a :class:`TinySSLEncoder` checkpoint file, or builds
    a freshly seeded one when ``checkpoint`` is None. ``kind="hf"`` loads a
    HuggingFace directory or hub id.
    """
    if kind == "stub":
        module = TinySSLEncoder.load(checkpoint) if checkpoint else TinySSLEncoder(tiny_config)
        cfg = module.config
        spec = EncoderSpec(family or cfg.family, variant or cfg.variant, cfg.num_layers, cfg.hidden_dim,
                           320 / SAMPLE_RATE)
        return TorchEncoderBackend(module, spec)
    if kind == "hf":
        if checkpoint is None:
            raise ValueError("hf backend needs a checkpoint name or path")
        module = load_hf_encoder(str(checkpoint), family)
        return hf_backend(module, variant or Path(str(checkpoint)).name)
    raise ValueError(f"unknown backend kind {kind!r}")


def hf_backend(module: HFEncoder, variant: str) -> TorchEncoderBackend:
    cfg = module.config
    stride = float(np.prod(cfg.conv_stride)) / SAMPLE_RATE
    spec = EncoderSpec(module.family, variant, cfg.num_hidden_layers, cfg.hidden_size, stride)
    return TorchEncoderBackend(module, spec)
