"""Torch encoder modules exposing per-layer hidden states.

Every module here implements the same small surface:

``layer_outputs(wave, lengths) -> (conv_features, [layer_1, ..., layer_L], frame_lengths)``
    conv features are ``(B, T, C)``, each layer ``(B, T, D)``.
``forward(wave, lengths) -> (last_hidden, frame_lengths)``
    used by CTC fine-tuning.
``conv_parameters()``
    parameters of the convolutional feature encoder (kept frozen when fine-tuning).
``num_frames(n_samples)``
    frames produced for an utterance of ``n_samples`` samples.
"""

from __future__ import annotations

import hashlib
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
from torch import nn

# (kernel, stride) of the wav2vec 2.0 / HuBERT convolutional feature encoder:
# 400-sample receptive field, 320-sample (20 ms) hop at 16 kHz.
CONV_GEOMETRY: tuple[tuple[int, int], ...] = ((10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2))


def conv_output_length(n_samples: int | torch.Tensor, geometry=CONV_GEOMETRY):
    out = n_samples
    for kernel, stride in geometry:
        out = (out - kernel) // stride + 1
    return out


def min_samples(geometry=CONV_GEOMETRY) -> int:
    """Fewest input samples that yield one output frame."""
    n = 1
    for kernel, stride in reversed(geometry):
        n = (n - 1) * stride + kernel
    return n


@dataclass
class TinyEncoderConfig:
    conv_channels: int = 32
    hidden_dim: int = 32
    num_layers: int = 4
    num_heads: int = 4
    ff_dim: int = 64
    dropout: float = 0.1
    seed: int = 0
    family: str = "wav2vec2_style"
    variant: str = "stub-tiny"


class ChannelLayerNorm(nn.LayerNorm):
    """LayerNorm over the channel axis of a ``(B, C, T)`` tensor."""

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return super().forward(x.transpose(1, 2)).transpose(1, 2)


_SEEDED_INIT_LOCK = threading.Lock()


class TinySSLEncoder(nn.Module):
    """Small wav2vec2-shaped encoder (conv front end + transformer stack).

    Stands in for a published checkpoint in tests and desk-scale runs; the
    frame geometry matches the real models so frame counts line up.
    """

    def __init__(self, config: TinyEncoderConfig | None = None):
        super().__init__()
        self.config = config = config or TinyEncoderConfig()
        # seeding touches the global RNG; serialize so concurrent builds get identical weights
        with _SEEDED_INIT_LOCK:
            gen_state = torch.random.get_rng_state()
            torch.manual_seed(config.seed)
            try:
                self._build(config)
            finally:
                torch.random.set_rng_state(gen_state)

    def _build(self, config: TinyEncoderConfig) -> None:
        convs: list[nn.Module] = []
        in_ch = 1
        for i, (k, s) in enumerate(CONV_GEOMETRY):
            convs.append(nn.Conv1d(in_ch, config.conv_channels, k, s, bias=False))
            # per-frame channel norm, so padding never leaks into real frames
            convs.append(ChannelLayerNorm(config.conv_channels))
            convs.append(nn.GELU())
            in_ch = config.conv_channels
        self.feature_encoder = nn.Sequential(*convs)
        self.feature_norm = nn.LayerNorm(config.conv_channels)
        self.feature_projection = nn.Linear(config.conv_channels, config.hidden_dim)
        self.pos_conv = nn.Conv1d(config.hidden_dim, config.hidden_dim, 9, padding=4, groups=4)
        self.dropout = nn.Dropout(config.dropout)
        self.layers = nn.ModuleList(
            nn.TransformerEncoderLayer(
                config.hidden_dim,
                config.num_heads,
                config.ff_dim,
                config.dropout,
                activation="gelu",
                batch_first=True,
            )
            for _ in range(config.num_layers)
        )

    def num_frames(self, n_samples: int) -> int:
        return int(conv_output_length(n_samples))

    def conv_parameters(self):
        return self.feature_encoder.parameters()

    def layer_outputs(self, wave: torch.Tensor, lengths: torch.Tensor | None = None):
        conv = self.feature_encoder(wave.unsqueeze(1)).transpose(1, 2)
        frame_lengths = self._frame_lengths(wave, lengths, conv.shape[1])
        x = self.feature_projection(self.feature_norm(conv))
        pad = torch.arange(x.shape[1], device=x.device)[None, :] >= frame_lengths[:, None]
        x = x.masked_fill(pad[..., None], 0.0)
        x = x + nn.functional.gelu(self.pos_conv(x.transpose(1, 2))).transpose(1, 2)
        x = self.dropout(x)
        mask = pad if bool(pad.any()) else None
        states = []
        for layer in self.layers:
            x = layer(x, src_key_padding_mask=mask)
            states.append(x)
        return conv, states, frame_lengths

    def forward(self, wave: torch.Tensor, lengths: torch.Tensor | None = None):
        _, states, frame_lengths = self.layer_outputs(wave, lengths)
        return states[-1], frame_lengths

    def _frame_lengths(self, wave, lengths, t_max):
        if lengths is None:
            return torch.full((wave.shape[0],), t_max, dtype=torch.long, device=wave.device)
        return conv_output_length(lengths.long()).clamp(min=0, max=t_max)

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        torch.save({"kind": "tiny", "config": asdict(self.config), "state_dict": self.state_dict(), **(extra or {})}, path)

    @classmethod
    def load(cls, path: str | Path) -> TinySSLEncoder:
        blob = torch.load(path, map_location="cpu", weights_only=False)
        if blob.get("kind") != "tiny":
            raise ValueError(f"{path} is not a tiny-encoder checkpoint")
        model = cls(TinyEncoderConfig(**blob["config"]))
        model.load_state_dict(blob["state_dict"])
        return model


class HFEncoder(nn.Module):
    """Adapter over a HuggingFace ``Wav2Vec2Model`` or ``HubertModel``."""

    def __init__(self, model: nn.Module):
        super().__init__()
        self.model = model
        self.config = model.config
        self._conv_out = None
        self.model.feature_extractor.register_forward_hook(self._grab_conv)

    def _grab_conv(self, module, inputs, output):
        self._conv_out = output

    @property
    def family(self) -> str:
        return "hubert_style" if self.config.model_type == "hubert" else "wav2vec2_style"

    def num_frames(self, n_samples: int) -> int:
        geometry = tuple(zip(self.config.conv_kernel, self.config.conv_stride))
        return int(conv_output_length(n_samples, geometry))

    def conv_parameters(self):
        return self.model.feature_extractor.parameters()

    def _mask(self, wave, lengths):
        if lengths is None or self.config.feat_extract_norm != "layer":
            return None
        return (torch.arange(wave.shape[1], device=wave.device)[None, :] < lengths[:, None]).long()

    def _frame_lengths(self, wave, lengths, t_max):
        if lengths is None:
            return torch.full((wave.shape[0],), t_max, dtype=torch.long, device=wave.device)
        geometry = tuple(zip(self.config.conv_kernel, self.config.conv_stride))
        return conv_output_length(lengths.long(), geometry).clamp(min=0, max=t_max)

    def layer_outputs(self, wave: torch.Tensor, lengths: torch.Tensor | None = None):
        out = self.model(wave, attention_mask=self._mask(wave, lengths), output_hidden_states=True)
        conv = self._conv_out.transpose(1, 2)
        self._conv_out = None
        states = list(out.hidden_states[1:])
        return conv, states, self._frame_lengths(wave, lengths, states[-1].shape[1])

    def forward(self, wave: torch.Tensor, lengths: torch.Tensor | None = None):
        out = self.model(wave, attention_mask=self._mask(wave, lengths))
        hidden = out.last_hidden_state
        return hidden, self._frame_lengths(wave, lengths, hidden.shape[1])


def load_hf_encoder(name_or_path: str, family: str | None = None) -> HFEncoder:
    from transformers import AutoConfig, HubertModel, Wav2Vec2Model

    config = AutoConfig.from_pretrained(name_or_path)
    if family is None:
        family = "hubert_style" if config.model_type == "hubert" else "wav2vec2_style"
    cls = HubertModel if family == "hubert_style" else Wav2Vec2Model
    return HFEncoder(cls.from_pretrained(name_or_path))


def state_hash(module: nn.Module) -> str:
    """SHA-256 over parameter/buffer names and bytes; identifies a checkpoint."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
