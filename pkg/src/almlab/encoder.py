"""Whisper-shaped audio encoder at configurable scale."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .audio import N_MELS, MelSpectrogram
from .errors import ConfigError, ShapeError
from .layers import INIT_STD, Block, LayerNorm, sinusoids
from .numerics import gelu


@dataclass
class EncoderConfig:
    n_layers: int = 2
    d_model: int = 32
    n_heads: int = 4
    n_mels: int = N_MELS
    max_frames: int = 3000
    conv_kernel: int = 3

    def __post_init__(self):
        if self.n_layers < 1:
            raise ConfigError("encoder n_layers must be >= 1")
        if self.d_model < 2 or self.d_model % 2:
            raise ConfigError("encoder d_model must be a positive even number")
        if self.d_model % self.n_heads:
            raise ConfigError(f"encoder d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.max_frames < 1:
            raise ConfigError("encoder max_frames must be >= 1")

    @property
    def strides(self) -> tuple[int, int]:
        return (1, 2)

    def to_dict(self):
        return asdict(self)


# Shape presets for parameter accounting; the weights themselves are never loaded.
ENCODER_PRESETS = {
    "toy": EncoderConfig(),
    "toy-deep": EncoderConfig(n_layers=24, d_model=32, n_heads=4),
    "whisper-small": EncoderConfig(n_layers=12, d_model=768, n_heads=12),
    "whisper-medium": EncoderConfig(n_layers=24, d_model=1024, n_heads=16),
}


def encoded_length(n_frames: int) -> int:
    """Token count after the stride-2 convolution: ceil(n_frames / 2)."""
    return (n_frames + 1) // 2


@dataclass
class LayerFeatures:
    """Outputs h^(0..L); ``per_layer[0]`` is the post-conv embedding."""

    per_layer: list[torch.Tensor]

    @property
    def n_layers(self) -> int:
        return len(self.per_layer) - 1

    @property
    def final(self) -> torch.Tensor:
        return self.per_layer[-1]

    def __getitem__(self, i):
        return self.per_layer[i]


class AudioEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        k = cfg.conv_kernel
        self.conv1 = nn.Conv1d(cfg.n_mels, cfg.d_model, k, stride=1, padding=k // 2)
        self.conv2 = nn.Conv1d(cfg.d_model, cfg.d_model, k, stride=2, padding=k // 2)
        for conv in (self.conv1, self.conv2):
            nn.init.normal_(conv.weight, std=INIT_STD)
            nn.init.zeros_(conv.bias)
        self.register_buffer("positions", sinusoids(encoded_length(cfg.max_frames), cfg.d_model), persistent=False)
        self.blocks = nn.ModuleList(Block(cfg.d_model, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_post = LayerNorm(cfg.d_model)

    def forward(self, mel: torch.Tensor) -> LayerFeatures:
        """``mel``: ``[B, n_frames, n_mels]`` or ``[n_frames, n_mels]``.

        Returns L+1 tensors of shape ``[B, ceil(n_frames/2), d_model]`` (batch
        axis dropped for unbatched input). The final entry passes through the
        closing layer norm, as in Whisper.
        """
        squeeze = mel.dim() == 2
        if squeeze:
            mel = mel.unsqueeze(0)
        if mel.dim() != 3 or mel.shape[-1] != self.cfg.n_mels:
            raise ShapeError(f"expected [B, frames, {self.cfg.n_mels}] mel input, got {tuple(mel.shape)}")
        n_frames = mel.shape[1]
        if n_frames > self.cfg.max_frames:
            raise ShapeError(f"{n_frames} frames exceeds max_frames={self.cfg.max_frames}")
        x = gelu(self.conv1(mel.transpose(1, 2)))
        x = gelu(self.conv2(x)).transpose(1, 2)
        x = x + self.positions[: x.shape[1]].to(x.dtype)
        layers = [x]
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i == len(self.blocks) - 1:
                x = self.ln_post(x)
            layers.append(x)
        if squeeze:
            layers = [t.squeeze(0) for t in layers]
        return LayerFeatures(layers)


def encode(mel: MelSpectrogram | np.ndarray | torch.Tensor, encoder: AudioEncoder) -> LayerFeatures:
    frames = mel.frames if isinstance(mel, MelSpectrogram) else mel
    t = torch.as_tensor(np.asarray(frames) if not isinstance(frames, torch.Tensor) else frames)
    p = next(encoder.parameters())
    return encoder(t.to(p.dtype))
