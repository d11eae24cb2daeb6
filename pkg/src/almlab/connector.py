"""Sequence reduction and the encoder-to-LM projector.

The projector is LN -> Linear -> GELU -> Linear -> LN, applied per frame.
Reduction (mean pooling or frame stacking) runs before the projector, and the
optional layer aggregation averages selected encoder layers either before the
projector or after it (with one shared projector).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .encoder import LayerFeatures
from .errors import ConfigError, ShapeError
from .layers import INIT_STD
from .numerics import LN_EPS, gelu, layer_norm

REDUCTIONS = ("pool", "stack", "none")
AGG_POSITIONS = ("before", "after")


@dataclass
class ConnectorConfig:
    d_in: int = 32
    d_lm: int = 64
    reduction: str = "pool"
    k: int = 2
    layer_agg_every: int = 0  # 0 = off
    layer_agg_position: str = "before"

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise ConfigError(f"reduction must be one of {REDUCTIONS}, got {self.reduction!r}")
        if self.k < 1:
            raise ConfigError("reduction factor k must be >= 1")
        if self.reduction == "stack" and self.k not in (1, 2, 4, 8):
            raise ConfigError(f"stack factor must be in (1, 2, 4, 8), got {self.k}")
        if self.reduction == "none" and self.k != 1:
            raise ConfigError("reduction 'none' requires k=1")
        if self.layer_agg_every < 0:
            raise ConfigError("layer_agg_every must be >= 0")
        if self.layer_agg_position not in AGG_POSITIONS:
            raise ConfigError(f"layer_agg_position must be one of {AGG_POSITIONS}")

    @property
    def d_in_effective(self) -> int:
        return self.d_in * self.k if self.reduction == "stack" else self.d_in

    def reduced_length(self, t_enc: int) -> int:
        return -(-t_enc // self.k)

    def to_dict(self):
        return asdict(self)


def pool(features: torch.Tensor, k: int) -> torch.Tensor:
    """Mean over groups of k consecutive frames along axis -2.

    A trailing partial group averages only its real members.
    """
    if k < 1:
        raise ValueError("pool: k must be >= 1")
    T = features.shape[-2]
    if T == 0:
        raise ShapeError("pool: empty sequence")
    if k == 1:
        return features
    n_out = -(-T // k)
    pad = n_out * k - T
    if pad:
        features = torch.cat([features, features.new_zeros(*features.shape[:-2], pad, features.shape[-1])], dim=-2)
    grouped = features.reshape(*features.shape[:-2], n_out, k, features.shape[-1]).sum(dim=-2)
    counts = torch.full((n_out, 1), float(k), dtype=features.dtype)
    counts[-1, 0] = k - pad
    return grouped / counts


def stack(features: torch.Tensor, k: int) -> torch.Tensor:
    """Concatenate k consecutive frames on the feature axis; zero-pad the tail."""
    if k not in (1, 2, 4, 8):
        raise ValueError(f"stack: k must be in (1, 2, 4, 8), got {k}")
    T, d = features.shape[-2], features.shape[-1]
    if T == 0:
        raise ShapeError("stack: empty sequence")
    if k == 1:
        return features
    n_out = -(-T // k)
    pad = n_out * k - T
    if pad:
        features = torch.cat([features, features.new_zeros(*features.shape[:-2], pad, d)], dim=-2)
    return features.reshape(*features.shape[:-2], n_out, k * d)


def reduce(features: torch.Tensor, cfg: ConnectorConfig) -> torch.Tensor:
    if cfg.reduction == "pool":
        return pool(features, cfg.k)
    if cfg.reduction == "stack":
        return stack(features, cfg.k)
    return features


class Projector(nn.Module):
    def __init__(self, d_in: int, d_lm: int):
        super().__init__()
        self.d_in, self.d_lm = d_in, d_lm
        self.gamma1 = nn.Parameter(torch.ones(d_in))
        self.beta1 = nn.Parameter(torch.zeros(d_in))
        self.W1 = nn.Parameter(torch.randn(d_in, d_lm) * INIT_STD)
        self.b1 = nn.Parameter(torch.zeros(d_lm))
        self.W2 = nn.Parameter(torch.randn(d_lm, d_lm) * INIT_STD)
        self.b2 = nn.Parameter(torch.zeros(d_lm))
        self.gamma2 = nn.Parameter(torch.ones(d_lm))
        self.beta2 = nn.Parameter(torch.zeros(d_lm))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.d_in:
            raise ShapeError(f"projector expects width {self.d_in}, got {h.shape[-1]}")
        h_norm1 = layer_norm(h, self.gamma1, self.beta1, LN_EPS)
        h_proj1 = h_norm1 @ self.W1 + self.b1
        h_act = gelu(h_proj1)
        h_proj2 = h_act @ self.W2 + self.b2
        return layer_norm(h_proj2, self.gamma2, self.beta2, LN_EPS)


def project(features: torch.Tensor, projector: Projector) -> torch.Tensor:
    return projector(features)


def projector_param_count(d_in: int, d_lm: int) -> int:
    return d_in * d_lm + d_lm + d_lm * d_lm + d_lm + 2 * d_in + 2 * d_lm


def select_layers(n_layers: int, every_k: int) -> list[int]:
    """Layers {k, 2k, ..., L} counted from 1; L is always included."""
    if every_k < 1:
        raise ValueError("every_k must be >= 1")
    if every_k > n_layers:
        raise ConfigError(f"layer aggregation every {every_k} exceeds encoder depth {n_layers}")
    picked = list(range(every_k, n_layers + 1, every_k))
    if picked[-1] != n_layers:
        picked.append(n_layers)
    return picked


def aggregate_layers(
    layers: LayerFeatures, every_k: int, position: str, projector: Projector, cfg: ConnectorConfig
) -> torch.Tensor:
    idx = select_layers(layers.n_layers, every_k)
    selected = [layers[i] for i in idx]
    if position == "before":
        return projector(reduce(torch.stack(selected).mean(dim=0), cfg))
    if position == "after":
        return torch.stack([projector(reduce(h, cfg)) for h in selected]).mean(dim=0)
    raise ConfigError(f"unknown aggregation position {position!r}")


class Connector(nn.Module):
    """Reduction + projector, optionally over aggregated encoder layers."""

    def __init__(self, cfg: ConnectorConfig):
        super().__init__()
        self.cfg = cfg
        self.projector = Projector(cfg.d_in_effective, cfg.d_lm)

    def forward(self, layers: LayerFeatures) -> torch.Tensor:
        cfg = self.cfg
        if cfg.layer_agg_every:
            return aggregate_layers(layers, cfg.layer_agg_every, cfg.layer_agg_position, self.projector, cfg)
        return self.projector(reduce(layers.final, cfg))
