"""LoRA adapters, the trainable-module freeze grid, and parameter accounting."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import torch
from torch import nn

from .errors import ConfigError
from .layers import INIT_STD, Linear, MultiHeadAttention

LORA_TARGETS = ("encoder_attn", "lm_attn")
ATTN_PROJECTIONS = ("q", "k", "v", "o")


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0
    dropout_p: float = 0.05
    targets: list[str] = field(default_factory=lambda: list(LORA_TARGETS))

    def __post_init__(self):
        if self.rank < 1:
            raise ConfigError("LoRA rank must be >= 1")
        if not 0 <= self.dropout_p < 1:
            raise ConfigError("LoRA dropout must be in [0, 1)")
        unknown = set(self.targets) - set(LORA_TARGETS)
        if unknown:
            raise ConfigError(f"unknown LoRA targets: {sorted(unknown)}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def to_dict(self):
        return asdict(self)


@dataclass
class FreezeConfig:
    """Which components learn: the projector fully, encoder/LM through LoRA."""

    train_encoder: bool = True
    train_projector: bool = True
    train_lm: bool = True

    def __post_init__(self):
        if not (self.train_encoder or self.train_projector or self.train_lm):
            raise ConfigError("freeze config leaves nothing trainable")

    def to_dict(self):
        return asdict(self)


# Named variants of the trainable-module ablation.
FREEZE_GRID = {
    "all": FreezeConfig(),
    "frozen_encoder": FreezeConfig(train_encoder=False),
    "frozen_encoder_lm": FreezeConfig(train_encoder=False, train_lm=False),
    "frozen_lm": FreezeConfig(train_lm=False),
}


class LoRALinear(nn.Module):
    """Frozen ``Linear`` plus a scaled low-rank residual ``(alpha/r) * x A B``."""

    def __init__(self, base: Linear, rank: int, alpha: float, dropout_p: float = 0.0):
        super().__init__()
        self.base = base
        for p in base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scaling = alpha / rank
        self.dropout_p = dropout_p
        dtype = base.weight.dtype
        self.lora_A = nn.Parameter(torch.randn(base.d_in, rank, dtype=dtype) * INIT_STD)
        self.lora_B = nn.Parameter(torch.zeros(rank, base.d_out, dtype=dtype))
        self.merged = False

    @property
    def d_in(self):
        return self.base.d_in

    @property
    def d_out(self):
        return self.base.d_out

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.base(x)
        if self.merged:
            return y
        a_in = nn.functional.dropout(x, self.dropout_p, self.training) if self.dropout_p else x
        return y + self.scaling * ((a_in @ self.lora_A) @ self.lora_B)

    def delta(self) -> torch.Tensor:
        return self.scaling * (self.lora_A @ self.lora_B)

    @torch.no_grad()
    def merge(self) -> None:
        """Fold A·B into the base weight (inference only)."""
        if not self.merged:
            self.base.weight += self.delta()
            self.merged = True

    @torch.no_grad()
    def unmerge(self) -> None:
        if self.merged:
            self.base.weight -= self.delta()
            self.merged = False


def _attention_modules(bundle, target: str):
    root = bundle.encoder if target == "encoder_attn" else bundle.lm
    return [m for m in root.modules() if isinstance(m, MultiHeadAttention)]


def lora_modules(module: nn.Module) -> list[LoRALinear]:
    return [m for m in module.modules() if isinstance(m, LoRALinear)]


def attach_lora(bundle, cfg: LoraConfig):
    """Wrap every q/k/v/o projection in the targeted attention blocks. Mutates ``bundle``."""
    if lora_modules(bundle):
        raise ConfigError("LoRA adapters are already attached")
    for target in cfg.targets:
        for attn in _attention_modules(bundle, target):
            for name in ATTN_PROJECTIONS:
                setattr(attn, name, LoRALinear(getattr(attn, name), cfg.rank, cfg.alpha, cfg.dropout_p))
    bundle.lora_config = cfg
    return bundle


def merge_lora(bundle) -> None:
    for m in lora_modules(bundle):
        m.merge()


def base_params(module: nn.Module):
    lora_ids = {id(p) for m in lora_modules(module) for p in (m.lora_A, m.lora_B)}
    return [p for p in module.parameters() if id(p) not in lora_ids]


def lora_params(module: nn.Module):
    return [p for m in lora_modules(module) for p in (m.lora_A, m.lora_B)]


def set_trainable(bundle, freeze: FreezeConfig) -> list[nn.Parameter]:
    """Set ``requires_grad`` per the freeze config and return the trainable list.

    Base encoder/LM weights are always frozen; their LoRA factors follow
    ``train_encoder``/``train_lm``; the projector follows ``train_projector``.
    """
    trainable: list[nn.Parameter] = []
    for p in bundle.parameters():
        p.requires_grad_(False)
    for module, flag in ((bundle.encoder, freeze.train_encoder), (bundle.lm, freeze.train_lm)):
        if flag:
            adapters = lora_params(module)
            if not adapters:
                raise ConfigError("training a module through LoRA requires attached adapters")
            trainable += adapters
    if freeze.train_projector:
        trainable += list(bundle.connector.parameters())
    for p in trainable:
        p.requires_grad_(True)
    if not trainable:
        raise ConfigError("empty trainable set")
    bundle.freeze_config = freeze
    return trainable


def count_params(bundle) -> dict[str, int]:
    """Exact parameter counts; LoRA factors are counted with their host module."""
    enc = sum(p.numel() for p in bundle.encoder.parameters())
    proj = sum(p.numel() for p in bundle.connector.parameters())
    lm = sum(p.numel() for p in bundle.lm.parameters())
    return {"encoder": enc, "projector": proj, "lm": lm, "total": enc + proj + lm}


def count_trainable(bundle) -> int:
    return sum(p.numel() for p in bundle.parameters() if p.requires_grad)
