"""The full model bundle: audio encoder -> connector -> decoder LM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .adaptation import FreezeConfig, LoraConfig, attach_lora, set_trainable
from .connector import Connector, ConnectorConfig
from .encoder import AudioEncoder, EncoderConfig
from .errors import ConfigError
from .lm import DecoderLM, GenerationConfig, LmConfig, generate, merge_embeddings, pad_merged
from .numerics import cross_entropy
from .tokenizer import TOKENIZER


@dataclass
class BundleConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    connector: ConnectorConfig = field(default_factory=ConnectorConfig)
    lm: LmConfig = field(default_factory=LmConfig)

    def __post_init__(self):
        if self.connector.d_in != self.encoder.d_model:
            raise ConfigError(f"connector d_in={self.connector.d_in} != encoder d_model={self.encoder.d_model}")
        if self.connector.d_lm != self.lm.d_lm:
            raise ConfigError(f"connector d_lm={self.connector.d_lm} != lm d_lm={self.lm.d_lm}")

    def to_dict(self):
        return {"encoder": self.encoder.to_dict(), "connector": self.connector.to_dict(), "lm": self.lm.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "BundleConfig":
        return cls(
            encoder=EncoderConfig(**d.get("encoder", {})),
            connector=ConnectorConfig(**d.get("connector", {})),
            lm=LmConfig(**d.get("lm", {})),
        )


class ModelBundle(nn.Module):
    def __init__(self, cfg: BundleConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = AudioEncoder(cfg.encoder)
        self.connector = Connector(cfg.connector)
        self.lm = DecoderLM(cfg.lm)
        self.lora_config: LoraConfig | None = None
        self.freeze_config: FreezeConfig | None = None

    def embed_audio(self, mel: torch.Tensor) -> torch.Tensor:
        """Mel ``[B, frames, n_mels]`` -> audio embeddings ``[B, T_a, d_lm]``."""
        return self.connector(self.encoder(mel.to(self.lm.embed.dtype)))

    def forward_batch(self, batch):
        """Logits plus aligned targets/mask for a collated ``Batch``."""
        audio = self.embed_audio(torch.as_tensor(batch.mel))
        seqs = []
        for i in range(len(batch)):
            n = int(batch.lengths[i])
            seqs.append(merge_embeddings(audio[i], batch.token_ids[i, :n], self.lm, batch.loss_masks[i, :n]))
        emb, valid, targets, loss_mask = pad_merged(seqs)
        logits = self.lm(emb, valid)
        return logits, targets, loss_mask

    def loss(self, batch) -> torch.Tensor:
        logits, targets, loss_mask = self.forward_batch(batch)
        return cross_entropy(logits, targets, loss_mask)

    @torch.no_grad()
    def respond(self, mel, prompt_ids, gen: GenerationConfig) -> list[int]:
        was = self.training
        self.eval()
        try:
            audio = self.embed_audio(torch.as_tensor(np.asarray(mel))[None])[0]
            return generate(prompt_ids, audio, gen, self.lm)
        finally:
            self.train(was)


def build_bundle(
    cfg: BundleConfig | None = None,
    seed: int = 0,
    lora: LoraConfig | None = None,
    freeze: FreezeConfig | None = None,
) -> ModelBundle:
    """Seeded construction; attaches LoRA and applies the freeze mask when given."""
    cfg = cfg or BundleConfig()
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        bundle = ModelBundle(cfg)
        if lora is not None:
            attach_lora(bundle, lora)
    if freeze is not None:
        set_trainable(bundle, freeze)
    return bundle


def decode_response(ids) -> str:
    return TOKENIZER.decode([i for i in ids if i != TOKENIZER.eos_id])
