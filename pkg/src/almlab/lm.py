"""Toy decoder-only LM: audio/text embedding merge, causal forward, sampling."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .layers import INIT_STD, Block, LayerNorm, Linear
from .tokenizer import TOKENIZER


@dataclass
class LmConfig:
    vocab_size: int = TOKENIZER.vocab_size
    d_lm: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 512
    audio_token_id: int = TOKENIZER.audio_id

    def __post_init__(self):
        if not 0 <= self.audio_token_id < self.vocab_size:
            raise ConfigError("audio_token_id must be inside the vocabulary")
        if self.n_layers < 1:
            raise ConfigError("lm n_layers must be >= 1")
        if self.d_lm % self.n_heads:
            raise ConfigError(f"d_lm={self.d_lm} not divisible by n_heads={self.n_heads}")

    def to_dict(self):
        return asdict(self)


@dataclass
class GenerationConfig:
    temperature: float = 0.1
    top_p: float = 0.8
    top_k: int = 500
    max_new_tokens: int = 32
    repetition_penalty: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ConfigError("top_p must be in (0, 1]")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.repetition_penalty <= 0:
            raise ConfigError("repetition_penalty must be positive")

    def to_dict(self):
        return asdict(self)


# Decoding presets used for the multiple-choice and open-ended evaluations.
MC_GENERATION = GenerationConfig(temperature=0.1, top_p=0.8, top_k=500, max_new_tokens=32)
CHAT_GENERATION = GenerationConfig(temperature=0.1, top_p=0.8, top_k=500, max_new_tokens=512, repetition_penalty=1.1)


@dataclass
class MergedSequence:
    """A prompt with its audio placeholder expanded into audio rows.

    ``token_ids`` holds -1 on audio rows. ``targets[t]``/``loss_mask[t]`` refer to
    the token *after* row t, so they line up with the logits rows.
    """

    embeddings: torch.Tensor  # [T_total, d_lm]
    token_ids: torch.Tensor  # [T_total]
    targets: torch.Tensor  # [T_total]
    loss_mask: torch.Tensor  # [T_total] bool
    audio_span: tuple[int, int]

    def __len__(self):
        return self.embeddings.shape[0]


class DecoderLM(nn.Module):
    def __init__(self, cfg: LmConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Parameter(torch.randn(cfg.vocab_size, cfg.d_lm) * INIT_STD)
        self.pos = nn.Parameter(torch.randn(cfg.max_seq_len, cfg.d_lm) * INIT_STD)
        self.blocks = nn.ModuleList(Block(cfg.d_lm, cfg.n_heads) for _ in range(cfg.n_layers))
        self.ln_f = LayerNorm(cfg.d_lm)
        self.head = Linear(cfg.d_lm, cfg.vocab_size, bias=False)

    def embed_tokens(self, ids: torch.Tensor) -> torch.Tensor:
        return self.embed[ids]

    def forward(self, embeddings: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
        """Causal logits for ``[B, T, d]`` (or ``[T, d]``) merged embeddings.

        Learned absolute positions are added here, over the merged sequence.
        ``valid`` marks non-padding rows; padding keys are hidden from attention.
        """
        squeeze = embeddings.dim() == 2
        if squeeze:
            embeddings = embeddings.unsqueeze(0)
        B, T, d = embeddings.shape
        if T > self.cfg.max_seq_len:
            raise ShapeError(f"sequence length {T} exceeds max_seq_len={self.cfg.max_seq_len}")
        if d != self.cfg.d_lm:
            raise ShapeError(f"embedding width {d} != d_lm {self.cfg.d_lm}")
        mask = torch.ones(T, T, dtype=torch.bool).tril()[None, None]
        if valid is not None:
            mask = mask & valid[:, None, None, :].bool()
        x = embeddings + self.pos[:T]
        for block in self.blocks:
            x = block(x, mask)
        logits = self.head(self.ln_f(x))
        return logits.squeeze(0) if squeeze else logits


def merge_embeddings(
    audio: torch.Tensor,
    token_ids,
    lm: DecoderLM,
    completion_mask=None,
) -> MergedSequence:
    """Replace the single ``<|AUDIO|>`` token with the ``[T_a, d_lm]`` audio rows.

    ``completion_mask`` flags text tokens that are training targets.
    """
    ids = torch.as_tensor(token_ids, dtype=torch.long).reshape(-1)
    placeholder = lm.cfg.audio_token_id
    where = (ids == placeholder).nonzero().flatten().tolist()
    if len(where) != 1:
        raise ShapeError(f"expected exactly one audio placeholder, found {len(where)}")
    if audio.dim() != 2 or audio.shape[0] == 0:
        raise ShapeError("audio embeddings must be a non-empty [T_a, d_lm] tensor")
    if audio.shape[1] != lm.cfg.d_lm:
        raise ShapeError(f"audio width {audio.shape[1]} != d_lm {lm.cfg.d_lm}")
    p = where[0]
    T_a = audio.shape[0]
    before, after = ids[:p], ids[p + 1 :]
    emb = torch.cat([lm.embed_tokens(before), audio.to(lm.embed.dtype), lm.embed_tokens(after)], dim=0)
    merged_ids = torch.cat([before, torch.full((T_a,), -1, dtype=torch.long), after])

    if completion_mask is None:
        tok_mask = torch.zeros(len(ids), dtype=torch.bool)
    else:
        tok_mask = torch.as_tensor(completion_mask, dtype=torch.bool).reshape(-1)
        if tok_mask.shape[0] != ids.shape[0]:
            raise ShapeError("completion_mask length differs from token_ids")
    merged_tok_mask = torch.cat([tok_mask[:p], torch.zeros(T_a, dtype=torch.bool), tok_mask[p + 1 :]])
    targets = torch.cat([merged_ids[1:], torch.tensor([-1])])
    loss_mask = torch.cat([merged_tok_mask[1:], torch.tensor([False])])
    return MergedSequence(emb, merged_ids, targets, loss_mask, (p, T_a))


def pad_merged(seqs: list[MergedSequence]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
    """Right-pad merged sequences into ``(embeddings, valid, targets, loss_mask)``."""
    T = max(len(s) for s in seqs)
    d = seqs[0].embeddings.shape[1]
    B = len(seqs)
    valid = torch.zeros(B, T, dtype=torch.bool)
    targets = torch.full((B, T), -1, dtype=torch.long)
    loss_mask = torch.zeros(B, T, dtype=torch.bool)
    rows = []
    for i, s in enumerate(seqs):
        n = len(s)
        pad = s.embeddings.new_zeros(T - n, d)
        rows.append(torch.cat([s.embeddings, pad], dim=0))
        valid[i, :n] = True
        targets[i, :n] = s.targets
        loss_mask[i, :n] = s.loss_mask
    emb = torch.stack(rows)
    return emb, valid, targets, loss_mask


def apply_repetition_penalty(logits: torch.Tensor, previous, penalty: float) -> torch.Tensor:
    """Divide positive / multiply negative logits of previously generated ids."""
    if penalty == 1.0 or not previous:
        return logits
    out = logits.clone()
    idx = torch.tensor(sorted(set(int(i) for i in previous)), dtype=torch.long)
    sel = out[idx]
    out[idx] = torch.where(sel > 0, sel / penalty, sel * penalty)
    return out


def filter_top_k_top_p(logits: torch.Tensor, top_k: int, top_p: float) -> torch.Tensor:
    """Top-k then nucleus truncation; removed entries become -inf."""
    V = logits.shape[-1]
    out = logits.clone()
    if top_k < V:
        kth = torch.topk(out, top_k).values[-1]
        out[out < kth] = float("-inf")
    if top_p < 1.0:
        sorted_logits, order = torch.sort(out, descending=True)
        probs = torch.softmax(sorted_logits, dim=-1)
        cum = probs.cumsum(dim=-1)
        # keep every token whose preceding mass is still below top_p
        remove = (cum - probs) >= top_p
        remove[0] = False
        out[order[remove]] = float("-inf")
    return out


def next_token(logits: torch.Tensor, previous: list[int], gen: GenerationConfig, rng: torch.Generator) -> int:
    logits = apply_repetition_penalty(logits.detach().double(), previous, gen.repetition_penalty)
    if gen.temperature == 0 or gen.top_k == 1:
        return int(torch.argmax(logits))
    logits = filter_top_k_top_p(logits / gen.temperature, gen.top_k, gen.top_p)
    probs = torch.softmax(logits, dim=-1)
    return int(torch.multinomial(probs, 1, generator=rng))


@torch.no_grad()
def generate(
    prompt_ids,
    audio: torch.Tensor,
    gen: GenerationConfig,
    lm: DecoderLM,
    eos_id: int = TOKENIZER.eos_id,
) -> list[int]:
    """Sample up to ``max_new_tokens`` ids after the merged prompt; stops at EOS.

    The returned list includes the EOS id when one was produced.
    """
    rng = torch.Generator().manual_seed(gen.seed)
    was_training = lm.training
    lm.eval()
    try:
        return _sample_loop(prompt_ids, audio, gen, lm, eos_id, rng)
    finally:
        lm.train(was_training)


def _sample_loop(prompt_ids, audio, gen, lm, eos_id, rng) -> list[int]:
    seq = merge_embeddings(audio, prompt_ids, lm)
    emb = seq.embeddings
    out: list[int] = []
    for _ in range(gen.max_new_tokens):
        if emb.shape[0] >= lm.cfg.max_seq_len:
            break
        logits = lm(emb)[-1]
        tok = next_token(logits, out, gen, rng)
        out.append(tok)
        if tok == eos_id:
            break
        emb = torch.cat([emb, lm.embed_tokens(torch.tensor([tok]))], dim=0)
    return out
