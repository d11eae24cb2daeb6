"""Single-stage fine-tuning: masked NLL, AdamW, warmup + cosine, global-norm clipping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .adaptation import FreezeConfig, base_params, set_trainable
from .checkpoint import Checkpoint, restore_optimizer, save_checkpoint
from .data import Batch, PromptTemplate, Sample, collate, featurize
from .errors import ConfigError, NumericError
from .model import ModelBundle

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 1
    lr_max: float = 2e-4
    warmup_ratio: float = 0.01
    weight_decay: float = 0.01
    grad_clip_norm: float = 1.0
    batch_size: int = 4
    seed: int = 0
    schedule: str = "cosine"
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    audio_max_seconds: float = 4.0
    checkpoint_every: int = 0
    max_steps: int = 0  # 0 = derive from epochs

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.lr_max <= 0 or self.grad_clip_norm <= 0 or self.audio_max_seconds <= 0:
            raise ConfigError("lr_max, grad_clip_norm and audio_max_seconds must be positive")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio must be in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self):
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return -(-n_samples // batch_size)


def total_steps_for(run: TrainConfig, n_samples: int) -> int:
    return run.max_steps or run.epochs * steps_per_epoch(n_samples, run.batch_size)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return math.ceil(warmup_ratio * total_steps)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to lr_max, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg.warmup_ratio)
    if step < w:
        return cfg.lr_max * step / w
    if cfg.schedule == "constant":
        return cfg.lr_max
    if total_steps == w:
        return cfg.lr_max
    progress = (step - w) / (total_steps - w)
    return cfg.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(trainables: list[torch.nn.Parameter], run: TrainConfig) -> torch.optim.AdamW:
    """AdamW with weight decay on matrices only (norm scales and biases are 1-D)."""
    decay = [p for p in trainables if p.dim() >= 2]
    no_decay = [p for p in trainables if p.dim() < 2]
    groups = [g for g in ({"params": decay, "weight_decay": run.weight_decay}, {"params": no_decay, "weight_decay": 0.0}) if g["params"]]
    return torch.optim.AdamW(groups, lr=0.0, betas=run.betas, eps=run.eps)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale gradients so their global L2 norm is at most ``max_norm``; returns the raw norm."""
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = torch.sqrt(sum((g.double() ** 2).sum() for g in grads))
    total_f = float(total)
    if not math.isfinite(total_f):
        raise NumericError("non-finite gradient norm")
    if total_f > max_norm:
        scale = max_norm / total_f
        for g in grads:
            g.mul_(scale)
    return total_f


def nll_step(batch: Batch, bundle: ModelBundle, trainables: list[torch.nn.Parameter]) -> torch.Tensor:
    """Masked token-mean NLL; gradients are written to ``trainables`` only."""
    loss = bundle.loss(batch)
    if not math.isfinite(loss.item()):
        raise NumericError(f"non-finite loss {float(loss)}")
    grads = torch.autograd.grad(loss, trainables, allow_unused=True)
    for p, g in zip(trainables, grads):
        p.grad = torch.zeros_like(p) if g is None else g
    return loss.detach()


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_indices(step: int, n: int, run: TrainConfig) -> np.ndarray:
    spe = steps_per_epoch(n, run.batch_size)
    epoch, b = divmod(step, spe)
    order = epoch_order(n, run.seed, epoch)
    return order[b * run.batch_size : (b + 1) * run.batch_size]


@dataclass
class TrainResult:
    bundle: ModelBundle
    optimizer: torch.optim.Optimizer
    step: int
    total_steps: int
    history: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, loss)

    @property
    def losses(self) -> list[float]:
        return [h[2] for h in self.history]

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.bundle, self.step, {}, {}, torch.get_rng_state())


def precompute_mels(samples: list[Sample], audio_max_seconds: float, base_dir=None) -> list[np.ndarray]:
    return [featurize(s, audio_max_seconds, base_dir) for s in samples]


def train(
    run: TrainConfig,
    data: list[Sample],
    bundle: ModelBundle,
    out_dir=None,
    resume: Checkpoint | None = None,
    stop_at: int | None = None,
    mels: list[np.ndarray] | None = None,
    template: PromptTemplate | None = None,
    base_dir=None,
) -> TrainResult:
    """Train the bundle's current trainable set.

    Deterministic given ``run.seed``. ``stop_at`` halts early (for resume
    tests) without changing the schedule. With ``out_dir`` the loss curve is
    written to ``losses.csv`` and periodic checkpoints to ``checkpoint-<step>.bin``.
    """
    trainables = [p for p in bundle.parameters() if p.requires_grad]
    if not trainables:
        raise ConfigError("nothing to train: empty trainable set")
    if not data:
        raise ConfigError("empty training set")
    n = len(data)
    total = total_steps_for(run, n)
    mels = mels if mels is not None else precompute_mels(data, run.audio_max_seconds, base_dir)
    opt = make_optimizer(trainables, run)
    start = 0
    if resume is not None:
        restore_optimizer(opt, resume)
        start = resume.step
        if resume.rng_state is not None:
            torch.set_rng_state(resume.rng_state)
    else:
        torch.manual_seed(run.seed)
    bundle.train()
    history: list[tuple[int, float, float]] = []
    end = total if stop_at is None else min(stop_at, total)
    out = Path(out_dir) if out_dir is not None else None
    step = start
    for step in range(start, end):
        lr = lr_at(step, total, run)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = batch_indices(step, n, run)
        batch = collate([data[i] for i in idx], run.audio_max_seconds, template, mels=[mels[i] for i in idx])
        loss = nll_step(batch, bundle, trainables)
        clip_grad_norm(trainables, run.grad_clip_norm)
        opt.step()
        for p in trainables:
            p.grad = None
        history.append((step, lr, float(loss)))
        if out is not None and run.checkpoint_every and (step + 1) % run.checkpoint_every == 0:
            save_checkpoint(bundle, out / f"checkpoint-{step + 1}.bin", step + 1, opt, torch.get_rng_state())
        log.debug("step %d lr %.3g loss %.5f", step, lr, float(loss))
    final_step = end
    bundle.eval()
    if out is not None:
        write_loss_csv(out / "losses.csv", history)
    return TrainResult(bundle, opt, final_step, total, history)


def write_loss_csv(path, history) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss"])
        for step, lr, loss in history:
            w.writerow([step, repr(lr), repr(loss)])


def train_two_stage(
    run: TrainConfig,
    data: list[Sample],
    bundle: ModelBundle,
    full: FreezeConfig | None = None,
    mels=None,
    **kwargs,
) -> tuple[TrainResult, TrainResult]:
    """Stage 1 trains only the projector, stage 2 everything in ``full``.

    Each stage gets the full ``run`` budget split evenly (at least one epoch each).
    """
    full = full or FreezeConfig()
    mels = mels if mels is not None else precompute_mels(data, run.audio_max_seconds)
    half = max(1, total_steps_for(run, len(data)) // 2)
    stage_run = TrainConfig(**{**run.to_dict(), "max_steps": half})
    set_trainable(bundle, FreezeConfig(train_encoder=False, train_projector=True, train_lm=False))
    first = train(stage_run, data, bundle, mels=mels, **kwargs)
    set_trainable(bundle, full)
    second = train(stage_run, data, bundle, mels=mels, **kwargs)
    return first, second


def pretrain_lm(
    bundle: ModelBundle,
    samples: list[Sample],
    steps: int = 300,
    lr: float = 3e-3,
    batch_size: int = 16,
    seed: int = 0,
    template: PromptTemplate | None = None,
) -> list[float]:
    """Full-parameter next-token training of the LM alone on text-only prompts.

    Stands in for the pretrained instruction-tuned LM that the adapter
    recipe starts from; the audio placeholder is dropped from the text.
    Leaves every LM parameter frozen afterwards.
    """
    from .data import render_prompt
    from .numerics import cross_entropy
    from .tokenizer import TOKENIZER

    lm = bundle.lm
    rows = []
    for s in samples:
        ids = [i for i in render_prompt(s, template).ids if i != TOKENIZER.audio_id]
        rows.append(ids)
    params = base_params(lm)
    for p in params:
        p.requires_grad_(True)
    run = TrainConfig(lr_max=lr, batch_size=batch_size, seed=seed, max_steps=steps, warmup_ratio=0.05)
    opt = make_optimizer(params, run)
    losses = []
    gen = torch.Generator().manual_seed(seed)
    lm.train()
    for step in range(steps):
        for g in opt.param_groups:
            g["lr"] = lr_at(step, steps, run)
        pick = torch.randint(len(rows), (min(batch_size, len(rows)),), generator=gen).tolist()
        T = max(len(rows[i]) for i in pick)
        ids = torch.full((len(pick), T), TOKENIZER.pad_id, dtype=torch.long)
        valid = torch.zeros(len(pick), T, dtype=torch.bool)
        for r, i in enumerate(pick):
            ids[r, : len(rows[i])] = torch.tensor(rows[i])
            valid[r, : len(rows[i])] = True
        logits = lm(lm.embed_tokens(ids), valid)
        loss = cross_entropy(logits[:, :-1], ids[:, 1:], valid[:, 1:])
        opt.zero_grad()
        loss.backward()
        clip_grad_norm(params, 1.0)
        opt.step()
        losses.append(loss.item())
    for p in params:
        p.requires_grad_(False)
        p.grad = None
    lm.eval()
    return losses
