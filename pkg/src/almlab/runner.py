"""End-to-end run plumbing: data selection, base LM, training, MC evaluation, run directories."""

from __future__ import annotations

import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .adaptation import attach_lora, count_params, count_trainable, set_trainable
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig, from_dict, write_resolved
from .data import PromptTemplate, Sample, SynthSpec, load_manifests, render_prompt, synth_dataset
from .errors import DataError
from .evaluation import McQuestion, aggregate_accuracy, score_mc
from .lm import GenerationConfig
from .model import ModelBundle, build_bundle, decode_response
from .training import TrainResult, precompute_mels, pretrain_lm, train, train_two_stage, write_loss_csv

log = logging.getLogger(__name__)

CONFIG_NAME = "config.json"
CHECKPOINT_NAME = "checkpoint.bin"
LOSSES_NAME = "losses.csv"
REPORT_NAME = "report.json"
LOCK_NAME = ".lock"


@contextmanager
def run_dir(out, create: bool = True):
    """Own ``out`` for the duration of the block via an exclusive lockfile."""
    out = Path(out)
    if create:
        out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError as e:
        raise DataError(f"{out} is locked by another run (remove {lock} if stale)") from e
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out
    finally:
        lock.unlink(missing_ok=True)


def template_for(cfg: RunConfig) -> PromptTemplate:
    return PromptTemplate(system=cfg.data.system)


def training_samples(cfg: RunConfig, base_dir=None) -> list[Sample]:
    """Manifests when configured, otherwise the seeded synthetic set."""
    if cfg.data.train_manifests:
        return load_manifests([_resolve(p, base_dir) for p in cfg.data.train_manifests])
    return synth_dataset(SynthSpec.from_dict(cfg.data.synth), seed=cfg.seed)


def eval_samples(cfg: RunConfig, base_dir=None) -> list[Sample]:
    """Eval manifests when configured, otherwise the training set itself."""
    if cfg.data.eval_manifests:
        return load_manifests([_resolve(p, base_dir) for p in cfg.data.eval_manifests])
    return training_samples(cfg, base_dir)


def _resolve(p, base_dir):
    p = Path(p)
    return p if p.is_absolute() or base_dir is None else Path(base_dir) / p


_BASE_CACHE: dict[str, dict[str, torch.Tensor]] = {}


def _base_key(cfg: RunConfig) -> str:
    return json.dumps(
        {"lm": cfg.lm.to_dict(), "base": vars(cfg.base), "synth": cfg.data.synth, "system": cfg.data.system, "seed": cfg.seed},
        sort_keys=True,
    )


def prepare_bundle(cfg: RunConfig) -> ModelBundle:
    """Seeded bundle with a text-pretrained toy LM, LoRA attached and the freeze mask set.

    Pretrained LM weights are cached per process, keyed by everything that
    determines them, so grid runs sharing an LM pay for pretraining once.
    """
    bundle = build_bundle(cfg.bundle_config(), seed=cfg.seed)
    if cfg.base.pretrain_steps > 0:
        key = _base_key(cfg)
        if key not in _BASE_CACHE:
            spec = SynthSpec(n_clips=cfg.base.n_clips, clip_seconds=cfg.data.synth.get("clip_seconds", 2.0))
            text = synth_dataset(spec, seed=cfg.seed + cfg.base.seed_offset)
            pretrain_lm(bundle, text, cfg.base.pretrain_steps, cfg.base.lr, cfg.base.batch_size, cfg.seed, template_for(cfg))
            _BASE_CACHE[key] = {k: v.clone() for k, v in bundle.lm.state_dict().items()}
        else:
            bundle.lm.load_state_dict(_BASE_CACHE[key])
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed + 1)
        attach_lora(bundle, cfg.lora)
    set_trainable(bundle, cfg.freeze)
    return bundle


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    """Route one seed to construction, data synthesis and batch order."""
    return replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))


def fit(cfg: RunConfig, samples: list[Sample], bundle: ModelBundle, out_dir=None, base_dir=None) -> TrainResult:
    """One- or two-stage training; the returned history spans both stages."""
    run = cfg.train
    mels = precompute_mels(samples, run.audio_max_seconds, base_dir)
    if cfg.stages == 2:
        first, second = train_two_stage(run, samples, bundle, full=cfg.freeze, mels=mels, template=template_for(cfg))
        offset = first.step
        second.history = first.history + [(s + offset, lr, loss) for s, lr, loss in second.history]
        second.step += offset
        return second
    return train(run, samples, bundle, out_dir=out_dir, mels=mels, template=template_for(cfg))


@dataclass
class EvalRecord:
    id: str
    domain: str
    question: str
    choices: list[str]
    answer_index: int
    response: str
    correct: bool
    reason: str

    def to_json(self) -> dict:
        return dict(vars(self))


def respond_all(
    bundle: ModelBundle,
    samples: list[Sample],
    gen: GenerationConfig,
    template: PromptTemplate | None = None,
    audio_max_seconds: float = 4.0,
    base_dir=None,
    mels: list[np.ndarray] | None = None,
) -> list[str]:
    mels = mels if mels is not None else precompute_mels(samples, audio_max_seconds, base_dir)
    out = []
    for s, mel in zip(samples, mels):
        prompt = render_prompt(s, template, with_completion=False).prompt_ids
        out.append(decode_response(bundle.respond(mel, prompt, gen)))
    return out


def evaluate_mc(
    bundle: ModelBundle,
    samples: list[Sample],
    gen: GenerationConfig,
    template: PromptTemplate | None = None,
    audio_max_seconds: float = 4.0,
    base_dir=None,
    mels=None,
) -> tuple[list[EvalRecord], dict]:
    """Generate for every MC sample and score with the content-aware scorer."""
    mc = [s for s in samples if s.is_mc]
    if not mc:
        raise DataError("no multiple-choice samples to evaluate")
    if mels is not None:
        keep = {id(s) for s in mc}
        mels = [m for s, m in zip(samples, mels) if id(s) in keep]
    responses = respond_all(bundle, mc, gen, template, audio_max_seconds, base_dir, mels)
    records = []
    for s, resp in zip(mc, responses):
        v = score_mc(resp, McQuestion(s.prompt, s.choices, s.answer_index, s.domain))
        records.append(EvalRecord(s.id, s.domain, s.prompt, s.choices, s.answer_index, resp, v.correct, v.reason.value))
    acc = aggregate_accuracy([(r, r.domain) for r in records])
    return records, acc


def run_training(cfg: RunConfig, out_dir, command: str = "train", base_dir=None) -> dict:
    """Train one configuration into ``out_dir`` and write the fixed artifacts."""
    from .plotting import plot_loss_curve

    with run_dir(out_dir) as out:
        write_resolved(cfg, out / CONFIG_NAME, {"command": command, "seed": cfg.seed})
        t0 = time.perf_counter()
        samples = training_samples(cfg, base_dir)
        bundle = prepare_bundle(cfg)
        result = fit(cfg, samples, bundle, out_dir=out, base_dir=base_dir)
        write_loss_csv(out / LOSSES_NAME, result.history)
        save_checkpoint(bundle, out / CHECKPOINT_NAME, result.step, result.optimizer, torch.get_rng_state(), {"run": cfg.to_dict()})
        plot_loss_curve(result.history, out / "loss_curve.png")
        report = {
            "command": command,
            "steps": result.step,
            "final_loss": result.losses[-1] if result.losses else None,
            "n_samples": len(samples),
            "params": count_params(bundle),
            "trainable_params": count_trainable(bundle),
            "seconds": round(time.perf_counter() - t0, 3),
        }
        (out / REPORT_NAME).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report


def load_run(path) -> tuple[RunConfig, ModelBundle]:
    """Config and trained bundle from a run directory or a checkpoint file."""
    path = Path(path)
    ckpt_path = path / CHECKPOINT_NAME if path.is_dir() else path
    if not ckpt_path.exists():
        raise DataError(f"{ckpt_path}: no checkpoint")
    ckpt = load_checkpoint(ckpt_path)
    run = ckpt.config.get("meta", {}).get("run")
    cfg = from_dict(run) if run else RunConfig()
    ckpt.bundle.eval()
    return cfg, ckpt.bundle
