"""Manifests, prompt rendering, collation and the synthetic audio-QA generator."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .audio import SAMPLE_RATE, AudioInput, log_mel, pad_or_trim, read_wav
from .errors import DataError
from .tokenizer import TOKENIZER

AUDIO_PLACEHOLDER = "<|AUDIO|>"
DOMAINS = ("sound", "music", "speech")
OPTION_IDS = "ABCD"
DEFAULT_SYSTEM = "Answer questions about the audio."
MANIFEST_FIELDS = ("id", "audio", "prompt", "completion", "choices", "answer_index", "domain")
REQUIRED_FIELDS = ("id", "audio", "prompt", "completion", "domain")


@dataclass
class Sample:
    id: str
    audio: str | dict
    prompt: str
    completion: str
    domain: str
    choices: list[str] | None = None
    answer_index: int | None = None

    def __post_init__(self):
        validate_sample(self)

    def to_json(self) -> dict:
        d: dict[str, Any] = {
            "id": self.id,
            "audio": self.audio,
            "prompt": self.prompt,
            "completion": self.completion,
            "domain": self.domain,
        }
        if self.choices is not None:
            d["choices"] = list(self.choices)
            d["answer_index"] = self.answer_index
        return d

    @property
    def is_mc(self) -> bool:
        return self.choices is not None


def validate_sample(s: Sample) -> None:
    if not isinstance(s.id, str) or not s.id:
        raise DataError("id must be a non-empty string")
    if not isinstance(s.prompt, str) or s.prompt.count(AUDIO_PLACEHOLDER) != 1:
        raise DataError(f"{s.id}: prompt must contain exactly one {AUDIO_PLACEHOLDER}")
    if not isinstance(s.completion, str):
        raise DataError(f"{s.id}: completion must be a string")
    if s.domain not in DOMAINS:
        raise DataError(f"{s.id}: domain must be one of {DOMAINS}, got {s.domain!r}")
    if isinstance(s.audio, dict):
        if "kind" not in s.audio:
            raise DataError(f"{s.id}: synthetic audio spec needs a 'kind'")
    elif not isinstance(s.audio, str) or not s.audio:
        raise DataError(f"{s.id}: audio must be a path or a synthetic spec object")
    if s.choices is not None:
        if not isinstance(s.choices, list) or len(s.choices) != 4 or not all(isinstance(c, str) for c in s.choices):
            raise DataError(f"{s.id}: choices must be a list of 4 strings")
        if not isinstance(s.answer_index, int) or isinstance(s.answer_index, bool) or not 0 <= s.answer_index < 4:
            raise DataError(f"{s.id}: answer_index must be an integer in [0, 4)")
    elif s.answer_index is not None:
        raise DataError(f"{s.id}: answer_index given without choices")


def load_manifest(path) -> list[Sample]:
    """Read a JSONL manifest. Any bad line rejects the whole file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such manifest")
    samples: list[Sample] = []
    errors: list[str] = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                if not isinstance(obj, dict):
                    raise DataError("expected a JSON object")
                missing = [k for k in REQUIRED_FIELDS if k not in obj]
                if missing:
                    raise DataError(f"missing field(s) {', '.join(missing)}")
                unknown = sorted(set(obj) - set(MANIFEST_FIELDS))
                if unknown:
                    raise DataError(f"unknown field(s) {', '.join(unknown)}")
                s = Sample(**obj)
            except (json.JSONDecodeError, DataError, TypeError) as e:
                errors.append(f"line {lineno}: {e}")
                continue
            if s.id in seen:
                errors.append(f"line {lineno}: duplicate id {s.id!r} (first on line {seen[s.id]})")
                continue
            seen[s.id] = lineno
            samples.append(s)
    if errors:
        raise DataError(f"{path}: " + "; ".join(errors))
    return samples


def load_manifests(paths) -> list[Sample]:
    """Concatenate several manifests (data-mixture support); ids stay unique."""
    out: list[Sample] = []
    ids: set[str] = set()
    for p in paths:
        for s in load_manifest(p):
            if s.id in ids:
                raise DataError(f"{p}: duplicate id {s.id!r} across manifests")
            ids.add(s.id)
            out.append(s)
    return out


def dump_manifest(samples: list[Sample]) -> str:
    return "".join(json.dumps(s.to_json(), sort_keys=True, ensure_ascii=False) + "\n" for s in samples)


def write_manifest(path, samples: list[Sample]) -> None:
    Path(path).write_text(dump_manifest(samples), encoding="utf-8")


# ---------------------------------------------------------------- templating


@dataclass
class PromptTemplate:
    system: str = DEFAULT_SYSTEM


@dataclass
class RenderedPrompt:
    ids: list[int]
    completion_mask: list[bool]
    prompt_length: int  # tokens up to and including <|assistant|>

    @property
    def prompt_ids(self) -> list[int]:
        return self.ids[: self.prompt_length]

    @property
    def completion_span(self) -> tuple[int, int]:
        return self.prompt_length, len(self.ids)


def render_prompt(sample: Sample, template: PromptTemplate | None = None, with_completion: bool = True) -> RenderedPrompt:
    """``<|system|>sys<|user|>before<|AUDIO|>after<|assistant|>completion<|eos|>``.

    The loss span is the completion bytes plus the EOS token.
    """
    template = template or PromptTemplate()
    if sample.prompt.count(AUDIO_PLACEHOLDER) != 1:
        raise DataError(f"{sample.id}: prompt must contain exactly one {AUDIO_PLACEHOLDER}")
    before, after = sample.prompt.split(AUDIO_PLACEHOLDER)
    tok = TOKENIZER
    ids = (
        [tok["<|system|>"]]
        + tok.encode(template.system)
        + [tok["<|user|>"]]
        + tok.encode(before)
        + [tok.audio_id]
        + tok.encode(after)
        + [tok["<|assistant|>"]]
    )
    prompt_length = len(ids)
    if with_completion:
        ids = ids + tok.encode(sample.completion) + [tok.eos_id]
    mask = [False] * prompt_length + [True] * (len(ids) - prompt_length)
    return RenderedPrompt(ids, mask, prompt_length)


# ---------------------------------------------------------------- collation


@dataclass
class Batch:
    mel: np.ndarray  # [B, frames, n_mels]
    token_ids: np.ndarray  # [B, T_max] right-padded
    loss_masks: np.ndarray  # [B, T_max] completion tokens only
    attention_masks: np.ndarray  # [B, T_max] real tokens
    lengths: np.ndarray  # [B]
    ids: list[str] = field(default_factory=list)

    def __len__(self):
        return self.token_ids.shape[0]


def load_audio(sample: Sample, base_dir: Path | None = None) -> AudioInput:
    if isinstance(sample.audio, dict):
        return render_audio(sample.audio)
    path = Path(sample.audio)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return read_wav(path)


def featurize(sample: Sample, audio_max_seconds: float, base_dir=None) -> np.ndarray:
    """Pad/trim to the fixed audio length, then log-mel frames."""
    return log_mel(pad_or_trim(load_audio(sample, base_dir), audio_max_seconds)).frames


def collate(
    samples: list[Sample],
    audio_max_seconds: float = 4.0,
    template: PromptTemplate | None = None,
    base_dir=None,
    mels: list[np.ndarray] | None = None,
) -> Batch:
    """Audio padded to the fixed maximum; tokens right-padded to the batch longest.

    ``mels`` lets callers pass precomputed features in sample order.
    """
    if not samples:
        raise DataError("collate: empty batch")
    rendered = [render_prompt(s, template) for s in samples]
    T = max(len(r.ids) for r in rendered)
    B = len(samples)
    token_ids = np.full((B, T), TOKENIZER.pad_id, dtype=np.int64)
    loss_masks = np.zeros((B, T), dtype=bool)
    attn = np.zeros((B, T), dtype=bool)
    lengths = np.zeros(B, dtype=np.int64)
    for i, r in enumerate(rendered):
        n = len(r.ids)
        token_ids[i, :n] = r.ids
        loss_masks[i, :n] = r.completion_mask
        attn[i, :n] = True
        lengths[i] = n
    if mels is None:
        mels = [featurize(s, audio_max_seconds, base_dir) for s in samples]
    mel = np.stack(mels).astype(np.float32)
    return Batch(mel, token_ids, loss_masks, attn, lengths, [s.id for s in samples])


# ---------------------------------------------------------------- synthetic data

PITCHES = (220, 262, 330, 392, 440, 523, 659, 784, 880, 1047)
BEAT_COUNTS = (2, 3, 4, 5, 6, 7, 8)
PATTERNS = tuple(
    " ".join(p)
    for p in (
        ("short", "short", "short"),
        ("short", "short", "long"),
        ("short", "long", "short"),
        ("short", "long", "long"),
        ("long", "short", "short"),
        ("long", "short", "long"),
        ("long", "long", "short"),
        ("long", "long", "long"),
    )
)
SHORT_S, LONG_S, GAP_S = 0.12, 0.36, 0.12
PATTERN_SPAN_S = 0.1 + 3 * LONG_S + 2 * GAP_S + 0.05

QUESTIONS = {
    "sound": "What is the pitch of the tone?",
    "music": "How many beats are in this clip?",
    "speech": "Which short/long pattern do the syllables follow?",
}
INSTRUCTION_QUESTIONS = {
    "sound": "Please listen carefully and tell me the pitch of the tone.",
    "music": "Could you count the beats in this recording for me?",
    "speech": "Listen to the syllables and describe their short/long pattern.",
}


def render_audio(spec: dict) -> AudioInput:
    """Deterministically synthesize audio from a ``{"kind": ...}`` spec."""
    kind = spec.get("kind")
    seconds = float(spec.get("seconds", 2.0))
    n = int(round(seconds * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    amp = float(spec.get("amplitude", 0.5))
    if kind == "tone":
        x = amp * np.sin(2 * np.pi * float(spec["freq"]) * t)
    elif kind == "beats":
        x = np.zeros(n)
        count = int(spec["count"])
        click = int(0.04 * SAMPLE_RATE)
        tc = np.arange(click) / SAMPLE_RATE
        burst = amp * np.sin(2 * np.pi * 1000.0 * tc) * np.hanning(click)
        spacing = seconds / count
        for b in range(count):
            start = int(round((b + 0.25) * spacing * SAMPLE_RATE))
            x[start : start + click] += burst[: max(0, min(click, n - start))]
    elif kind == "pattern":
        rng = np.random.default_rng(int(spec.get("seed", 0)))
        x = np.zeros(n)
        # the longest pattern spans 1.42 s; shorter clips shrink every segment
        scale = min(1.0, seconds / PATTERN_SPAN_S)
        pos = int(0.1 * scale * SAMPLE_RATE)
        carrier = float(spec.get("carrier", 180.0))
        for part in str(spec["pattern"]).split():
            dur = int((SHORT_S if part == "short" else LONG_S) * scale * SAMPLE_RATE)
            seg_t = np.arange(dur) / SAMPLE_RATE
            voiced = np.sin(2 * np.pi * carrier * seg_t) + 0.3 * rng.standard_normal(dur)
            seg = amp * 0.7 * voiced * np.hanning(dur)
            end = min(n, pos + dur)
            if end > pos:
                x[pos:end] += seg[: end - pos]
            pos += dur + int(GAP_S * scale * SAMPLE_RATE)
    elif kind == "silence":
        x = np.zeros(n)
    else:
        raise DataError(f"unknown synthetic audio kind {kind!r}")
    return AudioInput(np.clip(x, -1.0, 1.0).astype(np.float32))


@dataclass
class SynthSpec:
    n_clips: int = 24
    proportions: dict = field(default_factory=lambda: {"sound": 1.0, "music": 1.0, "speech": 1.0})
    formats: list = field(default_factory=lambda: ["mc", "open"])
    clip_seconds: float = 2.0
    voice_instruction: bool = False

    def __post_init__(self):
        if self.n_clips < 1:
            raise DataError("n_clips must be >= 1")
        bad = set(self.proportions) - set(DOMAINS)
        if bad or not self.proportions or any(v < 0 for v in self.proportions.values()):
            raise DataError(f"proportions must map {DOMAINS} to non-negative weights")
        if sum(self.proportions.values()) <= 0:
            raise DataError("proportions sum to zero")
        if not self.formats or set(self.formats) - {"mc", "open"}:
            raise DataError("formats must be a non-empty subset of ['mc', 'open']")
        if self.clip_seconds <= 0:
            raise DataError("clip_seconds must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - {"n_clips", "proportions", "formats", "clip_seconds", "voice_instruction"}
        if unknown:
            raise DataError(f"unknown synth spec keys: {sorted(unknown)}")
        return cls(**d)


def domain_counts(n: int, proportions: dict) -> dict[str, int]:
    """Largest-remainder apportionment of n clips to domains."""
    total = sum(proportions.get(d, 0.0) for d in DOMAINS)
    quotas = {d: n * proportions.get(d, 0.0) / total for d in DOMAINS}
    counts = {d: math.floor(q) for d, q in quotas.items()}
    rest = n - sum(counts.values())
    for d in sorted(DOMAINS, key=lambda d: (-(quotas[d] - counts[d]), DOMAINS.index(d)))[:rest]:
        counts[d] += 1
    return counts


def _mc_prompt(question: str, choices: list[str]) -> str:
    lines = [f"{OPTION_IDS[i]}) {c}" for i, c in enumerate(choices)]
    return AUDIO_PLACEHOLDER + question + "\n" + "\n".join(lines)


def _make_item(domain: str, rng: np.random.Generator, idx: int, seconds: float):
    if domain == "sound":
        freq = int(rng.choice(PITCHES))
        audio = {"kind": "tone", "freq": freq, "seconds": seconds}
        answer, pool = f"{freq} Hz", [f"{p} Hz" for p in PITCHES]
    elif domain == "music":
        count = int(rng.choice(BEAT_COUNTS))
        audio = {"kind": "beats", "count": count, "seconds": seconds}
        answer, pool = f"{count} beats", [f"{c} beats" for c in BEAT_COUNTS]
    else:
        pattern = str(rng.choice(PATTERNS))
        audio = {"kind": "pattern", "pattern": pattern, "seconds": seconds, "seed": int(rng.integers(1 << 31))}
        answer, pool = pattern, list(PATTERNS)
    distractors = [p for p in pool if p != answer]
    picks = [distractors[i] for i in rng.permutation(len(distractors))[:3]]
    choices = picks + [answer]
    order = rng.permutation(4)
    choices = [choices[i] for i in order]
    return audio, answer, choices, choices.index(answer)


def synth_dataset(spec: SynthSpec | dict, seed: int = 0) -> list[Sample]:
    """Seeded audio-QA set: tone pitch (sound), beat counting (music), and
    short/long syllable patterns (speech), each as MC and/or open-ended QA."""
    if isinstance(spec, dict):
        spec = SynthSpec.from_dict(spec)
    rng = np.random.default_rng(seed)
    counts = domain_counts(spec.n_clips, spec.proportions)
    domains = [d for d in DOMAINS for _ in range(counts[d])]
    domains = [domains[i] for i in rng.permutation(len(domains))]
    questions = INSTRUCTION_QUESTIONS if spec.voice_instruction else QUESTIONS
    samples: list[Sample] = []
    for i, domain in enumerate(domains):
        audio, answer, choices, answer_index = _make_item(domain, rng, i, spec.clip_seconds)
        question = questions[domain]
        if "mc" in spec.formats:
            samples.append(
                Sample(
                    id=f"{domain}-{i:05d}-mc",
                    audio=audio,
                    prompt=_mc_prompt(question, choices),
                    completion=f"{OPTION_IDS[answer_index]}) {answer}",
                    domain=domain,
                    choices=choices,
                    answer_index=answer_index,
                )
            )
        if "open" in spec.formats:
            samples.append(
                Sample(
                    id=f"{domain}-{i:05d}-open",
                    audio=audio,
                    prompt=AUDIO_PLACEHOLDER + question,
                    completion=answer,
                    domain=domain,
                )
            )
    return samples
