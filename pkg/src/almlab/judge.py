"""Pairwise LLM-judge protocol for open-ended answers.

Every item is judged twice, reference-first and candidate-first; the
candidate's two scores are averaged. A run repeats this for several trials
and reports the median trial mean.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import statistics
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Protocol

from .errors import DataError, ExternalServiceError, JudgeParseError

log = logging.getLogger(__name__)

TEMPLATE_VERSION = "judge_v1"
CHAT_CATEGORIES = ("speech", "sound", "music", "mixed")


def load_template(version: str = TEMPLATE_VERSION) -> str:
    return resources.files("almlab.templates").joinpath(f"{version}.txt").read_text(encoding="utf-8")


def build_messages(question: str, answer_1: str, answer_2: str, meta: str = "", template: str | None = None) -> list[dict]:
    body = (template or load_template()).format(meta=meta, question=question, answer_1=answer_1, answer_2=answer_2)
    return [
        {"role": "system", "content": "You are a helpful and precise assistant for checking the quality of the answer."},
        {"role": "user", "content": body},
    ]


_ANSWER_RE = re.compile(
    r"\[The Start of Assistant 1's Answer\]\n(.*?)\n\[The End of Assistant 1's Answer\]\n"
    r"\[The Start of Assistant 2's Answer\]\n(.*?)\n\[The End of Assistant 2's Answer\]",
    re.S,
)


def extract_answers(messages: list[dict]) -> tuple[str, str]:
    """Recover (answer_1, answer_2) from a rendered judge prompt."""
    m = _ANSWER_RE.search(messages[-1]["content"])
    if m is None:
        raise ValueError("judge prompt does not contain the two answer blocks")
    return m.group(1), m.group(2)


_NUM = re.compile(r"(?<![\w.])(\d+(?:\.\d+)?)(?![\w.])")


def parse_scores(reply: str) -> tuple[float, float]:
    """Two 1-10 scores from the first non-empty line of the reply."""
    for line in (reply or "").splitlines():
        if line.strip():
            nums = [float(x) for x in _NUM.findall(line)]
            if len(nums) == 2 and all(1.0 <= x <= 10.0 for x in nums):
                return nums[0], nums[1]
            break
    raise JudgeParseError(f"could not parse two 1-10 scores from judge reply {reply[:80]!r}")


class JudgeClient(Protocol):
    def complete(self, messages: list[dict]) -> str: ...


@dataclass
class JudgeConfig:
    endpoint: str = "https://api.openai.com/v1/chat/completions"
    model: str = "gpt-4-0125-preview"
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 2.0
    temperature: float = 1.0
    alt_temperature: float = 2.0
    alt_probability: float = 0.5
    api_key_env: str = "JUDGE_API_KEY"
    cache_dir: str | None = None
    seed: int = 0


class HttpJudgeClient:
    """Chat-completion client over HTTP with an on-disk response cache.

    The sampling temperature switches from ``temperature`` to
    ``alt_temperature`` with probability ``alt_probability``, drawn from a
    seeded generator so reruns issue the same requests and hit the cache.
    """

    def __init__(self, cfg: JudgeConfig):
        self.cfg = cfg
        self._rng = random.Random(cfg.seed)
        self._lock = threading.Lock()

    def _request(self, messages: list[dict]) -> dict:
        with self._lock:
            switch = self._rng.random() < self.cfg.alt_probability
        temp = self.cfg.alt_temperature if switch else self.cfg.temperature
        return {"model": self.cfg.model, "messages": messages, "temperature": temp}

    def _cache_path(self, payload: dict) -> Path | None:
        if not self.cfg.cache_dir:
            return None
        key = hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()
        return Path(self.cfg.cache_dir) / f"{key}.json"

    def complete(self, messages: list[dict]) -> str:
        payload = self._request(messages)
        cache = self._cache_path(payload)
        if cache is not None and cache.exists():
            return json.loads(cache.read_text(encoding="utf-8"))["content"]
        content = self._post(payload)
        if cache is not None:
            cache.parent.mkdir(parents=True, exist_ok=True)
            cache.write_text(json.dumps({"request": payload, "content": content}), encoding="utf-8")
        return content

    def _post(self, payload: dict) -> str:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.cfg.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        data = json.dumps(payload).encode("utf-8")
        last: Exception | None = None
        for attempt in range(self.cfg.max_retries):
            req = urllib.request.Request(self.cfg.endpoint, data=data, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.cfg.timeout) as resp:
                    body = json.loads(resp.read().decode("utf-8"))
                return body["choices"][0]["message"]["content"]
            except urllib.error.HTTPError as e:
                last = e
                if e.code < 500 and e.code != 429:
                    break
            except (urllib.error.URLError, TimeoutError, OSError, KeyError, IndexError, json.JSONDecodeError) as e:
                last = e
            if attempt + 1 < self.cfg.max_retries:
                time.sleep(self.cfg.backoff * (2**attempt))
        raise ExternalServiceError(f"judge request failed: {last}")


class StubJudgeClient:
    """Deterministic offline judge.

    Either replays ``replies`` in order, or calls ``policy(answer_1, answer_2)``
    to produce the two scores. Every prompt seen is kept in ``calls``.
    """

    def __init__(
        self,
        replies: list[str] | None = None,
        policy: Callable[[str, str], tuple[float, float]] | None = None,
    ):
        if (replies is None) == (policy is None):
            raise ValueError("give exactly one of replies or policy")
        self._replies = list(replies) if replies is not None else None
        self.policy = policy
        self.calls: list[tuple[str, str]] = []
        self._lock = threading.Lock()

    def complete(self, messages: list[dict]) -> str:
        a1, a2 = extract_answers(messages)
        with self._lock:
            self.calls.append((a1, a2))
            if self._replies is not None:
                if not self._replies:
                    raise ExternalServiceError("stub judge ran out of replies")
                return self._replies.pop(0)
        s1, s2 = self.policy(a1, a2)
        return f"{s1:g} {s2:g}"


def length_policy(a1: str, a2: str) -> tuple[float, float]:
    """Symmetric toy policy: score grows with answer length, capped at 10."""

    def s(a):
        return float(min(10, 1 + len(a.split())))

    return s(a1), s(a2)


@dataclass
class PairJudgement:
    score: float
    candidate_scores: tuple[float, float]
    reference_scores: tuple[float, float]


def _judge_once(client: JudgeClient, messages: list[dict]) -> tuple[float, float]:
    try:
        return parse_scores(client.complete(messages))
    except JudgeParseError:
        log.info("unparseable judge reply, retrying once")
    return parse_scores(client.complete(messages))


def judge_pair_detail(question: str, reference: str, candidate: str, client: JudgeClient, meta: str = "") -> PairJudgement:
    ref_first = _judge_once(client, build_messages(question, reference, candidate, meta))
    cand_first = _judge_once(client, build_messages(question, candidate, reference, meta))
    cand = (ref_first[1], cand_first[0])
    ref = (ref_first[0], cand_first[1])
    return PairJudgement(sum(cand) / 2.0, cand, ref)


def judge_pair(question: str, reference: str, candidate: str, client: JudgeClient, meta: str = "") -> float:
    """Mean of the candidate's scores over the two presentation orders.

    Each order gets one retry on an unparseable reply; a second failure
    raises ``JudgeParseError``.
    """
    return judge_pair_detail(question, reference, candidate, client, meta).score


@dataclass
class ChatItem:
    id: str
    question: str
    reference: str
    category: str = "mixed"
    meta: str = ""

    def __post_init__(self):
        if self.category not in CHAT_CATEGORIES:
            raise DataError(f"{self.id}: category must be one of {CHAT_CATEGORIES}")


def load_chat_items(path) -> list[ChatItem]:
    items = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                items.append(ChatItem(**json.loads(line)))
            except (json.JSONDecodeError, TypeError, DataError) as e:
                raise DataError(f"{path}: line {lineno}: {e}") from e
    return items


def load_responses(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out[obj["id"]] = obj["response"]
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{path}: line {lineno}: {e}") from e
    return out


@dataclass
class ChatReport:
    median: float
    trial_means: list[float]
    per_category: dict[str, float]
    trial_per_category: list[dict[str, float]]
    flagged: list[dict] = field(default_factory=list)
    scores: list[dict[str, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "median": self.median,
            "trial_means": self.trial_means,
            "per_category": self.per_category,
            "trial_per_category": self.trial_per_category,
            "flagged": self.flagged,
            "scores": self.scores,
        }

    def table(self) -> str:
        lines = [f"{'category':<10} {'median':>7}"]
        for c, v in self.per_category.items():
            lines.append(f"{c:<10} {v:>7.3f}")
        lines.append(f"{'overall':<10} {self.median:>7.3f}")
        lines.append("trials: " + ", ".join(f"{m:.3f}" for m in self.trial_means))
        return "\n".join(lines)


def run_chat_eval(
    items: list[ChatItem],
    responses: dict[str, str],
    client: JudgeClient,
    trials: int = 3,
    max_workers: int = 4,
) -> ChatReport:
    """Judge every item per trial and report the median of the trial means.

    Items whose judge replies stay unparseable are flagged and left out of
    that trial's mean. A missing response is judged as an empty answer.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if not items:
        raise DataError("no chat items to evaluate")
    trial_means: list[float] = []
    trial_cats: list[dict[str, float]] = []
    flagged: list[dict] = []
    all_scores: list[dict[str, float]] = []

    def one(item: ChatItem):
        try:
            return judge_pair(item.question, item.reference, responses.get(item.id, ""), client, item.meta)
        except JudgeParseError as e:
            return e

    for t in range(trials):
        if max_workers > 1:
            with ThreadPoolExecutor(max_workers=max_workers) as pool:
                results = dict(zip([i.id for i in items], pool.map(one, items)))
        else:
            results = {i.id: one(i) for i in items}
        scores = {}
        by_cat: dict[str, list[float]] = {}
        for item in items:
            r = results[item.id]
            if isinstance(r, Exception):
                flagged.append({"trial": t, "id": item.id, "error": str(r)})
                continue
            scores[item.id] = r
            by_cat.setdefault(item.category, []).append(r)
        if not scores:
            raise ExternalServiceError(f"trial {t}: every judge reply was unparseable")
        all_scores.append(scores)
        trial_means.append(statistics.fmean(scores.values()))
        trial_cats.append({c: statistics.fmean(v) for c, v in sorted(by_cat.items())})
    cats = sorted({c for tc in trial_cats for c in tc})
    per_category = {c: statistics.median([tc[c] for tc in trial_cats if c in tc]) for c in cats}
    return ChatReport(statistics.median(trial_means), trial_means, per_category, trial_cats, flagged, all_scores)
