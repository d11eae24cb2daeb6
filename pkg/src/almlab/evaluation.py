"""Content-aware multiple-choice scoring and per-domain accuracy.

The scorer looks at both the option letter and the option text in a
response. A bare letter is not enough when the text names a different
option, and the right text without a letter still counts.
"""

from __future__ import annotations

import re
import string
import unicodedata
from collections import defaultdict
from dataclasses import dataclass
from enum import Enum

OPTION_IDS = "ABCD"


class Reason(str, Enum):
    ID_AND_CONTENT = "id_and_content"
    CONTENT_ONLY = "content_only"
    ID_CONTENT_CONFLICT = "id_content_conflict"
    NO_MATCH = "no_match"
    EMPTY_GENERATION = "empty_generation"


@dataclass(frozen=True)
class Verdict:
    correct: bool
    reason: Reason
    chosen: int | None = None  # option index the response was resolved to

    @property
    def outcome(self) -> str:
        return "correct" if self.correct else "incorrect"


@dataclass
class McQuestion:
    question: str
    choices: list[str]
    answer_index: int
    domain: str = "sound"

    def __post_init__(self):
        if len(self.choices) != 4:
            raise ValueError("McQuestion needs exactly 4 choices")
        if not 0 <= self.answer_index < 4:
            raise ValueError("answer_index must be in [0, 4)")
        normed = [normalize(c) for c in self.choices]
        if len(set(normed)) != 4 or not all(normed):
            raise ValueError("choices must be non-empty and distinct after normalization")


_PUNCT = str.maketrans({c: " " for c in string.punctuation})
_WS = re.compile(r"\s+")


def normalize(s: str) -> str:
    """Lowercase, punctuation to spaces, collapsed whitespace."""
    s = unicodedata.normalize("NFKC", s).lower().translate(_PUNCT)
    return _WS.sub(" ", s).strip()


# "C)", "(C)", "C.", "C:", "[C]" at the start, followed by whitespace or end.
_LEADING_ID = re.compile(r"^[\(\[]?([A-Da-d])[\)\.:\]](?=\s|$)")
# Same forms at the end, or a bare letter as the final token.
_TRAILING_ID = re.compile(r"(?:^|\s)[\(\[]?([A-Da-d])[\)\.:\]]?$")


def detect_option_id(response: str) -> tuple[int | None, tuple[int, int] | None]:
    """Return (option index, span in the stripped response) or (None, None).

    A leading id wins over a trailing one. A lone leading letter without a
    delimiter ("A dog barks") is not treated as an id unless it is the whole
    response.
    """
    s = response.strip()
    m = _LEADING_ID.match(s)
    if m is None:
        m = _TRAILING_ID.search(s)
    if m is None:
        return None, None
    return OPTION_IDS.index(m.group(1).upper()), m.span()


def matched_options(text: str, choices: list[str]) -> set[int]:
    """Option indices whose normalized text occurs as a whole-word run.

    Longer options are matched first and their occurrences blanked, so a
    shorter option contained in a longer one ("guitar" in "electric guitar")
    is not also reported.
    """
    norm = " " + normalize(text) + " "
    order = sorted(range(len(choices)), key=lambda i: (-len(normalize(choices[i])), i))
    found: set[int] = set()
    for i in order:
        needle = " " + normalize(choices[i]) + " "
        if needle.strip() and needle in norm:
            found.add(i)
            norm = norm.replace(needle, " \x00 ")
    return found


def score_mc(response: str, q: McQuestion) -> Verdict:
    if response is None or not response.strip():
        return Verdict(False, Reason.EMPTY_GENERATION)
    stripped = response.strip()
    opt_id, span = detect_option_id(stripped)
    body = stripped if span is None else stripped[: span[0]] + " " + stripped[span[1] :]
    contents = matched_options(body, q.choices)
    if opt_id is not None:
        whole = matched_options(stripped, q.choices)
        if whole - contents:
            # the "id" letter belonged to an option's text ("vitamin D")
            opt_id, contents = None, whole
    if opt_id is not None:
        if not contents or opt_id in contents:
            return Verdict(opt_id == q.answer_index, Reason.ID_AND_CONTENT, opt_id)
        return Verdict(False, Reason.ID_CONTENT_CONFLICT, opt_id)
    if len(contents) == 1:
        (chosen,) = contents
        return Verdict(chosen == q.answer_index, Reason.CONTENT_ONLY, chosen)
    return Verdict(False, Reason.NO_MATCH)


def aggregate_accuracy(records) -> dict:
    """Accuracy in percent per domain, plus micro and macro overall.

    ``records`` is an iterable of ``(Verdict, domain)`` pairs. ``overall`` is
    the micro average (over samples).
    """
    records = list(records)
    if not records:
        raise ValueError("aggregate_accuracy: no records")
    hits: dict[str, int] = defaultdict(int)
    totals: dict[str, int] = defaultdict(int)
    for verdict, domain in records:
        totals[domain] += 1
        hits[domain] += int(verdict.correct)
    per_domain = {d: 100.0 * hits[d] / totals[d] for d in sorted(totals)}
    micro = 100.0 * sum(hits.values()) / len(records)
    macro = sum(per_domain.values()) / len(per_domain)
    return {
        "per_domain": per_domain,
        "counts": dict(sorted(totals.items())),
        "overall": micro,
        "micro": micro,
        "macro": macro,
        "n": len(records),
    }


def format_accuracy_table(acc: dict) -> str:
    rows = [("domain", "n", "accuracy")]
    for d, v in acc["per_domain"].items():
        rows.append((d, str(acc["counts"][d]), f"{v:.2f}"))
    rows.append(("overall (micro)", str(acc["n"]), f"{acc['micro']:.2f}"))
    rows.append(("overall (macro)", "", f"{acc['macro']:.2f}"))
    w = [max(len(r[i]) for r in rows) for i in range(3)]
    return "\n".join(f"{r[0]:<{w[0]}}  {r[1]:>{w[1]}}  {r[2]:>{w[2]}}" for r in rows)
