"""Yes/no questionnaire evaluation of generated images.

Each prompt expands into questions tagged ``completeness``, ``attribute`` or
``spatial``. A judge answers every question; the score of an aspect is its
share of "yes" answers. Aspects with no questions are reported as N/A and
left out of the pooled overall figure.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Sequence

from .errors import ContractError
from .feedback import relation_question, split_phrase
from .planner import ObjectPlan, parse_yes_no
from .ports import VlmPort

log = logging.getLogger(__name__)

ASPECTS = ("completeness", "attribute", "spatial")
COLUMNS = {"completeness": "Objects", "attribute": "Attributes", "spatial": "Spatial"}

# Longest first so that "on the right side of" wins over "on".
RELATIONS = tuple(sorted((
    "on the right side of", "on the left side of", "to the right of", "to the left of",
    "on the right of", "on the left of", "on top of", "in front of", "next to",
    "behind", "beside", "above", "below", "under", "beneath", "near", "on",
), key=len, reverse=True))

_RELATION_RE = re.compile(r"\b(" + "|".join(re.escape(r) for r in RELATIONS) + r")\b")
_SPLIT_RE = re.compile(r"\b(?:" + "|".join(re.escape(r) for r in RELATIONS) + r"|and|with)\b|[,;]")
_COPULA = {"is", "are", "sits", "stands", "placed", "located"}
_ARTICLES = {"a", "an", "the", "some"}


@dataclass(frozen=True)
class Question:
    text: str
    aspect: str

    def __post_init__(self):
        if self.aspect not in ASPECTS:
            raise ContractError(f"unknown aspect {self.aspect!r}")


@dataclass
class Questionnaire:
    prompt: str
    questions: list[Question] = field(default_factory=list)

    def count(self, aspect: str) -> int:
        return sum(q.aspect == aspect for q in self.questions)


def _find_span(text: str, phrase: str, start: int) -> tuple[int, int] | None:
    m = re.compile(r"\b" + re.escape(phrase.lower()) + r"\b").search(text, start)
    if m is None and start:
        m = re.compile(r"\b" + re.escape(phrase.lower()) + r"\b").search(text)
    return None if m is None else m.span()


def _mentions(prompt: str, objects: Sequence[str]) -> list[tuple[int, int, str]]:
    """Character span of each object's first mention, in prompt order."""
    text = prompt.lower()
    found, cursor = [], 0
    for obj in objects:
        noun, _ = split_phrase(obj)
        span = _find_span(text, obj, cursor) or _find_span(text, noun, cursor)
        if span is None:
            log.warning("object %r not found in prompt %r; no spatial questions for it", obj, prompt)
            continue
        found.append((span[0], span[1], obj))
        cursor = span[1]
    return sorted(found)


def build_questionnaire(prompt: str, plan: ObjectPlan) -> Questionnaire:
    """Expand ``prompt`` into completeness, attribute and spatial questions.

    A relation phrase yields one spatial question when an object mention ends
    before it and another starts after it, with no other mention in between.
    """
    qs = Questionnaire(prompt)
    for obj in plan.objects:
        noun, attrs = split_phrase(obj)
        article = "an" if noun[:1].lower() in "aeiou" else "a"
        qs.questions.append(Question(f"Is there {article} {noun} in the image?", "completeness"))
        qs.questions.extend(Question(f"Is the {noun} {a}?", "attribute") for a in attrs)

    mentions = _mentions(prompt, plan.objects)
    text = prompt.lower()
    for m in _RELATION_RE.finditer(text):
        if any(s <= m.start() < e for s, e, _ in mentions):
            continue
        before = [x for x in mentions if x[1] <= m.start()]
        after = [x for x in mentions if x[0] >= m.end()]
        if not before or not after:
            continue
        subj, other = before[-1][2], after[0][2]
        if subj == other:
            continue
        qs.questions.append(Question(
            relation_question(split_phrase(subj)[0], m.group(1), split_phrase(other)[0]), "spatial"))
    return qs


def heuristic_plan(prompt: str) -> ObjectPlan:
    """Rule-based object list for prompts judged without a planner."""
    objects = []
    for chunk in _SPLIT_RE.split(prompt.lower()):
        words = [w.strip(".,;:!?\"'") for w in chunk.split()]
        words = [w for w in words if w and w not in _ARTICLES]
        while words and words[-1] in _COPULA:
            words.pop()
        while words and words[0] in _COPULA:
            words.pop(0)
        if words:
            objects.append(" ".join(words))
    if not objects:
        raise ContractError(f"no objects found in prompt {prompt!r}")
    return ObjectPlan(objects, prompt)


@dataclass(frozen=True)
class AspectScore:
    yes: int
    total: int

    @property
    def percentage(self) -> float | None:
        return None if self.total == 0 else 100.0 * self.yes / self.total

    def to_dict(self) -> dict:
        return {"yes": self.yes, "total": self.total, "percentage": self.percentage}


@dataclass
class AspectScores:
    aspects: dict[str, AspectScore]
    answers: list[dict] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def overall(self) -> AspectScore:
        return AspectScore(sum(s.yes for s in self.aspects.values()),
                           sum(s.total for s in self.aspects.values()))

    def to_dict(self) -> dict:
        return {
            "aspects": {a: s.to_dict() for a, s in self.aspects.items()},
            "overall": self.overall.to_dict(),
            "answers": list(self.answers),
            "flags": list(self.flags),
        }


def aggregate(answers: Sequence[dict]) -> dict[str, AspectScore]:
    out = {}
    for aspect in ASPECTS:
        rows = [a for a in answers if a["aspect"] == aspect]
        out[aspect] = AspectScore(sum(bool(a["yes"]) for a in rows), len(rows))
    return out


def evaluate(image_refs: Sequence, questionnaires: Sequence[Questionnaire], judge: VlmPort) -> AspectScores:
    """Ask ``judge`` every question about its image and pool yes-rates per aspect."""
    if len(image_refs) != len(questionnaires):
        raise ContractError(f"{len(image_refs)} images but {len(questionnaires)} questionnaires")
    answers, flags = [], []
    for idx, (image, qs) in enumerate(zip(image_refs, questionnaires)):
        for q in qs.questions:
            row = {"image": idx, "prompt": qs.prompt, "question": q.text, "aspect": q.aspect}
            try:
                reply = judge.ask(image, q.text)
            except Exception as exc:  # the judge is an external service
                msg = f"image {idx}: judge failed on {q.text!r}: {exc}"
                log.warning(msg)
                flags.append(msg)
                answers.append({**row, "answer": None, "yes": False, "flagged": True})
                continue
            parsed = parse_yes_no(reply)
            if parsed is None:
                flags.append(f"image {idx}: unparseable answer {reply!r} to {q.text!r}")
            answers.append({**row, "answer": reply, "yes": bool(parsed), "flagged": parsed is None})
    for aspect, score in aggregate(answers).items():
        if score.total == 0:
            log.info("aspect %s has no questions; reported as N/A", aspect)
    return AspectScores(aggregate(answers), answers, flags)


def _cell(score: AspectScore) -> str:
    pct = score.percentage
    return "N/A" if pct is None else f"{pct:.2f}% ({score.yes}/{score.total})"


def format_report(scores: AspectScores) -> str:
    headers = [COLUMNS[a] for a in ASPECTS] + ["Overall"]
    cells = [_cell(scores.aspects[a]) for a in ASPECTS] + [_cell(scores.overall)]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    row = lambda vals: "| " + " | ".join(v.ljust(w) for v, w in zip(vals, widths)) + " |"
    sep = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    lines = [row(headers), sep, row(cells)]
    if scores.flags:
        lines.append("")
        lines += [f"flag: {f}" for f in scores.flags]
    return "\n".join(lines) + "\n"
