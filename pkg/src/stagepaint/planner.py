"""LLM planning: object decomposition, per-stage position/count, overlap judgement.

Every reply goes through a pure parser. A reply that does not parse is
re-queried up to ``max_retries`` times with a short answer-format suffix.
All calls land in :attr:`Planner.transcript`.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

from .errors import ContractError, DecompositionError, PlanningError
from .geometry import PositionChoice
from .ports import TextCompletionPort

log = logging.getLogger(__name__)

COUNT_RANGE = (1, 6)
SHORT_SUFFIX = " Answer with a single word/number."
LIST_SUFFIX = " List only the objects, one per line."


@lru_cache(maxsize=None)
def template(name: str) -> str:
    return resources.files("stagepaint.templates").joinpath(f"{name}.txt").read_text(encoding="utf-8").strip()


@dataclass
class ObjectPlan:
    objects: list[str]
    source_prompt: str

    def __post_init__(self):
        if not self.objects or any(not o.strip() for o in self.objects):
            raise ContractError("an object plan needs at least one non-empty object")

    def __len__(self):
        return len(self.objects)

    def to_dict(self) -> dict:
        return {"objects": list(self.objects), "source_prompt": self.source_prompt}


@dataclass(frozen=True)
class SubPrompt:
    n: int
    text: str


@dataclass
class TranscriptEntry:
    kind: str
    prompt: str
    reply: str
    parsed: object = None
    stage: int | None = None

    def to_dict(self) -> dict:
        return {"kind": self.kind, "prompt": self.prompt, "reply": self.reply,
                "parsed": self.parsed, "stage": self.stage}


def make_subprompt(plan: ObjectPlan, n: int) -> SubPrompt:
    """``"{obj_1}"`` for the first stage, ``"{obj_n} and {obj_n-1}"`` after."""
    if not 1 <= n <= len(plan.objects):
        raise IndexError(f"stage {n} outside 1..{len(plan.objects)}")
    if n == 1:
        return SubPrompt(1, plan.objects[0])
    return SubPrompt(n, f"{plan.objects[n - 1]} and {plan.objects[n - 2]}")


def object_token_index(text: str, obj: str) -> int:
    """Word index, within ``text``, of the last word of ``obj`` (its head noun)."""
    words = [w.lower() for w in text.split()]
    target = [w.lower() for w in obj.split()]
    for i in range(len(words) - len(target) + 1):
        if words[i:i + len(target)] == target:
            return i + len(target) - 1
    raise ContractError(f"object {obj!r} does not occur in {text!r}")


# --------------------------------------------------------------------------
# parsers
# --------------------------------------------------------------------------

_ITEM_RE = re.compile(r"^\s*(?:\d+\s*[.):]|[-*•])\s*(.+?)\s*$")
_BAD_ITEM_CHARS = set("!?:;…")
_MAX_ITEM_WORDS = 6


def _clean_item(item: str) -> str:
    item = item.strip().strip("\"'`").strip()
    item = re.sub(r"^(?:and|&)\s+", "", item, flags=re.I)
    return item.rstrip(".").strip()


def _valid_item(item: str) -> bool:
    if not item or item.endswith("..") or any(c in _BAD_ITEM_CHARS for c in item):
        return False
    return len(item.split()) <= _MAX_ITEM_WORDS


def parse_object_list(reply: str) -> list[str] | None:
    """Objects from a numbered, bulleted, line-separated or comma list; ``None`` if unparseable."""
    lines = [ln for ln in reply.splitlines() if ln.strip()]
    marked = [m.group(1) for m in map(_ITEM_RE.match, lines) if m]
    if marked:
        items = marked
    elif len(lines) > 1:
        items = [ln for ln in lines if not ln.rstrip().endswith(":")]
    elif lines:
        items = lines[0].split(",")
    else:
        return None
    items = [_clean_item(i) for i in items]
    items = [i for i in items if i]
    if not items or not all(_valid_item(i) for i in items):
        return None
    return items


_POSITION_RE = re.compile(r"\b(none of (?:the )?above|left|right|above|top|bottom|below|under)\b")
_FIRST_PROJECTION = {
    "left": PositionChoice.LEFT, "right": PositionChoice.LEFT,
    "top": PositionChoice.BOTTOM, "above": PositionChoice.BOTTOM,
    "bottom": PositionChoice.BOTTOM, "below": PositionChoice.BOTTOM, "under": PositionChoice.BOTTOM,
}
_NEXT_PROJECTION = {
    "right": PositionChoice.RIGHT, "left": PositionChoice.RIGHT,
    "above": PositionChoice.TOP, "top": PositionChoice.TOP,
    "bottom": PositionChoice.TOP, "below": PositionChoice.TOP, "under": PositionChoice.TOP,
}


def _first_position_word(reply: str) -> str | None:
    m = _POSITION_RE.search(reply.lower())
    if m is None:
        return None
    word = m.group(1)
    return "none" if word.startswith("none") else word


def parse_first_position(reply: str) -> PositionChoice | None:
    """First position keyword, projected onto ``left``/``bottom``."""
    return _FIRST_PROJECTION.get(_first_position_word(reply))


def parse_next_position(reply: str) -> PositionChoice | None:
    """First position keyword, projected onto ``right``/``top``; ``None`` for "none of above"."""
    return _NEXT_PROJECTION.get(_first_position_word(reply))


_NUMBER_WORDS = {"zero": 0, "one": 1, "two": 2, "three": 3, "four": 4, "five": 5,
                 "six": 6, "seven": 7, "eight": 8, "nine": 9, "ten": 10}
_COUNT_RE = re.compile(r"\b(\d+|" + "|".join(_NUMBER_WORDS) + r")\b")


def parse_count(reply: str) -> int | None:
    m = _COUNT_RE.search(reply.lower())
    if m is None:
        return None
    tok = m.group(1)
    value = int(tok) if tok.isdigit() else _NUMBER_WORDS[tok]
    lo, hi = COUNT_RANGE
    return min(max(value, lo), hi)


def parse_yes_no(reply: str) -> bool | None:
    s = reply.strip().lstrip("\"'*`").lower()
    if re.match(r"yes\b", s):
        return True
    if re.match(r"no\b", s):
        return False
    return None


# --------------------------------------------------------------------------
# planner
# --------------------------------------------------------------------------

@dataclass
class Planner:
    """Stateful planner for one run. Not thread-safe; one instance per run."""

    port: TextCompletionPort
    max_retries: int = 3
    transcript: list[TranscriptEntry] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    stage: int | None = None

    def _ask(self, kind: str, prompt: str, parser, suffix: str):
        text = prompt
        for attempt in range(self.max_retries + 1):
            reply = self.port.complete(text)
            value = parser(reply)
            self.transcript.append(TranscriptEntry(kind, text, reply, _jsonable(value), self.stage))
            if value is not None:
                return value
            text = prompt + suffix
        return None

    def decompose(self, prompt: str) -> ObjectPlan:
        if not prompt.strip():
            raise ContractError("prompt must be non-empty")
        objects = self._ask("decompose", template("decompose").format(prompt=prompt),
                            parse_object_list, LIST_SUFFIX)
        if objects is None:
            raise DecompositionError("could not parse an object list from the planner", self.transcript)
        return ObjectPlan(objects, prompt)

    def plan_first(self, prompt: str, obj: str) -> tuple[PositionChoice, int]:
        opt = self._ask("position_first", template("position_first").format(prompt=prompt, obj=obj),
                        parse_first_position, SHORT_SUFFIX)
        if opt is None:
            raise PlanningError(f"no usable position for {obj!r}", self.transcript)
        name = "count_horizontal" if opt is PositionChoice.LEFT else "count_vertical"
        num = self._ask(name, template(name).format(prompt=prompt), parse_count, SHORT_SUFFIX)
        if num is None:
            raise PlanningError(f"no usable count for {obj!r}", self.transcript)
        return opt, num

    def position_next(self, prompt: str, prior: list[str], obj: str) -> PositionChoice:
        if not prior:
            raise ContractError("position_next needs at least one prior object")
        text = template("position_next").format(prompt=prompt, prior=", ".join(prior), obj=obj, prev=prior[-1])
        opt = self._ask("position_next", text, parse_next_position, SHORT_SUFFIX)
        if opt is None:
            raise PlanningError(f"no usable relative position for {obj!r}", self.transcript)
        return opt

    def count_next(self, prompt: str, prior: list[str], opt: PositionChoice) -> int:
        text = template("count_next").format(prompt=prompt, prior=", ".join(prior),
                                             opt=PositionChoice(opt).value, prev=prior[-1])
        num = self._ask("count_next", text, parse_count, SHORT_SUFFIX)
        if num is None:
            raise PlanningError("no usable count for the next object", self.transcript)
        return num

    def plan_next(self, prompt: str, prior: list[str], obj: str) -> tuple[PositionChoice, int]:
        opt = self.position_next(prompt, prior, obj)
        return opt, self.count_next(prompt, prior, opt)

    def judge_overlap(self, prompt: str, obj: str, prev: str) -> bool:
        text = template("overlap").format(prompt=prompt, obj=obj, prev=prev)
        verdict = self._ask("overlap", text, parse_yes_no, SHORT_SUFFIX)
        if verdict is None:
            msg = f"ambiguous overlap judgement for {obj!r}/{prev!r}; assuming no overlap"
            log.warning(msg)
            self.flags.append(msg)
            return False
        return verdict


def _jsonable(value):
    if isinstance(value, PositionChoice):
        return value.value
    return value
