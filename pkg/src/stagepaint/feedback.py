"""Per-stage VLM consistency check with bounded re-generation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .errors import CandidateError, ContractError, NumericalError
from .geometry import PositionChoice
from .guidance import GuidanceConfig, StageRecord
from .planner import parse_yes_no
from .ports import VlmPort

log = logging.getLogger(__name__)

ARTICLES = {"a", "an", "the", "some"}


def split_phrase(phrase: str) -> tuple[str, list[str]]:
    """Head noun (last word) and attribute words of an object phrase."""
    words = [w.strip(".,;:!?\"'") for w in phrase.split()]
    words = [w for w in words if w and w.lower() not in ARTICLES]
    if not words:
        raise ContractError(f"object phrase {phrase!r} has no content words")
    return words[-1], words[:-1]


def _indefinite(noun: str) -> str:
    return "an" if noun[:1].lower() in "aeiou" else "a"


def relation_question(noun: str, relation: str, other: str) -> str:
    return f"Is the {noun} {relation} the {other}?"


_STAGE_RELATIONS = {PositionChoice.RIGHT: "on the right side of", PositionChoice.TOP: "above"}


def build_stage_questions(
    subprompt: str,
    obj: str,
    n: int = 1,
    opt: PositionChoice | None = None,
    prev_obj: str | None = None,
) -> list[str]:
    noun, attrs = split_phrase(obj)
    questions = [f"Is there {_indefinite(noun)} {noun} in the image?"]
    questions += [f"Is the {noun} {attr}?" for attr in attrs]
    if n > 1 and opt is not None and prev_obj is not None:
        prev_noun, _ = split_phrase(prev_obj)
        questions.append(relation_question(noun, _STAGE_RELATIONS[PositionChoice(opt)], prev_noun))
    return questions


@dataclass
class Verdict:
    question: str
    answer: str
    yes: bool
    ambiguous: bool = False

    def to_dict(self) -> dict:
        return {"question": self.question, "answer": self.answer, "yes": self.yes, "ambiguous": self.ambiguous}


@dataclass
class FeedbackReport:
    attempt: int
    verdicts: list[Verdict]
    adjustment: dict = field(default_factory=dict)
    error: str | None = None

    @property
    def passed(self) -> bool:
        return self.error is None and bool(self.verdicts) and all(v.yes for v in self.verdicts)

    @property
    def yes_count(self) -> int:
        return sum(v.yes for v in self.verdicts)

    def to_dict(self) -> dict:
        return {
            "attempt": self.attempt,
            "passed": self.passed,
            "yes_count": self.yes_count,
            "verdicts": [v.to_dict() for v in self.verdicts],
            "adjustment": dict(self.adjustment),
            "error": self.error,
        }


@dataclass(frozen=True)
class ConfigDelta:
    """Change applied to the base config on a retry.

    Shifts are fractions of ``T``; the result is clamped to valid ranges.
    """

    eta_mult: float = 1.0
    t_star_shift: float = 0.0
    t_prime_shift: float = 0.0
    guidance_iters: int | None = None
    block_selection: str | None = None

    def apply(self, base: GuidanceConfig) -> GuidanceConfig:
        T = base.T
        t_star = min(max(base.T_star + int(round(self.t_star_shift * T)), 0), T)
        t_prime = min(max(base.T_prime + int(round(self.t_prime_shift * T)), 0), T)
        changes = {"eta": base.eta * self.eta_mult, "T_star": t_star, "T_prime": t_prime}
        if self.guidance_iters is not None:
            changes["guidance_iters_per_step"] = max(1, int(self.guidance_iters))
        if self.block_selection is not None:
            changes["block_selection"] = self.block_selection
        return base.replace(**changes)

    def to_dict(self) -> dict:
        out = {"eta_mult": self.eta_mult, "t_star_shift": self.t_star_shift, "t_prime_shift": self.t_prime_shift}
        if self.guidance_iters is not None:
            out["guidance_iters"] = self.guidance_iters
        if self.block_selection is not None:
            out["block_selection"] = self.block_selection
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ConfigDelta":
        return cls(**data)


def escalating_schedule(retries: int) -> tuple[ConfigDelta, ...]:
    """Retry ``i`` scales eta by ``1 + i/2``, extends combination by ``i/10`` of T
    and, from the second retry on, extends guidance by ``(i-1)/10`` of T."""
    return tuple(
        ConfigDelta(eta_mult=1.0 + 0.5 * i, t_star_shift=round(0.1 * i, 10), t_prime_shift=0.0 - round(0.1 * (i - 1), 10))
        for i in range(1, retries + 1)
    )


DEFAULT_SCHEDULE = escalating_schedule(2)


@dataclass(frozen=True)
class RetryPolicy:
    max_retries: int = 2
    schedule: tuple[ConfigDelta, ...] = DEFAULT_SCHEDULE

    def __post_init__(self):
        if self.max_retries < 0:
            raise ContractError("max_retries must be non-negative")
        if len(self.schedule) < self.max_retries:
            raise ContractError(f"schedule has {len(self.schedule)} entries for {self.max_retries} retries")

    def config_for(self, attempt: int, base: GuidanceConfig) -> tuple[GuidanceConfig, ConfigDelta | None]:
        if attempt == 0:
            return base, None
        delta = self.schedule[attempt - 1]
        return delta.apply(base), delta

    def to_dict(self) -> dict:
        return {"max_retries": self.max_retries, "schedule": [d.to_dict() for d in self.schedule]}

    @classmethod
    def from_dict(cls, data: dict) -> "RetryPolicy":
        return cls(int(data["max_retries"]), tuple(ConfigDelta.from_dict(d) for d in data["schedule"]))


def inspect_stage(record: StageRecord, questions: Sequence[str], vlm: VlmPort, attempt: int = 0) -> FeedbackReport:
    if record.image is None:
        raise ContractError("stage record has no decoded image to inspect")
    verdicts = []
    for q in questions:
        answer = vlm.ask(record.image, q)
        parsed = parse_yes_no(answer)
        if parsed is None:
            log.warning("unparseable VLM answer %r to %r; counted as no", answer, q)
        verdicts.append(Verdict(q, answer, bool(parsed), ambiguous=parsed is None))
    return FeedbackReport(attempt, verdicts)


def run_stage_with_feedback(
    generate: Callable[[GuidanceConfig], StageRecord],
    base_config: GuidanceConfig,
    questions: Sequence[str],
    vlm: VlmPort,
    policy: RetryPolicy = RetryPolicy(),
) -> StageRecord:
    """Generate, inspect, and re-generate with the retry schedule until a pass.

    When no attempt passes, the attempt with the most "yes" verdicts is kept
    (earliest on ties). Every report is attached to the returned record.
    """
    tried: list[tuple[StageRecord | None, FeedbackReport]] = []
    last_exc = None
    for attempt in range(policy.max_retries + 1):
        config, delta = policy.config_for(attempt, base_config)
        adjustment = {} if delta is None else {"delta": delta.to_dict(), "config": config.to_dict()}
        try:
            record = generate(config)
        except (NumericalError, CandidateError) as exc:
            log.warning("attempt %d failed numerically: %s", attempt, exc)
            last_exc = exc
            tried.append((None, FeedbackReport(attempt, [], adjustment, error=str(exc))))
            continue
        report = inspect_stage(record, questions, vlm, attempt)
        report.adjustment = adjustment
        tried.append((record, report))
        if report.passed:
            break

    usable = [(rec, rep) for rec, rep in tried if rec is not None]
    if not usable:
        raise last_exc
    passed = [pair for pair in usable if pair[1].passed]
    if passed:
        chosen, chosen_report = passed[0]
    else:
        best = max(rep.yes_count for _, rep in usable)
        chosen, chosen_report = next(pair for pair in usable if pair[1].yes_count == best)
    chosen.chosen_attempt = chosen_report.attempt
    chosen.attempts = [rep for _, rep in tried]
    return chosen
