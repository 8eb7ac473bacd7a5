"""Overlap handling: one stage run per overlap ratio, best image-text score wins."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import CandidateError, ContractError, NumericalError
from .geometry import BBox, Canvas, PositionChoice, overlap_candidate
from .guidance import StageRecord
from .ports import ScorerPort

log = logging.getLogger(__name__)

DEFAULT_RATIOS = (0.1, 0.3, 0.5)


@dataclass
class Candidate:
    ratio: float
    bbox: BBox
    record: StageRecord
    score: float | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"ratio": self.ratio, "bbox": self.bbox.to_dict(), "score": self.score, "notes": list(self.notes)}


def generate_candidates(
    run_stage: Callable[[BBox], StageRecord],
    opt: PositionChoice,
    num: int,
    prev: BBox,
    canvas: Canvas,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    dropped: list | None = None,
) -> list[Candidate]:
    """Run ``run_stage`` once per overlap ratio on its candidate mask.

    Runs that fail numerically are dropped (and described in ``dropped``);
    :class:`CandidateError` is raised only when every run fails.
    """
    if not ratios:
        raise ContractError("at least one overlap ratio is required")
    out = []
    for r in ratios:
        notes: list = []
        bbox = overlap_candidate(opt, num, prev, canvas, r, notes=notes)
        try:
            record = run_stage(bbox)
        except NumericalError as exc:
            msg = f"candidate r={r} dropped: {exc}"
            log.warning(msg)
            if dropped is not None:
                dropped.append(msg)
            continue
        out.append(Candidate(float(r), bbox, record, notes=notes))
    if not out:
        raise CandidateError("every overlap candidate failed")
    return out


def select_best(candidates: Sequence[Candidate], subprompt: str, scorer: ScorerPort) -> Candidate:
    """Score each candidate's image against ``subprompt``; ties go to the smallest ratio."""
    if not candidates:
        raise ContractError("select_best needs at least one candidate")
    for cand in candidates:
        s = float(scorer.score(cand.record.image, subprompt))
        if not np.isfinite(s):
            raise ContractError(f"scorer returned non-finite score for r={cand.ratio}")
        cand.score = s
    return min(candidates, key=lambda c: (-c.score, c.ratio))
