from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stagepaint.errors import ContractError, NumericalError
from stagepaint.feedback import (
    DEFAULT_SCHEDULE,
    ConfigDelta,
    RetryPolicy,
    build_stage_questions,
    escalating_schedule,
    inspect_stage,
    run_stage_with_feedback,
)
from stagepaint.geometry import BBox, PositionChoice
from stagepaint.guidance import GuidanceConfig, single_object_diffusion
from stagepaint.mocks import ScriptedReplySet, ScriptedVlm, ToyDenoiser

BASE = GuidanceConfig(T=10, T_prime=4, T_star=3, eta=20.0)


def test_questions():
    assert build_stage_questions("orange pumpkin", "orange pumpkin") == [
        "Is there a pumpkin in the image?", "Is the pumpkin orange?"]
    assert build_stage_questions("orange pumpkin and black door", "orange pumpkin", 2,
                                 PositionChoice.RIGHT, "black door")[-1] == \
        "Is the pumpkin on the right side of the door?"
    assert build_stage_questions("door", "door") == ["Is there a door in the image?"]
    assert build_stage_questions("an apple", "an apple") == ["Is there an apple in the image?"]


class Gen:
    """Stage generator on the toy backend that records the configs it was given."""

    def __init__(self, fail_attempts=()):
        self.port = ToyDenoiser()
        self.configs = []
        self.fail_attempts = set(fail_attempts)

    def __call__(self, cfg):
        self.configs.append(cfg)
        if len(self.configs) - 1 in self.fail_attempts:
            raise NumericalError("injected")
        return single_object_diffusion(1, "orange pumpkin", 1, BBox(0, 0, 8, 16), None, cfg, self.port,
                                       self.port.initial_latent(0))


def vlm(*answers):
    return ScriptedVlm(ScriptedReplySet.ordered(answers))


QS = ["Is there a pumpkin in the image?", "Is the pumpkin orange?"]


def test_inspect_stage_verdicts():
    rec = Gen()(BASE)
    assert inspect_stage(rec, QS, vlm("Yes", "yes.")).passed
    rep = inspect_stage(rec, QS, vlm("Yes", "No"))
    assert not rep.passed and [v.yes for v in rep.verdicts] == [True, False]
    rep = inspect_stage(rec, QS[:1], vlm("maybe"))
    assert not rep.passed and rep.verdicts[0].ambiguous


def test_fail_then_pass():
    gen = Gen()
    rec = run_stage_with_feedback(gen, BASE, QS, vlm("Yes", "No", "Yes", "Yes"))
    assert len(rec.attempts) == 2 and rec.chosen_attempt == 1
    assert gen.configs[1] == BASE.replace(eta=30.0, T_star=4)
    assert rec.config == gen.configs[1]
    assert rec.attempts[1].adjustment["delta"] == {"eta_mult": 1.5, "t_star_shift": 0.1, "t_prime_shift": 0.0}


def test_all_pass_is_one_attempt_and_matches_plain_run():
    gen = Gen()
    rec = run_stage_with_feedback(gen, BASE, QS, vlm("Yes", "Yes"))
    assert len(rec.attempts) == 1
    assert rec.trajectory.tobytes() == Gen()(BASE).trajectory.tobytes()


def test_all_fail_picks_most_yes():
    answers = ["Yes", "No", "No",  # 1 yes
               "Yes", "Yes", "No",  # 2 yes
               "No", "No", "No"]  # 0 yes
    rec = run_stage_with_feedback(Gen(), BASE, QS + ["Is it round?"], vlm(*answers))
    assert len(rec.attempts) == 3
    assert rec.chosen_attempt == 1
    assert rec.attempts[2].adjustment["config"]["T_prime"] == 3


def test_numerical_failure_is_reported_and_skipped():
    rec = run_stage_with_feedback(Gen(fail_attempts={0}), BASE, QS, vlm("Yes", "Yes"))
    assert rec.attempts[0].error and rec.chosen_attempt == 1
    with pytest.raises(NumericalError):
        run_stage_with_feedback(Gen(fail_attempts={0, 1, 2}), BASE, QS, vlm())


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 4), st.lists(st.booleans(), min_size=15, max_size=15))
def test_attempts_bounded_and_choice_maximal(k, bits):
    calls = []

    def fake(cfg):
        calls.append(cfg)
        return _Stub()

    answers = ["Yes" if b else "No" for b in bits]
    rec = run_stage_with_feedback(fake, BASE, QS, vlm(*answers),
                                  RetryPolicy(k, escalating_schedule(k)))
    assert len(rec.attempts) <= k + 1 and len(calls) == len(rec.attempts)
    chosen = rec.attempts[rec.chosen_attempt]
    assert chosen.yes_count == max(r.yes_count for r in rec.attempts)


class _Stub:
    image = object()
    chosen_attempt = 0
    attempts = ()


@given(st.floats(0.1, 5), st.floats(-1, 1), st.floats(-1, 1), st.integers(1, 60))
def test_deltas_stay_valid(mult, ds, dp, T):
    base = GuidanceConfig(T=T, T_prime=T // 2, T_star=T // 3)
    cfg = ConfigDelta(mult, ds, dp).apply(base)
    assert 0 <= cfg.T_prime <= T and 0 <= cfg.T_star <= T


def test_policy_roundtrip_and_validation():
    p = RetryPolicy()
    assert p.max_retries == 2 and p.schedule == DEFAULT_SCHEDULE
    assert RetryPolicy.from_dict(p.to_dict()) == p
    with pytest.raises(ContractError):
        RetryPolicy(3, DEFAULT_SCHEDULE)
    with pytest.raises(ContractError):
        RetryPolicy(-1, ())
    rec = Gen()(BASE)
    rec.image = None
    with pytest.raises(ContractError):
        inspect_stage(rec, QS, vlm("Yes"))
