"""Multi-object image generation one object at a time, on pluggable model ports."""

from ._kernels import BACKEND as KERNEL_BACKEND
from .candidates import Candidate, generate_candidates, select_best
from .errors import (
    CandidateError,
    ContractError,
    DecompositionError,
    InvalidPlanError,
    LayoutExhaustedError,
    NumericalError,
    PlanningError,
    PreciseMaskError,
    ReplayMismatchError,
    ScriptExhaustedError,
    StagePaintError,
)
from .evaluation import AspectScores, Questionnaire, build_questionnaire, evaluate, format_report
from .feedback import ConfigDelta, FeedbackReport, RetryPolicy, run_stage_with_feedback
from .geometry import (
    BBox,
    Canvas,
    PositionChoice,
    bbox_from_attention,
    indicator_mask,
    overlap_candidate,
    rough_mask_first,
    rough_mask_next,
)
from .guidance import (
    GuidanceConfig,
    StageRecord,
    attention_energy,
    combine_latents,
    guidance_step,
    single_object_diffusion,
)
from .mocks import ConstantVlm, MockScorer, ScriptedReplySet, ScriptedTextPort, ScriptedVlm, ToyDenoiser
from .pipeline import Ports, RunConfig, RunManifest, replay, run_pipeline
from .planner import ObjectPlan, Planner, SubPrompt, make_subprompt
from .schema import validate_manifest

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
