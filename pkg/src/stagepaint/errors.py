"""Exception hierarchy shared across the pipeline."""


class StagePaintError(Exception):
    """Base class for every error raised by this package."""


class ContractError(StagePaintError, ValueError):
    """A caller violated a documented precondition (shape, range, type)."""


class InvalidPlanError(StagePaintError, ValueError):
    pass


class LayoutExhaustedError(StagePaintError):
    """No free canvas space remains in the requested direction."""


class PreciseMaskError(StagePaintError):
    pass


class DecompositionError(StagePaintError):
    def __init__(self, message, transcript=None):
        super().__init__(message)
        self.transcript = list(transcript or [])


class PlanningError(StagePaintError):
    def __init__(self, message, transcript=None):
        super().__init__(message)
        self.transcript = list(transcript or [])


class NumericalError(StagePaintError, ArithmeticError):
    """Non-finite values appeared in a latent or gradient."""


class ScriptExhaustedError(StagePaintError):
    """A scripted mock port received a call no remaining entry matches."""


class ReplayMismatchError(StagePaintError):
    def __init__(self, message, stage=None, step=None):
        super().__init__(message)
        self.stage = stage
        self.step = step


class CandidateError(StagePaintError):
    pass
