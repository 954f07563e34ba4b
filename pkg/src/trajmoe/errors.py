"""Exception hierarchy. Every error carries a short machine-parsable code
(used by the CLI as the ``ERROR:<code>:`` prefix)."""


class EngineError(Exception):
    code = "Engine"

    def __init__(self, message: str = ""):
        super().__init__(message)
        self.message = message


# graph construction
class NonSquare(EngineError):
    code = "NonSquare"


class NegativeWeight(EngineError):
    code = "NegativeWeight"


class AsymmetryTooLarge(EngineError):
    code = "AsymmetryTooLarge"


class DuplicateRegionName(EngineError):
    code = "DuplicateRegionName"


class NonzeroDiagonal(EngineError):
    code = "NonzeroDiagonal"


# numerical kernels
class DimensionMismatch(EngineError):
    code = "DimensionMismatch"


class NonFiniteInput(EngineError):
    code = "NonFiniteInput"


class ShapeMismatch(EngineError):
    code = "ShapeMismatch"


class NonFiniteDetected(EngineError):
    code = "NonFiniteDetected"


class TapeConsumed(EngineError):
    code = "TapeConsumed"


# integration / prediction
class NonFiniteState(EngineError):
    code = "NonFiniteState"

    def __init__(self, message: str = "", step: int | None = None, t: float | None = None):
        super().__init__(message)
        self.step = step
        self.t = t


class OutOfWindow(EngineError):
    code = "OutOfWindow"


# alignment
class InfeasibleWindow(EngineError):
    code = "InfeasibleWindow"


class CohortAlignmentError(EngineError):
    """Aggregate of per-subject alignment failures; raised after every
    subject has been attempted."""

    code = "CohortAlignment"

    def __init__(self, failures):
        self.failures = list(failures)  # [(subject_id, EngineError), ...]
        detail = "; ".join(f"{sid}: {err.code}: {err.message}" for sid, err in self.failures)
        super().__init__(f"{len(self.failures)} subject(s) failed alignment: {detail}")


# data
class DegenerateRange(EngineError):
    code = "DegenerateRange"


class InvalidCohort(EngineError):
    code = "InvalidCohort"


class ConfigError(EngineError):
    code = "Config"


class CheckpointError(EngineError):
    code = "Checkpoint"


# training
class Diverged(EngineError):
    code = "Diverged"


# command line
class UsageError(EngineError):
    code = "Usage"
