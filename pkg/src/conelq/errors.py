"""Exception hierarchy.

Every error carries a stable ``code`` string and belongs to exactly one
exit-code bucket (the ``exit_code`` of its base class), which is what the
command line front end reports.
"""


class ConeLQError(Exception):
    code = "INTERNAL"
    exit_code = 4

    def __init__(self, message="", **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        out = {"code": self.code, "message": self.message}
        if self.details:
            out["details"] = {k: _plain(v) for k, v in self.details.items()}
        return out


def _plain(v):
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    try:
        return float(v) if not isinstance(v, (int, str, bool)) else v
    except (TypeError, ValueError):
        return str(v)


# -- exit 1 ----------------------------------------------------------------

class InputOutputError(ConeLQError):
    code = "IO"
    exit_code = 1


# -- exit 2: validation / well-posedness -----------------------------------

class ValidationError(ConeLQError):
    code = "INVALID_INPUT"
    exit_code = 2


class NegativeOffDiagonal(ValidationError):
    code = "NEGATIVE_OFF_DIAGONAL"

    def __init__(self, row, col, value):
        super().__init__(f"generator entry q[{row}][{col}] = {value} is negative",
                         row=row, col=col, value=value)
        self.row = row


class RowSumNonzero(ValidationError):
    code = "ROW_SUM_NONZERO"

    def __init__(self, row, total):
        super().__init__(f"generator row {row} sums to {total}, not 0", row=row, total=total)
        self.row = row


class StabilityViolated(ValidationError):
    code = "STABILITY_VIOLATED"


class UnsupportedCase(ValidationError):
    code = "UNSUPPORTED_CASE"


class IllPosed(ValidationError):
    code = "ILL_POSED"


class PreconditionViolated(ValidationError):
    code = "PRECONDITION_VIOLATED"


class UnknownConfigKey(ValidationError):
    code = "UNKNOWN_CONFIG_KEY"


# -- exit 3: property-check failures ---------------------------------------

class PropertyCheckFailed(ConeLQError):
    code = "PROPERTY_CHECK_FAILED"
    exit_code = 3


class MonotonicityViolated(PropertyCheckFailed):
    code = "MONOTONICITY_VIOLATED"


class PositivityViolated(PropertyCheckFailed):
    code = "POSITIVITY_VIOLATED"


class NoDecay(PropertyCheckFailed):
    code = "NO_DECAY"


# -- exit 4: numerical failures --------------------------------------------

class NumericalError(ConeLQError):
    code = "NUMERICAL_FAILURE"
    exit_code = 4


class NonConvergence(NumericalError):
    code = "NON_CONVERGENCE"


class NotPositiveDefinite(NumericalError):
    code = "NOT_POSITIVE_DEFINITE"


class FaceLimitExceeded(NumericalError):
    code = "FACE_LIMIT_EXCEEDED"


class SideConditionViolated(NumericalError):
    code = "SIDE_CONDITION_VIOLATED"


class StepTooLarge(NumericalError):
    code = "STEP_TOO_LARGE"


class NegativeSolution(NumericalError):
    code = "NEGATIVE_SOLUTION"


class BoundViolated(NumericalError):
    code = "BOUND_VIOLATED"


class MaxRoundsExceeded(NumericalError):
    code = "MAX_ROUNDS_EXCEEDED"


class NewtonDiverged(NumericalError):
    code = "NEWTON_DIVERGED"


class NegativeRoot(NumericalError):
    code = "NEGATIVE_ROOT"


class SingularSystem(NumericalError):
    code = "SINGULAR_SYSTEM"


class ExplodedPath(NumericalError):
    code = "EXPLODED_PATH"
