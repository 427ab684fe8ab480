"""Exception hierarchy.

Validation problems (bad inputs, violated invariants) derive from
:class:`ValidationError` and map to CLI exit code 2; numerical failures
derive from :class:`NumericalError` and map to exit code 3.
"""


class PhnlabError(Exception):
    exit_code = 1


class ValidationError(PhnlabError, ValueError):
    exit_code = 2


class NumericalError(PhnlabError, ArithmeticError):
    exit_code = 3


class NonStochastic(ValidationError):
    """Initial-phase vector is not a probability vector."""


class BadRouting(ValidationError):
    """Routing matrix has a nonzero diagonal, a negative entry or a row sum above one."""


class Singular(ValidationError):
    """I - P (or R) is not invertible."""


class NotPositiveDefinite(ValidationError):
    """Diffusion covariance fails the ellipticity requirement."""


class IndexOutOfRange(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class BadEpsilon(ValidationError):
    pass


class BadDelta(ValidationError):
    pass


class BadAlpha(ValidationError):
    pass


class BadConfig(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


EmptySampleSet = EmptyInput


class SeriesTooShort(ValidationError):
    pass


class ResolutionTooCoarse(ValidationError):
    pass


class ParameterMismatch(ValidationError):
    pass


class Inequality2Violated(ValidationError):
    def __init__(self, message, eigenvalue=None):
        super().__init__(message)
        self.eigenvalue = eigenvalue


class NonFinite(NumericalError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class NoValidConstants(NumericalError):
    pass


class ZeroHits(PhnlabError):
    """No threshold exceedances were observed; carried in reports, not raised by default."""
