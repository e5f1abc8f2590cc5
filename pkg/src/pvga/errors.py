"""Exception hierarchy for the pvga package.

Every error raised deliberately by this package derives from :class:`PvgaError`,
so callers can catch one type at the boundary (the CLI maps them to exit codes).
"""


class PvgaError(Exception):
    """Base class for all pvga errors."""


class DimensionMismatch(PvgaError):
    """Operands have inconsistent shapes."""


class InvalidData(PvgaError):
    """Count data violates the model (negative or non-integer entries, bad file payload)."""


class NotPositiveDefinite(PvgaError):
    """A matrix required to be symmetric positive definite is not."""


class BreakdownError(PvgaError):
    """The conjugate-gradient denominator became nonpositive (operator not SPD)."""


# The solver modules refer to the CG failure by this name.
PcgBreakdown = BreakdownError


class RankTooLarge(PvgaError):
    """Requested factorization rank exceeds min(m, n)."""


class SingularInnerSystem(PvgaError):
    """The small inner system of a low-rank covariance update is numerically singular."""


class RateOverflow(PvgaError):
    """A Poisson log-rate exceeds the overflow guard (exp would not be finite)."""


class UnknownProblem(PvgaError):
    """Requested test problem name is not recognized."""


class InvalidAlpha(PvgaError):
    """Prior strength alpha must be strictly positive."""


class AlphaCollapse(PvgaError):
    """The hierarchical update drove alpha below the degeneracy floor (1e-12)."""


class NonpositiveDenominator(PvgaError):
    """The alpha update denominator is nonpositive (misconfigured rate parameter b <= 0)."""


class MaxIterationsExceeded(PvgaError):
    """An iterative routine hit its iteration budget before reaching tolerance.

    Carries whatever partial results the routine produced (``partial`` attribute),
    so callers can inspect traces from unconverged runs.
    """

    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class IllConditioned(PvgaError):
    """A system matrix has condition number beyond the trust limit (1e14)."""


class InsufficientSamples(PvgaError):
    """Too few samples to form the requested summary (< 100)."""


class CovTooLargeForSampling(PvgaError):
    """Densifying a masked covariance for sampling was refused (dimension too large)."""


class DimensionTooLarge(PvgaError):
    """Operation only supported at small dimension (e.g. quadrature oracle, dense materialization)."""


class ConfigError(PvgaError):
    """Run configuration is missing, malformed, or inconsistent."""
