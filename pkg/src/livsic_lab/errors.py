"""Exception hierarchy shared by all modules.

Exit-code mapping for the CLI lives in cli.py; everything here derives from
LivsicLabError so callers can catch the whole family at once.
"""


class LivsicLabError(Exception):
    pass


# --- configuration ---

class ConfigInvalid(LivsicLabError):
    """Configuration document failed schema validation."""


# --- precondition failures (CLI exit code 3) ---

class PreconditionError(LivsicLabError):
    pass


class BracketOutOfRange(PreconditionError):
    """bracket() called on a pair farther apart than the bracket radius."""


class CapExceeded(PreconditionError):
    """Periodic-point enumeration would exceed the configured cap."""


class NotRecurrent(PreconditionError):
    """Closing requested for a segment that does not nearly return."""


class NotDenseEnough(PreconditionError):
    """Orbit segment failed the covering-grid density check."""

    def __init__(self, msg, achieved=None):
        super().__init__(msg)
        self.achieved = achieved


class DegenerateSample(PreconditionError):
    """All sampled base distances were zero (constant cocycle)."""


class NotContained(PreconditionError):
    """Ellipsoid containment precondition failed."""


class PreconditionViolated(PreconditionError):
    """A quantitative hypothesis of a lemma check failed on the input."""

    def __init__(self, msg, index=None):
        super().__init__(msg)
        self.index = index


class GapTooSmall(PreconditionError):
    """Spectrum gaps too small for the requested block tolerance."""


class PocViolated(PreconditionError):
    """Transfer-function construction refused: POC residual above tolerance."""

    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


class ExponentNonzero(PreconditionError):
    """Transfer-function construction refused: nonvanishing fibered exponent."""

    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


# --- bound violations found by lemma checks (CLI exit code 4) ---

class BoundViolation(LivsicLabError):
    pass


class BoundViolated(BoundViolation):
    """A non-asymptotic inequality failed; carries the measured value."""

    def __init__(self, msg, measured=None, bound=None):
        super().__init__(msg)
        self.measured = measured
        self.bound = bound


class ConeEscape(BoundViolation):
    """A mapped cone-boundary vector left the prescribed shrunken cone."""

    def __init__(self, msg, witness=None):
        super().__init__(msg)
        self.witness = witness


# --- internal numeric failures (CLI exit code 5) ---

class NumericError(LivsicLabError):
    pass


class InversionDiverged(NumericError):
    """Newton + bisection failed to invert a fiber diffeomorphism."""

    def __init__(self, msg, residual=None):
        super().__init__(msg)
        self.residual = residual


class Singular(NumericError):
    """Matrix condition estimate exceeded the singularity threshold."""


class NotConverged(NumericError):
    """Exponent estimate convergence slope exceeded tolerance."""

    def __init__(self, msg, slope=None):
        super().__init__(msg)
        self.slope = slope


class DimensionCollapse(NumericError):
    """Numerical rank dropped during flag construction."""


class TransformDiverged(NumericError):
    """Graph transform iteration violated the Lipschitz bound."""


class NoStablePoint(NumericError):
    """Shooting search found no fiber coordinate with a contraction certificate."""
