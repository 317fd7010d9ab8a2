"""Exception taxonomy.

Every failure the package can diagnose maps to one class here, grouped the
way the CLI maps them to exit codes: configuration problems, model
validation problems, statistical/diagnostic failures, and internal bugs.
"""


class MarkovRuinError(Exception):
    """Base class for all package errors."""


# -- configuration (CLI exit code 2) ----------------------------------------

class ConfigError(MarkovRuinError):
    """Base for config-file problems."""


class ParseError(ConfigError):
    """Config file is not syntactically valid."""


class UnknownKey(ConfigError):
    """Config contains a key the schema does not define."""


class MissingRequired(ConfigError):
    """A required config key is absent."""

    def __init__(self, key):
        self.key = key
        super().__init__(f"missing required config key: {key!r}")


# -- model validation (CLI exit code 3) --------------------------------------

class ModelError(MarkovRuinError):
    """Base for model construction/validation problems."""


class UnknownKind(ModelError):
    """Model kind string is not one of the supported kinds."""


class InvalidParameter(ModelError):
    """A model parameter is out of its admissible range.

    Carries the offending field name so callers can point at the config key.
    """

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DimensionMismatch(ModelError):
    """State vector length does not match the model order."""


class NonStationary(ModelError):
    """Autoregression has a characteristic root on or outside the unit circle."""


# -- statistical / diagnostic (CLI exit code 4) -------------------------------

class DiagnosticError(MarkovRuinError):
    """Base for statistically detected failures."""


class QuadratureFailure(DiagnosticError):
    """Numerical integration did not reach the requested tolerance."""


class MinorizationViolated(DiagnosticError):
    """delta * nu(E) > P(x, E) beyond slack at some witness (x, E).

    witness is a (state, set_description, lhs, rhs, slack) tuple.
    """

    def __init__(self, witness, message=None):
        self.witness = witness
        super().__init__(message or f"minorization inequality fails at {witness}")


class CycleOverflow(DiagnosticError):
    """A regeneration cycle exceeded the step cap without regenerating."""


class Unsupported(DiagnosticError):
    """The requested route does not exist for this model kind."""


class PowerIterationStall(DiagnosticError):
    """Power iteration failed to converge (periodic or reducible kernel)."""


class TruncationDominance(DiagnosticError):
    """Discretized-kernel root moves with the domain: truncation dominates."""


class NoPositiveRoot(DiagnosticError):
    """cgf is nonnegative immediately to the right of zero."""


class NoUpperBracket(DiagnosticError):
    """cgf stays negative over the admissible range: no finite root."""


class EffectiveSampleCollapse(DiagnosticError):
    """Tilted-moment effective sample size too small to trust the estimate."""


class NonContracting(DiagnosticError):
    """Discount products fail to shrink: perpetuity does not converge."""


class InsufficientTail(DiagnosticError):
    """Not enough usable upper order statistics for a tail index estimate."""


class TooFewEvents(DiagnosticError):
    """Too few grid points with enough exceedances to fit a tail line."""


class DegenerateMcheck(DiagnosticError):
    """Cycle moment E[A_check^eta log A_check] indistinguishable from zero."""


# -- warnings -----------------------------------------------------------------

class EffectiveSampleCollapseWarning(UserWarning):
    """Estimate returned, but its effective sample size is below 1%."""


class HorizonSuspectWarning(UserWarning):
    """Running maxima were still growing near the end of the horizon."""
