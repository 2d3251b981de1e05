"""Exception taxonomy shared by all riccilab modules.

Errors are split into three families that the CLI maps onto exit codes:
validation problems (bad configs, schema mismatches), numeric failures
(NaNs, degenerate metrics, solver breakdown), and step-size/CFL refusals.
"""


class RicciLabError(Exception):
    """Base class for all riccilab errors."""


class ValidationError(RicciLabError):
    """Invalid configuration, schema, or argument combination."""


class ShapeMismatchError(ValidationError):
    """Operands do not share grid or factor structure."""


class FormatVersionError(ValidationError):
    """Persisted document carries an unsupported format version."""


class NumericError(RicciLabError):
    """NaN/Inf contamination or a numerically meaningless state."""


class DegenerateMetricError(NumericError):
    """A metric profile violates positivity away from the poles."""


class StepSizeError(RicciLabError):
    """Requested time step violates the CFL policy."""


class MinimizerFailureError(NumericError):
    """The entropy minimizer did not converge within its iteration cap.

    Flow drivers treat this as the state leaving the regular neighborhood:
    the gauge vector field is then undefined and the run must stop rather
    than pick an arbitrary branch.
    """


class RangeError(ValidationError):
    """Requested time or scale falls outside the covered range."""
