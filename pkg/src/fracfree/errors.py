"""Exception types shared across the package."""


class FracfreeError(Exception):
    """Base class for all package errors."""


class InvalidSpecError(FracfreeError):
    """A grid or parameter specification violates its invariants."""


class IncompleteDatumError(FracfreeError):
    """An exterior datum cannot provide values where they are needed."""


class AdmissibilityError(FracfreeError):
    """A (function, phase set) pair violates the sign constraints.

    Carries the flat indices of the violating cells.
    """

    def __init__(self, message, cells=None):
        super().__init__(message)
        self.cells = [] if cells is None else list(cells)


class InvalidScaleError(FracfreeError):
    """Rescaling factor is not usable."""


class GeometryError(FracfreeError):
    """Cells or regions overlap where they must be disjoint."""


class ParameterError(FracfreeError):
    """A kernel exponent or table does not match its use."""


class OutOfStencilError(FracfreeError):
    """Operator evaluation requested on a cell without a full stencil."""


class OutOfRangeError(FracfreeError):
    """A radius exceeds the reach of the grid it is evaluated on."""


class FreeBoundaryError(FracfreeError):
    """The discrete free boundary does not pass through the origin."""


class TooLargeError(FracfreeError):
    """Instance too large for exhaustive enumeration."""


class NonConvergenceError(FracfreeError):
    """An iterative solve exhausted its budget; carries the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class ConfigError(FracfreeError):
    """Experiment configuration file is malformed."""
