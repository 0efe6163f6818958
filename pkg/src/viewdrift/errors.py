"""Exception types raised across the package."""


class ViewDriftError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ViewDriftError, ValueError):
    pass


class DegenerateGeometryError(ViewDriftError, ValueError):
    """Raised when two poses coincide and an angle is undefined."""


class NotVisibleError(ViewDriftError, ValueError):
    """Raised when a box lies (partly) behind the camera plane."""


class NumericalFailureError(ViewDriftError, ArithmeticError):
    """Raised when a covariance stops being positive definite."""


class DegenerateGroupError(ViewDriftError, ValueError):
    """Raised when the group attack directions cancel out."""


class UndefinedMetricError(ViewDriftError, ZeroDivisionError):
    pass
