"""Exception hierarchy shared by the library and the CLI."""


class RelPoseError(Exception):
    """Base class for all library errors."""


class InvalidArgumentError(RelPoseError, ValueError):
    pass


class SingularRotationError(RelPoseError, ValueError):
    """Logarithm requested at (or too close to) a rotation angle of pi."""


class DegenerateGeometryError(RelPoseError):
    """Jacobians or normal equations lose rank (coincident tags, zero range...)."""


class NoSolutionError(RelPoseError):
    pass


class NumericalFailureError(RelPoseError):
    pass


class ConfigError(RelPoseError):
    pass


class DataError(RelPoseError):
    pass
