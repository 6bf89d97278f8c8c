"""Exception hierarchy shared across the package."""


class MPGDError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(MPGDError, ValueError):
    pass


class NonFiniteError(MPGDError, FloatingPointError):
    pass


class FormatError(MPGDError, ValueError):
    """A persisted file is malformed, truncated or of the wrong kind."""


class DivergenceError(MPGDError, RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(MPGDError, ValueError):
    pass


class TheoryAssertionError(MPGDError, AssertionError):
    """A convergence inequality that must hold was violated."""
