"""Exception hierarchy. The CLI maps each family to an exit code."""


class LatentAugmentError(Exception):
    """Base class for all package errors."""


class ShapeError(LatentAugmentError, ValueError):
    pass


class ConfigError(LatentAugmentError, ValueError):
    pass


class PolicyError(ConfigError):
    pass


class FormatError(LatentAugmentError):
    """A persisted file is malformed, truncated, or of the wrong kind."""


class ArtifactError(LatentAugmentError):
    """An upstream artifact is missing or incompatible with the current config."""


class NumericError(LatentAugmentError, ArithmeticError):
    """Training produced a non-finite value."""
