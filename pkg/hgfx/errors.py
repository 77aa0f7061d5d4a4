class HGFXError(Exception):
    """Base error. ``exit_code`` is what the CLI returns for this category."""

    exit_code = 1


class ConfigError(HGFXError):
    exit_code = 1


class ShapeError(ConfigError):
    """Tensor or parameter dimensions don't agree."""


class StructureError(ConfigError):
    """Malformed tree, permutation or index structure."""


class DataError(HGFXError):
    exit_code = 2


class NumericError(HGFXError):
    exit_code = 3


class GradError(HGFXError):
    """Gradient tape misuse: detached or non-scalar loss, double backward."""

    exit_code = 3


class VerificationError(HGFXError):
    exit_code = 4
