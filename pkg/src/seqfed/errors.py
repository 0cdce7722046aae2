"""Exception types raised across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class InputError(ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class SchemaError(ValueError):
    """An input file is missing a required column or is malformed."""


class PreprocessingError(ValueError):
    """Preprocessing left nothing usable."""


class ProtocolError(RuntimeError):
    """A protocol step was invoked in an invalid state."""


class CodecError(ValueError):
    """A binary payload could not be decoded."""
