"""Exception hierarchy shared by all crisp modules."""


class CrispError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(CrispError, ValueError):
    """Operands have incompatible or unexpected shapes."""


class DegenerateError(CrispError, ValueError):
    """Input is mathematically degenerate (zero vector, zero variance,
    empty foreground, coincident directions)."""


class FormatError(CrispError, ValueError):
    """A serialized file is malformed: bad magic, truncated payload,
    or inconsistent header."""


class ConfigError(CrispError, ValueError):
    """A configuration value is invalid or inconsistent."""


class InputError(CrispError, ValueError):
    """Runtime data is out of range or misaligned."""
