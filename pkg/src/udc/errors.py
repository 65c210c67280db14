"""Exception types shared across the package."""


class UDCError(Exception):
    """Base class; the CLI maps these to a JSON error payload."""

    kind = "error"


class DimensionError(UDCError, ValueError):
    kind = "dimension"


class ContractError(UDCError, ValueError):
    kind = "contract"


class ConfigError(UDCError, ValueError):
    kind = "config"


class ParseError(UDCError, ValueError):
    kind = "parse"

    def __init__(self, message, offenders=None):
        super().__init__(message)
        self.offenders = list(offenders or [])


class DivergenceError(UDCError, FloatingPointError):
    kind = "divergence"


class MissingCheckpointError(UDCError, FileNotFoundError):
    kind = "missing_checkpoint"
