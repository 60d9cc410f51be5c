class MemshapeError(Exception):
    """Base class for errors raised by memshape."""


class ConfigError(MemshapeError, ValueError):
    """Invalid configuration or environment parameters."""


class InvalidActionError(MemshapeError, ValueError):
    pass


class DimensionError(MemshapeError, ValueError):
    pass


class TrainingDivergenceError(MemshapeError, ArithmeticError):
    """Raised when a loss or gradient becomes non-finite."""


class PriorParseError(MemshapeError, ValueError):
    """A prior/graph document violates the schema."""


class DanglingReferenceError(MemshapeError, KeyError):
    """A goal term or edge references a node that does not exist."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class FormatError(MemshapeError, ValueError):
    """A metrics CSV or run directory does not have the expected layout."""
