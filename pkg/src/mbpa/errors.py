"""Exception types shared across the package."""


class MbpaError(Exception):
    """Base class for all package errors."""


class ShapeError(MbpaError, ValueError):
    """An input has the wrong dimensionality."""


class EmptyBatchError(MbpaError, ValueError):
    pass


class NonFiniteError(MbpaError, FloatingPointError):
    """Raised when an activation becomes inf/nan; ``layer`` names where."""

    def __init__(self, layer, message=None):
        self.layer = layer
        super().__init__(message or f"non-finite activation in layer {layer!r}")


class EmptyMemoryError(MbpaError, LookupError):
    """Lookup on a memory with no entries."""


class FormatError(MbpaError, ValueError):
    """Binary file does not match the expected on-disk format."""


class ConfigError(MbpaError, ValueError):
    """Invalid run configuration. ``path`` is the dotted key at fault."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
