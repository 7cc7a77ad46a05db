"""Exception types shared across the toolkit."""


class HandReconError(Exception):
    """Base class for all toolkit errors."""


class InvalidInputError(HandReconError, ValueError):
    pass


class ShapeError(HandReconError, ValueError):
    pass


class BehindCameraError(HandReconError, ValueError):
    """Raised when points sit at or behind the minimum projectable depth."""

    def __init__(self, indices, min_depth):
        self.indices = list(indices)
        self.min_depth = min_depth
        shown = self.indices[:10]
        more = "" if len(self.indices) <= 10 else f" (+{len(self.indices) - 10} more)"
        super().__init__(f"points {shown}{more} have depth <= {min_depth}")


class InvalidCameraError(HandReconError, ValueError):
    pass


class DegenerateAlignmentError(HandReconError, ValueError):
    pass


class EmptySetError(HandReconError, ValueError):
    pass


class AssetError(HandReconError, ValueError):
    """Malformed or invariant-violating hand model asset."""


class FormatError(HandReconError, ValueError):
    """Malformed record in a line-delimited file; carries the 1-based line number."""

    def __init__(self, message, line=None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
