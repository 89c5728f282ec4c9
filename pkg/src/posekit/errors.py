"""Exception types shared across the package."""


class PosekitError(Exception):
    """Base class for every error raised by this package."""


class EmptyInput(PosekitError):
    """An operation that needs data received an empty cloud or list."""


class InvalidParameter(PosekitError):
    pass


class InvalidRotation(PosekitError):
    """Matrix is not a proper rotation within the accepted tolerance."""


class ParseError(PosekitError):
    """A file could not be parsed; carries path and line number when known."""

    def __init__(self, message, path=None, line=None):
        loc = str(path) if path is not None else ""
        if line is not None:
            loc += f":{line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class DuplicateId(PosekitError):
    pass


class DegenerateVectors(PosekitError):
    """Vector inputs are zero or too close to parallel to define a frame."""


class UnsupportedForFiniteGroup(PosekitError):
    """The requested operation needs a finite symmetry group."""


class ShapeError(PosekitError):
    pass


class StateError(PosekitError):
    pass


class LabelRequired(PosekitError):
    """The operation needs a labelled cloud but labels are missing."""


class CategoryMismatch(PosekitError):
    pass


class MissingGroundTruth(PosekitError):
    def __init__(self, ids):
        ids = sorted(ids)
        super().__init__("no ground truth for ids: " + ", ".join(ids))
        self.ids = ids


class SegmentationEmpty(PosekitError):
    """Segmentation produced no object points, so no pose can be recovered."""
