"""Exception types shared across the package."""


class AnnotkitError(Exception):
    """Base class for all errors raised by this package."""


class InvalidCanvasError(AnnotkitError):
    """Canvas dimensions are not positive."""


class CorruptMaskError(AnnotkitError):
    """Run-length data violates the mask invariants."""


class CanvasMismatchError(AnnotkitError):
    """Two values that must share a canvas do not."""


class OutOfBoundsError(AnnotkitError):
    """A point lies outside the canvas."""


class EmptyMaskError(AnnotkitError):
    """Operation requires a mask with at least one set pixel."""


class NumericalDegenerateError(AnnotkitError):
    """Covariance is singular; unreachable once regularization is applied."""


class UnknownSegmentError(AnnotkitError):
    """Segment id is not part of the active set (or proposal set)."""


class UnknownLabelError(AnnotkitError):
    """Label is not part of the session's catalog."""


class NoCandidatesError(AnnotkitError):
    """An add click landed where no candidate segment exists."""


class InvalidActionError(AnnotkitError):
    """Action parameters violate a precondition."""


class InvalidPolygonError(AnnotkitError):
    """Polygon has fewer than three vertices."""


class EmptyInputError(AnnotkitError):
    """An aggregate was requested over zero inputs."""


class ManifestError(AnnotkitError):
    """Dataset file is missing, malformed, or inconsistent.

    ``location`` pinpoints the offending element (file, image id, field).
    """

    def __init__(self, message, location=None):
        self.location = location
        super().__init__(message if location is None else f"{message} (at {location})")


class SchemaError(ManifestError):
    """Dataset JSON does not match the expected schema."""


class VersionError(ManifestError):
    """File was written by an unsupported format version."""
