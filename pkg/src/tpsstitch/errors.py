"""Exception hierarchy.

Every failure the pipeline can signal maps onto one of these classes, and the
command-line front end maps each class onto its own exit code.
"""


class StitchError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateGeometryError(StitchError):
    """Collinear corners, coincident anchors, singular systems, folded quads."""


class NonInvertibleError(DegenerateGeometryError):
    pass


class PointAtInfinityError(DegenerateGeometryError):
    pass


class EmptyRegionError(StitchError, ValueError):
    """A metric or energy was asked to average over an empty region."""


class NoOverlapError(StitchError):
    pass


class ParameterRangeError(StitchError, ValueError):
    pass


class ShapeMismatchError(StitchError, ValueError):
    pass


class MeshFormatError(StitchError, ValueError):
    """A serialized mesh or field file could not be parsed."""
