"""Unsupervised-style image stitching with thin-plate-spline mesh warps."""

from .errors import (DegenerateGeometryError, EmptyRegionError, MeshFormatError,
                     NoOverlapError, NonInvertibleError, ParameterRangeError,
                     PointAtInfinityError, ShapeMismatchError, StitchError)
from .geometry import ControlMesh, Homography, make_control_grid, solve_homography_4pt, solve_tps

__version__ = "0.1.0"
