"""Stitching canvas and backward warping under homography or TPS warps.

Every canvas pixel looks up where it comes from in the target image (a
:class:`WarpField`) and is filled by bilinear sampling.  Reference-frame
coordinates are canvas coordinates minus ``Canvas.offset``.
"""

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import geometry
from ._io import write_bytes
from .errors import MeshFormatError
from .imagecore import SNAP_TOL, as_image, sample_bilinear

FIELD_MAGIC = "TPSFIELD v1"


@dataclass(frozen=True)
class Canvas:
    width: int
    height: int
    offset: tuple = (0, 0)

    @classmethod
    def for_image(cls, img):
        return cls(img.shape[1], img.shape[0], (0, 0))

    @property
    def shape(self):
        return (self.height, self.width)

    def ref_points(self, rows=None):
        """Reference-frame coordinates of canvas pixels, shape ``(h, w, 2)``."""
        rows = range(self.height) if rows is None else rows
        ys = np.asarray(rows, dtype=np.float64) - self.offset[1]
        xs = np.arange(self.width, dtype=np.float64) - self.offset[0]
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def ref_footprint(self, ref_shape):
        """0/1 mask of where a reference image of ``ref_shape`` sits."""
        m = np.zeros(self.shape)
        ox, oy = self.offset
        m[oy:oy + ref_shape[0], ox:ox + ref_shape[1]] = 1.0
        return m


def compute_canvas(ref, warped_outline):
    """Integer bounding box of the reference rectangle and a warped outline."""
    h, w = np.asarray(ref).shape[:2]
    pts = np.vstack([np.asarray(warped_outline, dtype=np.float64).reshape(-1, 2),
                     [[0.0, 0.0], [w, h]]])
    if not np.all(np.isfinite(pts)):
        raise ValueError("warped outline contains non-finite points")
    lo = np.floor(pts.min(axis=0) + 1e-6).astype(int)
    hi = np.ceil(pts.max(axis=0) - 1e-6).astype(int)
    return Canvas(int(hi[0] - lo[0]), int(hi[1] - lo[1]), (int(-lo[0]), int(-lo[1])))


@dataclass(frozen=True)
class WarpField:
    """Per canvas pixel, its source position in the target image.

    ``src`` is ``(h, w, 2)`` with NaN where ``valid`` is False.
    """

    src: np.ndarray
    valid: np.ndarray

    @property
    def shape(self):
        return self.valid.shape

    def dump(self, path):
        h, w = self.shape
        header = f"{FIELD_MAGIC} {w} {h}\n".encode("ascii")
        planes = np.ascontiguousarray(np.moveaxis(self.src, -1, 0), dtype="<f4")
        write_bytes(path, header + planes.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            data = fh.read()
        nl = data.find(b"\n")
        parts = data[:nl].decode("ascii", "replace").split() if nl > 0 else []
        if len(parts) != 4 or " ".join(parts[:2]) != FIELD_MAGIC:
            raise MeshFormatError("not a TPSFIELD v1 raster")
        w, h = int(parts[2]), int(parts[3])
        body = np.frombuffer(data[nl + 1:], dtype="<f4")
        if body.size != 2 * w * h:
            raise MeshFormatError("field raster has the wrong payload size")
        src = np.moveaxis(body.reshape(2, h, w), 0, -1).astype(np.float64)
        return cls(src, np.all(np.isfinite(src), axis=-1))


def in_bounds(pts, size):
    w, h = size
    x, y = pts[..., 0], pts[..., 1]
    return (x > -SNAP_TOL) & (x < w - 1 + SNAP_TOL) & (y > -SNAP_TOL) & (y < h - 1 + SNAP_TOL)


def _finish(src, valid):
    src = np.where(valid[..., None], src, np.nan)
    return WarpField(src, valid)


def field_from_homography(h, canvas, src_size):
    """Backward field sampling a ``src_size = (w, h)`` target through ``h``."""
    hinv = h.inverse().h
    pts = canvas.ref_points()
    num_x, num_y, den, _ = geometry._project(hinv, pts)
    # orientation of the target centre decides which side of the horizon is real
    cx, cy = src_size[0] / 2.0, src_size[1] / 2.0
    fwd = h.h
    sign = np.sign(fwd[2, 0] * cx + fwd[2, 1] * cy + fwd[2, 2]) or 1.0
    ok = den * sign > 1e-10
    safe = np.where(ok, den, 1.0)
    src = np.stack([num_x / safe, num_y / safe], axis=-1).reshape(pts.shape)
    valid = ok.reshape(canvas.shape) & in_bounds(src, src_size)
    return _finish(src, valid)


def points_in_polygon(pts, poly, tol=1e-6):
    """Even-odd containment; points within ``tol`` of an edge count as inside."""
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    px, py = flat[:, 0], flat[:, 1]
    inside = np.zeros(len(flat), dtype=bool)
    on_edge = np.zeros(len(flat), dtype=bool)
    a = poly
    b = np.roll(poly, -1, axis=0)
    for (ax, ay), (bx, by) in zip(a, b):
        crosses = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            xint = (bx - ax) * (py - ay) / (by - ay) + ax
        inside ^= crosses & (px < xint)
        ex, ey = bx - ax, by - ay
        L2 = ex * ex + ey * ey
        t = np.clip(((px - ax) * ex + (py - ay) * ey) / L2, 0.0, 1.0) if L2 > 0 else 0.0
        dx = ax + t * ex - px
        dy = ay + t * ey - py
        on_edge |= dx * dx + dy * dy <= tol * tol
    return (inside | on_edge).reshape(pts.shape[:-1])


def _segments_cross(p1, p2, p3, p4):
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1 = orient(p3, p4, p1)
    d2 = orient(p3, p4, p2)
    d3 = orient(p1, p2, p3)
    d4 = orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def polygon_self_intersects(poly):
    n = len(poly)
    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n]):
                return True
    return False


def count_folds(mesh):
    """Number of cells whose warped quad lost the lattice orientation.

    A cell counts as folded when any of its four corner turns has flipped
    sign (or vanished) relative to the corresponding source cell.
    """
    def turns(g):
        q = [g[:-1, :-1], g[:-1, 1:], g[1:, 1:], g[1:, :-1]]
        out = []
        for k in range(4):
            a, b, c = q[k - 1], q[k], q[(k + 1) % 4]
            u = b - a
            v = c - b
            out.append(u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0])
        return np.stack(out)

    ref = np.sign(turns(mesh.source))
    cur = turns(mesh.warped) * ref
    return int(np.sum(np.any(cur <= 1e-12, axis=0)))


def field_from_mesh(mesh, canvas, src_size=None):
    """Backward TPS field of a control mesh.

    The spline is fitted with the warped points as anchors and the source
    lattice as targets, so each canvas pixel is one closed-form evaluation.
    Pixels outside the warped boundary polygon are invalid.  ``src_size``
    defaults to the mesh's image size.
    """
    if src_size is None:
        src_size = (int(round(mesh.width)), int(round(mesh.height)))
    params = geometry.solve_tps(mesh.warped.reshape(-1, 2), mesh.source.reshape(-1, 2))
    poly = mesh.boundary("warped")
    if polygon_self_intersects(poly):
        warnings.warn("warped mesh boundary self-intersects", RuntimeWarning, stacklevel=2)
    pts = canvas.ref_points()
    lo = poly.min(axis=0) - 1.0
    hi = poly.max(axis=0) + 1.0
    box = np.all((pts >= lo) & (pts <= hi), axis=-1)
    cand = np.flatnonzero(box.ravel())
    flat = pts.reshape(-1, 2)
    src = np.full(flat.shape, np.nan)
    valid = np.zeros(len(flat), dtype=bool)
    if cand.size:
        inside = points_in_polygon(flat[cand], poly)
        idx = cand[inside]
        s = geometry.tps_transform(params, flat[idx])
        src[idx] = s
        valid[idx] = in_bounds(s, src_size)
    return _finish(src.reshape(pts.shape), valid.reshape(canvas.shape))


def warp(img, field, workers=1):
    """Backward-warp ``img`` through ``field``; returns ``(warped, validity)``.

    Rows are processed in disjoint chunks, so ``workers > 1`` gives the same
    bytes as the sequential path.
    """
    img = as_image(img)
    h, w = field.shape

    def run(rows):
        s = field.src[rows]
        v = field.valid[rows]
        xs = np.where(v, s[..., 0], -10.0)
        ys = np.where(v, s[..., 1], -10.0)
        vals, ok = sample_bilinear(img, xs, ys)
        ok &= v
        return np.where(ok[..., None], vals, 0.0), ok.astype(np.float64)

    out = np.zeros((h, w, img.shape[2]))
    validity = np.zeros((h, w))
    step = max(1, -(-h // max(1, 4 * workers)))
    chunks = [slice(r, min(h, r + step)) for r in range(0, h, step)]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    for c, (vals, ok) in zip(chunks, results):
        out[c] = vals
        validity[c] = ok
    return out, validity


def place_reference(ref, canvas):
    """Reference image pasted onto the canvas, with its footprint mask."""
    ref = as_image(ref)
    out = np.zeros(canvas.shape + (ref.shape[2],))
    ox, oy = canvas.offset
    out[oy:oy + ref.shape[0], ox:ox + ref.shape[1]] = ref
    return out, canvas.ref_footprint(ref.shape)
