"""Warp models: 4-point homographies and thin-plate splines on a control mesh.

Points are ``(x, y)`` rows of float arrays.  A homography maps target-image
coordinates into the reference frame; a :class:`ControlMesh` holds a uniform
lattice on the target image (``source``) and where those lattice points land
in the reference frame (``warped``).
"""

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import (
    DegenerateGeometryError,
    MeshFormatError,
    NonInvertibleError,
    PointAtInfinityError,
)

DET_TOL = 1e-8
DUPLICATE_TOL = 1e-9
DENOM_TOL = 1e-10


# --------------------------------------------------------------------------
# homography
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Homography:
    h: np.ndarray

    def __post_init__(self):
        h = np.array(self.h, dtype=np.float64).reshape(3, 3)
        if abs(h[2, 2]) > 1e-8:
            h = h / h[2, 2]
        if not np.all(np.isfinite(h)) or abs(np.linalg.det(h)) <= DET_TOL:
            raise NonInvertibleError(f"homography is not invertible (det={np.linalg.det(h):.3g})")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx, ty):
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))

    def inverse(self):
        return Homography(np.linalg.inv(self.h))

    def scaled(self, s):
        """The same warp expressed in coordinates multiplied by ``s``."""
        S = np.diag([s, s, 1.0])
        Si = np.diag([1.0 / s, 1.0 / s, 1.0])
        return Homography(S @ self.h @ Si)

    def __matmul__(self, other):
        return Homography(self.h @ other.h)

    def apply(self, pts):
        return apply_homography(self, pts)


def _project(h, pts):
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    num_x = h[0, 0] * flat[:, 0] + h[0, 1] * flat[:, 1] + h[0, 2]
    num_y = h[1, 0] * flat[:, 0] + h[1, 1] * flat[:, 1] + h[1, 2]
    den = h[2, 0] * flat[:, 0] + h[2, 1] * flat[:, 1] + h[2, 2]
    return num_x, num_y, den, pts.shape


def apply_homography(h, pts):
    """Projective action on one point ``(2,)`` or many ``(..., 2)``."""
    hm = h.h if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    num_x, num_y, den, shape = _project(hm, pts)
    if np.any(np.abs(den) < DENOM_TOL):
        raise PointAtInfinityError("point maps to infinity under the homography")
    out = np.stack([num_x / den, num_y / den], axis=-1)
    return out.reshape(shape)


def _check_no_collinear(pts, what):
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-12)
    for a, b, c in itertools.combinations(range(len(pts)), 3):
        u = pts[b] - pts[a]
        v = pts[c] - pts[a]
        if abs(u[0] * v[1] - u[1] * v[0]) <= 1e-9 * scale * scale:
            raise DegenerateGeometryError(f"three {what} corners are collinear")


def _normalizer(pts):
    # similarity taking the points into [-1, 1]^2
    centre = (pts.max(axis=0) + pts.min(axis=0)) / 2
    half = max(np.max(np.abs(pts - centre)), 1e-12)
    s = 1.0 / half
    return np.array([[s, 0, -s * centre[0]], [0, s, -s * centre[1]], [0, 0, 1.0]])


def solve_homography_4pt(src, dst):
    """DLT homography taking the four ``src`` corners onto ``dst``.

    Both corner sets are normalised into [-1, 1] before the 8x9 system is
    solved for its null vector by SVD.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(4, 2)
    _check_no_collinear(src, "source")
    _check_no_collinear(dst, "destination")
    Ts = _normalizer(src)
    Td = _normalizer(dst)
    s = apply_homography(Ts, src)
    d = apply_homography(Td, dst)
    A = np.zeros((8, 9))
    for k in range(4):
        x, y = s[k]
        u, v = d[k]
        A[2 * k] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        A[2 * k + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, sv, vt = np.linalg.svd(A)
    if sv[7] < 1e-10 * sv[0]:
        raise DegenerateGeometryError("rank-deficient DLT system")
    hn = vt[-1].reshape(3, 3)
    h = np.linalg.inv(Td) @ hn @ Ts
    return Homography(h)


def homography_dst_jacobian(src, h):
    """Derivative of the normalised 3x3 matrix w.r.t. the destination corners.

    ``h`` must be the homography solved from ``src``; the result has shape
    ``(3, 3, 4, 2)``.  Obtained by differentiating the 8x8 DLT system with
    ``h[2, 2] = 1``: ``A(dst) h = dst``.
    """
    src = np.asarray(src, dtype=np.float64).reshape(4, 2)
    hm = h.h if isinstance(h, Homography) else np.asarray(h)
    dst = apply_homography(hm, src)
    A = np.zeros((8, 8))
    for k in range(4):
        x, y = src[k]
        u, v = dst[k]
        A[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        A[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
    denom = hm[2, 0] * src[:, 0] + hm[2, 1] * src[:, 1] + 1.0
    Ainv = np.linalg.inv(A)
    J = np.zeros((9, 4, 2))
    for k in range(4):
        for c in range(2):
            J[:8, k, c] = Ainv[:, 2 * k + c] * denom[k]
    return J.reshape(3, 3, 4, 2)


# --------------------------------------------------------------------------
# thin-plate spline
# --------------------------------------------------------------------------

def radial_basis(r):
    """``r^2 ln r^2``, continuously extended by 0 at ``r = 0``."""
    r = np.asarray(r, dtype=np.float64)
    return kernel_from_sq(r * r)


def kernel_from_sq(d2):
    d2 = np.asarray(d2, dtype=np.float64)
    safe = np.where(d2 > 0, d2, 1.0)
    return np.where(d2 > 0, d2 * np.log(safe), 0.0)


def sq_dists(a, b):
    """Pairwise squared distances between rows of ``a`` and ``b``."""
    d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2.0 * (a @ b.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


@dataclass(frozen=True)
class TpsParams:
    """``p' = c + m p + sum_i w_i U(|p - anchor_i|)``."""

    c: np.ndarray
    m: np.ndarray
    w: np.ndarray
    anchors: np.ndarray

    @classmethod
    def identity(cls, anchors):
        anchors = np.asarray(anchors, dtype=np.float64)
        return cls(np.zeros(2), np.eye(2), np.zeros_like(anchors), anchors)

    def transform(self, pts):
        return tps_transform(self, pts)


def tps_system(anchors):
    """The symmetric ``(N+3) x (N+3)`` interpolation matrix on ``anchors``.

    Row/column order is ``[kernel | 1, x, y]``, i.e. the usual block system
    with the affine part appended after the radial weights.
    """
    n = len(anchors)
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = kernel_from_sq(sq_dists(anchors, anchors))
    L[:n, n] = 1.0
    L[:n, n + 1:] = anchors
    L[n, :n] = 1.0
    L[n + 1:, :n] = anchors.T
    return L


def _check_anchors(p):
    n = len(p)
    if n < 3:
        raise DegenerateGeometryError("a thin-plate spline needs at least 3 anchors")
    d2 = sq_dists(p, p)
    d2[np.diag_indices(n)] = np.inf
    if d2.min() < DUPLICATE_TOL ** 2:
        raise DegenerateGeometryError("coincident anchors")
    aff = np.column_stack([np.ones(n), p - p.mean(axis=0)])
    sv = np.linalg.svd(aff, compute_uv=False)
    if sv[-1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateGeometryError("anchors are collinear")


class TpsFactor:
    """LU factorisation of the interpolation system, reusable for adjoints."""

    def __init__(self, anchors):
        self.anchors = np.asarray(anchors, dtype=np.float64)
        _check_anchors(self.anchors)
        self.L = tps_system(self.anchors)
        self.lu = linalg.lu_factor(self.L, check_finite=False)
        diag = np.abs(np.diag(self.lu[0]))
        if not np.all(np.isfinite(diag)) or diag.min() <= 1e-13 * max(diag.max(), 1.0):
            raise DegenerateGeometryError("singular thin-plate spline system")

    def solve(self, rhs):
        return linalg.lu_solve(self.lu, rhs, check_finite=False)


def solve_tps(p, p_prime):
    """Interpolating thin-plate spline taking anchors ``p`` onto ``p_prime``.

    Solves the block system for the radial weights and the affine part under
    the side conditions ``sum w_i = 0`` and ``sum p_i w_i^T = 0``.
    """
    p = np.asarray(p, dtype=np.float64).reshape(-1, 2)
    p_prime = np.asarray(p_prime, dtype=np.float64).reshape(-1, 2)
    if p.shape != p_prime.shape:
        raise ValueError("anchor and target sets differ in size")
    fac = TpsFactor(p)
    return params_from_solution(fac.solve(np.vstack([p_prime, np.zeros((3, 2))])), p)


def params_from_solution(sol, anchors):
    n = len(anchors)
    return TpsParams(
        c=sol[n].copy(), m=sol[n + 1:].T.copy(), w=sol[:n].copy(), anchors=anchors
    )


def tps_transform(params, pts, chunk=16384):
    """Evaluate the spline at ``pts`` (any leading shape, trailing 2)."""
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    out = np.empty_like(flat)
    for s in range(0, len(flat), chunk):
        q = flat[s:s + chunk]
        U = kernel_from_sq(sq_dists(q, params.anchors))
        out[s:s + chunk] = params.c + q @ params.m.T + U @ params.w
    return out.reshape(pts.shape)


# --------------------------------------------------------------------------
# control mesh
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ControlMesh:
    """``rows x cols`` lattice on a ``width x height`` target image."""

    rows: int
    cols: int
    width: float
    height: float
    source: np.ndarray = field(repr=False)
    warped: np.ndarray = field(repr=False)

    def __post_init__(self):
        src = np.array(self.source, dtype=np.float64)
        wrp = np.array(self.warped, dtype=np.float64)
        if src.shape != (self.rows, self.cols, 2) or wrp.shape != src.shape:
            raise ValueError("source/warped must both have shape (rows, cols, 2)")
        src.setflags(write=False)
        wrp.setflags(write=False)
        object.__setattr__(self, "source", src)
        object.__setattr__(self, "warped", wrp)

    def with_warped(self, warped):
        return ControlMesh(self.rows, self.cols, self.width, self.height,
                           self.source, np.asarray(warped).reshape(self.rows, self.cols, 2))

    def rescaled(self, sx, sy=None):
        """Mesh for the same pair at a resolution scaled by ``(sx, sy)``."""
        sy = sx if sy is None else sy
        f = np.array([sx, sy])
        return ControlMesh(self.rows, self.cols, self.width * sx, self.height * sy,
                           self.source * f, self.warped * f)

    def boundary(self, which="warped"):
        """Closed boundary loop (without repeating the first vertex)."""
        g = self.warped if which == "warped" else self.source
        top = g[0, :]
        right = g[1:, -1]
        bottom = g[-1, -2::-1]
        left = g[-2:0:-1, 0]
        return np.concatenate([top, right, bottom, left])

    def to_dict(self):
        return {
            "rows": self.rows,
            "cols": self.cols,
            "width": float(self.width),
            "height": float(self.height),
            "source": self.source.reshape(-1, 2).tolist(),
            "warped": self.warped.reshape(-1, 2).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        try:
            rows, cols = int(d["rows"]), int(d["cols"])
            src = np.asarray(d["source"], dtype=np.float64).reshape(rows, cols, 2)
            wrp = np.asarray(d["warped"], dtype=np.float64).reshape(rows, cols, 2)
            return cls(rows, cols, float(d["width"]), float(d["height"]), src, wrp)
        except (KeyError, TypeError, ValueError) as exc:
            raise MeshFormatError(f"malformed mesh: {exc}") from exc

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        try:
            d = json.loads(text)
        except json.JSONDecodeError as exc:
            raise MeshFormatError(f"mesh file is not valid JSON: {exc}") from exc
        if not isinstance(d, dict):
            raise MeshFormatError("mesh JSON must be an object")
        return cls.from_dict(d)


def make_control_grid(rows, cols, width, height):
    if rows < 2 or cols < 2:
        raise ValueError("a control grid needs at least 2 rows and 2 columns")
    xs = np.linspace(0.0, width, cols)
    ys = np.linspace(0.0, height, rows)
    gx, gy = np.meshgrid(xs, ys)
    src = np.stack([gx, gy], axis=-1)
    return ControlMesh(rows, cols, float(width), float(height), src, src.copy())


def mesh_from_homography(mesh, h):
    return mesh.with_warped(apply_homography(h, mesh.source))
