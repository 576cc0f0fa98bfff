"""Warp-stage objective: masked photometric alignment plus mesh distortion.

The scalar terms mirror the public contract (``alignment_term``,
``intra_grid_term`` ...).  The ``*_grad`` variants and :class:`TpsAlignment`
return analytic gradients for the optimiser; the TPS one differentiates
through the linear solve that fits the backward spline, so moving a control
point changes both the system matrix and the radial kernels.
"""

import csv
import io
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from . import geometry
from .imagecore import as_image, sample_bilinear
from .warp_engine import Canvas, field_from_homography, in_bounds, points_in_polygon

# residuals below this are treated as exact matches (subgradient 0)
RESIDUAL_DEADZONE = 1e-9


@dataclass(frozen=True)
class WarpLossWeights:
    omega: float = 10.0
    lam: float = 3.0

    def __post_init__(self):
        if self.omega < 0 or self.lam < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class EdgeLabels:
    """0/1 flags per successive edge pair.

    ``horizontal[i, j]`` covers vertices ``(i, j..j+2)``; ``vertical[i, j]``
    covers ``(i..i+2, j)``.
    """

    horizontal: np.ndarray
    vertical: np.ndarray

    @classmethod
    def full(cls, rows, cols, value=1):
        return cls(np.full((rows, cols - 2), value, dtype=bool),
                   np.full((rows - 2, cols), value, dtype=bool))

    @property
    def count(self):
        return self.horizontal.size + self.vertical.size


@dataclass
class LossBreakdown:
    iter: int
    align: float
    h_align: float
    intra: float
    inter: float
    total: float


LOSS_COLUMNS = ("iter", "align", "h_align", "intra", "inter", "total")


def loss_history_csv(history):
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(LOSS_COLUMNS)
    for row in history:
        d = asdict(row)
        wr.writerow([d["iter"]] + [f"{d[k]:.9g}" for k in LOSS_COLUMNS[1:]])
    return buf.getvalue()


# --------------------------------------------------------------------------
# photometric alignment
# --------------------------------------------------------------------------

def masked_l1(ref_vals, tgt, src, extra_valid=None, with_grad=True):
    """Mean |R - T(src)| over pixels whose sample is valid.

    ``ref_vals`` is ``(P, C)``, ``src`` is ``(P, 2)``.  Returns
    ``(loss, dloss/dsrc, overlap)``; the overlap is held fixed when
    differentiating.
    """
    if with_grad:
        vals, ok, gx, gy = sample_bilinear(tgt, src[:, 0], src[:, 1], with_grad=True)
    else:
        vals, ok = sample_bilinear(tgt, src[:, 0], src[:, 1])
    if extra_valid is not None:
        ok &= extra_valid
    n = int(ok.sum())
    chans = ref_vals.shape[1]
    grad = np.zeros_like(src) if with_grad else None
    if n == 0:
        warnings.warn("alignment overlap is empty", RuntimeWarning, stacklevel=3)
        return 0.0, grad, ok
    r = vals[ok] - ref_vals[ok]
    loss = float(np.abs(r).sum() / (n * chans))
    if with_grad:
        s = np.where(np.abs(r) < RESIDUAL_DEADZONE, 0.0, np.sign(r)) / (n * chans)
        grad[ok, 0] = (s * gx[ok]).sum(axis=1)
        grad[ok, 1] = (s * gy[ok]).sum(axis=1)
    return loss, grad, ok


def alignment_term(ref, tgt, field, ref_placement):
    """Masked L1 between the placed reference and the warped target.

    Averaged over canvas pixels inside both the reference footprint and the
    warped target's validity mask.
    """
    ref = as_image(ref)
    tgt = as_image(tgt)
    foot = ref_placement.ref_footprint(ref.shape) > 0
    sel = foot & field.valid
    ox, oy = ref_placement.offset
    ii, jj = np.nonzero(sel)
    rv = ref[ii - oy, jj - ox]
    loss, _, _ = masked_l1(rv, tgt, field.src[ii, jj], with_grad=False)
    return loss


def homography_alignment(ref, tgt, h):
    """Symmetric homography term: target into reference plus the reverse.

    Not weighted; the caller multiplies by the homography weight.
    """
    ref = as_image(ref)
    tgt = as_image(tgt)
    c_ref = Canvas.for_image(ref)
    c_tgt = Canvas.for_image(tgt)
    fwd = alignment_term(ref, tgt, field_from_homography(h, c_ref, (tgt.shape[1], tgt.shape[0])), c_ref)
    inv = alignment_term(tgt, ref, field_from_homography(h.inverse(), c_tgt, (ref.shape[1], ref.shape[0])), c_tgt)
    return fwd + inv


def _pixel_grid(h, w):
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return np.column_stack([gx.ravel(), gy.ravel()])


def _projective_term(img_a, img_b, hm, pts, with_grad):
    """Masked L1 of ``img_a`` at ``pts`` vs ``img_b`` sampled at ``hm(pts)``.

    Returns the loss and its gradient with respect to the 3x3 matrix ``hm``.
    """
    v = np.column_stack([pts, np.ones(len(pts))]) @ hm.T
    ok = v[:, 2] > 1e-10
    den = np.where(ok, v[:, 2], 1.0)
    src = v[:, :2] / den[:, None]
    src[~ok] = -10.0
    loss, g, _ = masked_l1(img_a.reshape(-1, img_a.shape[2]), img_b, src, ok, with_grad)
    if not with_grad:
        return loss, None
    a = g / den[:, None]
    dv = np.column_stack([a, -(a * src).sum(axis=1)])
    return loss, dv.T @ np.column_stack([pts, np.ones(len(pts))])


def homography_alignment_grad(ref, tgt, src_corners, dst_corners, with_grad=True):
    """Symmetric homography term and its gradient w.r.t. ``dst_corners``.

    The homography is the 4-point DLT solution taking the target's
    ``src_corners`` onto ``dst_corners`` in the reference frame.
    """
    H = geometry.solve_homography_4pt(src_corners, dst_corners)
    hm = H.h
    hinv = np.linalg.inv(hm)
    pr = _pixel_grid(*ref.shape[:2])
    pt = _pixel_grid(*tgt.shape[:2])
    # orientation so that the target centre has a positive denominator
    if hm[2] @ [tgt.shape[1] / 2, tgt.shape[0] / 2, 1.0] < 0:
        hm = -hm
        hinv = -hinv
    fwd, g_inv = _projective_term(ref, tgt, hinv, pr, with_grad)
    inv, g_h = _projective_term(tgt, ref, hm, pt, with_grad)
    value = fwd + inv
    if not with_grad:
        return value, None, H
    dH = g_h - hinv.T @ g_inv @ hinv.T
    if H.h[2, 2] * hm[2, 2] < 0:
        dH = -dH
    J = geometry.homography_dst_jacobian(src_corners, H)
    return value, np.einsum("ij,ijkc->kc", dH, J), H


class TpsAlignment:
    """Backward-TPS alignment of a target onto a reference, with gradient.

    The reference frame is the evaluation canvas.  ``source`` is the fixed
    lattice on the target; calls take the current warped lattice.
    """

    def __init__(self, ref, tgt, rows, cols, source, chunk=16384):
        self.ref = as_image(ref)
        self.tgt = as_image(tgt)
        self.rows, self.cols = rows, cols
        self.source = np.asarray(source, dtype=np.float64).reshape(-1, 2)
        self.pts = _pixel_grid(*self.ref.shape[:2])
        self.ref_vals = self.ref.reshape(-1, self.ref.shape[2])
        self.tgt_size = (self.tgt.shape[1], self.tgt.shape[0])
        self.chunk = chunk

    def _boundary(self, q):
        g = q.reshape(self.rows, self.cols, 2)
        return np.concatenate([g[0, :], g[1:, -1], g[-1, -2::-1], g[-2:0:-1, 0]])

    def __call__(self, warped, with_grad=True):
        q = np.asarray(warped, dtype=np.float64).reshape(-1, 2)
        n = len(q)
        fac = geometry.TpsFactor(q)
        sol = fac.solve(np.vstack([self.source, np.zeros((3, 2))]))
        w, aff = sol[:n], sol[n:]

        poly = self._boundary(q)
        lo = poly.min(axis=0) - 1.0
        hi = poly.max(axis=0) + 1.0
        cand = np.flatnonzero(np.all((self.pts >= lo) & (self.pts <= hi), axis=1))
        cand = cand[points_in_polygon(self.pts[cand], poly)]
        X = self.pts[cand]

        src = np.empty_like(X)
        cache = []
        for s in range(0, len(X), self.chunk):
            xs = X[s:s + self.chunk]
            d2 = geometry.sq_dists(xs, q)
            lg = np.log(np.where(d2 > 0, d2, 1.0))
            U = d2 * lg
            src[s:s + self.chunk] = U @ w + aff[0] + xs @ aff[1:]
            if with_grad:
                cache.append((U, lg))
        inb = in_bounds(src, self.tgt_size)
        loss, g, ok = masked_l1(self.ref_vals[cand], self.tgt, src, inb, with_grad)
        if not with_grad:
            return loss, None
        grad = np.zeros_like(q)
        if not np.any(ok):
            return loss, grad

        # g vanishes off the overlap, so every row can take part below
        G = np.zeros_like(sol)
        G[n] = g.sum(axis=0)
        G[n + 1:] = X.T @ g
        for k, (U, lg) in enumerate(cache):
            s = k * self.chunk
            xs, gs = X[s:s + self.chunk], g[s:s + self.chunk]
            G[:n] += U.T @ gs
            # direct dependence of the radial kernels on the anchors; the
            # (x - q) factor already kills the r = 0 case
            E = (gs @ w.T) * (lg + 1.0)
            grad += -2.0 * (E.T @ xs - E.sum(axis=0)[:, None] * q)

        # adjoint of the solve: d(loss)/dL = -lambda sol^T with L lambda = G
        lam = fac.solve(G)
        dL = -lam @ sol.T
        dK = dL[:n, :n] + dL[:n, :n].T
        d2q = geometry.sq_dists(q, q)
        coef = dK * 2.0 * (np.log(np.where(d2q > 0, d2q, 1.0)) + 1.0)
        grad += coef.sum(axis=1)[:, None] * q - coef @ q
        grad += dL[:n, n + 1:] + dL[n + 1:, :n].T
        return loss, grad


# --------------------------------------------------------------------------
# distortion terms
# --------------------------------------------------------------------------

def intra_grid_grad(warped, width, height):
    """Edge-length hinge on the warped mesh and its gradient.

    Horizontal edges whose x-extent exceeds twice the nominal cell width are
    penalised linearly, likewise vertical edges in y.
    """
    g = np.asarray(warped, dtype=np.float64)
    rows, cols = g.shape[:2]
    U, V = rows - 1, cols - 1
    eh = g[:, 1:, 0] - g[:, :-1, 0] - 2.0 * width / V
    ev = g[1:, :, 1] - g[:-1, :, 1] - 2.0 * height / U
    nh = (U + 1) * V
    nv = U * (V + 1)
    value = np.maximum(eh, 0).sum() / nh + np.maximum(ev, 0).sum() / nv
    grad = np.zeros_like(g)
    ah = (eh > 0) / nh
    av = (ev > 0) / nv
    grad[:, 1:, 0] += ah
    grad[:, :-1, 0] -= ah
    grad[1:, :, 1] += av
    grad[:-1, :, 1] -= av
    return float(value), grad


def intra_grid_term(mesh):
    return intra_grid_grad(mesh.warped, mesh.width, mesh.height)[0]


def _pair_cos_grad(e1, e2, lab):
    n1 = np.linalg.norm(e1, axis=-1)
    n2 = np.linalg.norm(e2, axis=-1)
    degen = (n1 < 1e-9) | (n2 < 1e-9)
    s1 = np.where(degen, 1.0, n1)
    s2 = np.where(degen, 1.0, n2)
    cos = (e1 * e2).sum(-1) / (s1 * s2)
    val = np.where(degen, 2.0, 1.0 - cos) * lab
    live = (lab & ~degen)[..., None]
    d1 = -(e2 / (s1 * s2)[..., None] - cos[..., None] * e1 / (s1 * s1)[..., None])
    d2 = -(e1 / (s1 * s2)[..., None] - cos[..., None] * e2 / (s2 * s2)[..., None])
    return val.sum(), np.where(live, d1, 0.0), np.where(live, d2, 0.0)


def inter_grid_grad(warped, labels):
    """Collinearity penalty on labelled successive edge pairs, with gradient."""
    g = np.asarray(warped, dtype=np.float64)
    grad = np.zeros_like(g)
    total = 0.0
    if labels.horizontal.size:
        eh = g[:, 1:] - g[:, :-1]
        v, d1, d2 = _pair_cos_grad(eh[:, :-1], eh[:, 1:], labels.horizontal)
        total += v
        grad[:, :-2] -= d1
        grad[:, 1:-1] += d1 - d2
        grad[:, 2:] += d2
    if labels.vertical.size:
        ev = g[1:] - g[:-1]
        v, d1, d2 = _pair_cos_grad(ev[:-1], ev[1:], labels.vertical)
        total += v
        grad[:-2] -= d1
        grad[1:-1] += d1 - d2
        grad[2:] += d2
    q = labels.count
    if q == 0:
        return 0.0, grad
    return float(total / q), grad / q


def inter_grid_term(mesh, labels):
    return inter_grid_grad(mesh.warped, labels)[0]


def label_nonoverlap_edges(mesh, overlap, canvas):
    """Flag edge pairs whose three vertices all sit outside the overlap.

    A vertex reads the overlap mask at its nearest canvas pixel; vertices
    off the canvas read 0.
    """
    overlap = np.asarray(overlap, dtype=np.float64)
    pos = np.rint(mesh.warped + np.asarray(canvas.offset, dtype=np.float64)).astype(np.int64)
    x, y = pos[..., 0], pos[..., 1]
    inside = (x >= 0) & (x < canvas.width) & (y >= 0) & (y < canvas.height)
    val = np.zeros(mesh.warped.shape[:2])
    val[inside] = overlap[y[inside], x[inside]]
    out = val < 0.5
    hor = out[:, :-2] & out[:, 1:-1] & out[:, 2:]
    ver = out[:-2] & out[1:-1] & out[2:]
    return EdgeLabels(hor, ver)


def reference_overlap_labels(mesh, ref_shape):
    """Labels against the reference footprint: every mesh vertex already lies
    in the target footprint, so overlap reduces to "inside the reference"."""
    from .warp_engine import compute_canvas

    canvas = compute_canvas(np.zeros(ref_shape[:2]), mesh.warped.reshape(-1, 2))
    return label_nonoverlap_edges(mesh, canvas.ref_footprint(ref_shape), canvas)


def total_warp_loss(align, h_align, intra, inter, w=WarpLossWeights()):
    return (h_align * w.lam + align) + w.omega * (intra + inter)
