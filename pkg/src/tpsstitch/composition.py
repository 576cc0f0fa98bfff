"""Seam-driven composition of two warped images on a shared canvas.

The seam is implicit: a soft mask ``m_cr`` chooses between the warped
reference and target on their overlap, parameterised by logits so it stays
in (0, 1).  Its energy pins the overlap boundaries to the image they came
from and charges mask transitions by the photometric difference beneath
them.
"""

import json
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from skimage import measure

from ._io import write_text
from .errors import EmptyRegionError, ShapeMismatchError
from .imagecore import as_image, as_mask, save_image
from .warp_engine import compute_canvas, field_from_mesh, place_reference, warp

EDGE_THRESHOLD = 0.1


@dataclass(frozen=True)
class CompositionWeights:
    alpha: float = 10000.0
    beta: float = 1000.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("composition weights must be non-negative")


@dataclass(frozen=True)
class SeamConfig:
    max_iters: int = 300
    tol: float = 1e-6
    learning_rate: float = 0.25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class CompositionInputs:
    i_wr: np.ndarray
    i_wt: np.ndarray
    m_r: np.ndarray
    m_t: np.ndarray

    def __post_init__(self):
        self.i_wr = as_image(self.i_wr)
        self.i_wt = as_image(self.i_wt)
        if self.i_wr.shape != self.i_wt.shape:
            raise ShapeMismatchError("warped images must share the canvas")
        self.m_r = as_mask(self.m_r, self.i_wr.shape)
        self.m_t = as_mask(self.m_t, self.i_wr.shape)

    @property
    def overlap(self):
        return self.m_r * self.m_t

    @property
    def union(self):
        return np.maximum(self.m_r, self.m_t)


@dataclass
class SeamMask:
    logits: np.ndarray
    m_cr: np.ndarray
    m_ct: np.ndarray
    energy: float = float("nan")
    initial_energy: float = float("nan")
    iterations: int = 0

    def seam_polyline(self, overlap):
        """Polylines of the ``m_cr = 0.5`` level set inside the overlap."""
        return measure.find_contours(self.m_cr, 0.5, mask=np.asarray(overlap) > 0.5)

    def save_masks(self, prefix):
        save_image(f"{prefix}_ref.png", self.m_cr)
        save_image(f"{prefix}_tgt.png", self.m_ct)

    def save_seam(self, path, overlap):
        lines = [[[float(x), float(y)] for y, x in c] for c in self.seam_polyline(overlap)]
        write_text(path, json.dumps({"level": 0.5, "polylines": lines}))


def sobel_edges(mask):
    """0/1 map where the 3x3 Sobel gradient magnitude exceeds 0.1.

    The canvas border replicates, so a footprint that reaches it has no edge
    there.
    """
    m = np.asarray(mask, dtype=np.float64)
    gx = ndimage.sobel(m, axis=1, mode="nearest")
    gy = ndimage.sobel(m, axis=0, mode="nearest")
    return (np.hypot(gx, gy) > EDGE_THRESHOLD).astype(np.float64)


def boundary_masks(m_r, m_t):
    return m_r * sobel_edges(m_t), m_t * sobel_edges(m_r)


def masks_from_logits(logits, m_r, m_t):
    """``(m_cr, m_ct)`` with the soft choice confined to the overlap."""
    sig = 1.0 / (1.0 + np.exp(-logits))
    m_cr = m_r * (1.0 - m_t) + sig * m_r * m_t
    return m_cr, derive_target_mask(m_cr, m_r, m_t)


def derive_target_mask(m_cr, m_r, m_t):
    return np.clip(np.maximum(m_r, m_t) - m_cr, 0.0, 1.0)


def blend(i_wr, i_wt, m_cr, m_ct):
    return np.clip(m_cr[..., None] * i_wr + m_ct[..., None] * i_wt, 0.0, 1.0)


def boundary_loss(s, i_wr, i_wt, m_br, m_bt):
    """Mean |S - I_wr| over ``m_br`` pixels plus mean |S - I_wt| over ``m_bt``."""
    return _boundary(s, _boundary_sets(i_wr, i_wt, m_br, m_bt))[0]


def _boundary_sets(i_wr, i_wt, m_br, m_bt):
    sets = []
    for img, m in ((i_wr, m_br), (i_wt, m_bt)):
        idx = np.nonzero(m)
        if idx[0].size:
            sets.append((idx, img[idx], m[idx][:, None] / (idx[0].size * img.shape[2])))
    return sets


def _boundary(s, sets):
    # masked pixels are sparse, so work on their index lists only
    value = 0.0
    grad = np.zeros_like(s)
    for idx, vals, wgt in sets:
        r = s[idx] - vals
        value += float((np.abs(r) * wgt).sum())
        grad[idx] += np.sign(r) * wgt
    return value, grad


def _pair_weights(axis, union):
    if union is None:
        return 1.0
    a = union > 0
    return (a[:-1] & a[1:]) if axis == 0 else (a[:, :-1] & a[:, 1:])


def _diff(x, axis):
    return x[1:] - x[:-1] if axis == 0 else x[:, 1:] - x[:, :-1]


def _scatter(out, g, axis):
    """Add ``g`` to the second element of each pair and subtract from the first."""
    if axis == 0:
        out[1:] += g
        out[:-1] -= g
    else:
        out[:, 1:] += g
        out[:, :-1] -= g


def smoothness_loss(m_cr, d, s, union=None):
    """``(l_D + l_S) / (H W)`` over vertical and horizontal neighbour pairs.

    ``d`` is the per-pixel squared difference, ``s`` the stitched image
    (channel-averaged absolute differences).  With ``union`` given, only
    pairs inside the union footprint count.
    """
    return _smoothness(m_cr, d, s, union)[0]


def _smoothness(m_cr, d, s, union=None):
    h, w = m_cr.shape
    norm = float(h * w)
    c = s.shape[2]
    value = 0.0
    g_m = np.zeros_like(m_cr)
    g_s = np.zeros_like(s)
    for axis in (0, 1):
        wgt = _pair_weights(axis, union)
        dm = _diff(m_cr, axis)
        ds = _diff(s, axis)
        dsum = (d[1:] + d[:-1]) if axis == 0 else (d[:, 1:] + d[:, :-1])
        sabs = np.abs(ds).mean(axis=2)
        value += float((wgt * np.abs(dm) * (dsum + sabs)).sum())
        _scatter(g_m, wgt * np.sign(dm) * (dsum + sabs), axis)
        _scatter(g_s, (wgt * np.abs(dm))[..., None] * np.sign(ds) / c, axis)
    return value / norm, g_m / norm, g_s / norm


def difference_map(i_wr, i_wt):
    return ((i_wr - i_wt) ** 2).mean(axis=2)


class SeamEnergy:
    """Composition energy of the soft mask as a function of the logits."""

    def __init__(self, inputs, weights=CompositionWeights()):
        self.inp = inputs
        self.w = weights
        self.m_br, self.m_bt = boundary_masks(inputs.m_r, inputs.m_t)
        self.d = difference_map(inputs.i_wr, inputs.i_wt)
        self.union = inputs.union
        self.overlap = inputs.overlap
        self.sets = _boundary_sets(inputs.i_wr, inputs.i_wt, self.m_br, self.m_bt)
        self.only_r = inputs.m_r * (1.0 - inputs.m_t)

    def parts(self, logits):
        """``(boundary, smoothness)`` before weighting."""
        m_cr, m_ct = masks_from_logits(logits, self.inp.m_r, self.inp.m_t)
        s = blend(self.inp.i_wr, self.inp.i_wt, m_cr, m_ct)
        return _boundary(s, self.sets)[0], smoothness_loss(m_cr, self.d, s, self.union)

    def __call__(self, logits, with_grad=True):
        inp = self.inp
        sig = 1.0 / (1.0 + np.exp(-logits))
        m_cr = self.only_r + sig * self.overlap
        m_ct = derive_target_mask(m_cr, inp.m_r, inp.m_t)
        raw = m_cr[..., None] * inp.i_wr + m_ct[..., None] * inp.i_wt
        s = np.clip(raw, 0.0, 1.0)
        b, gb = _boundary(s, self.sets)
        sm, gm, gs = _smoothness(m_cr, self.d, s, self.union)
        energy = self.w.alpha * b + self.w.beta * sm
        if not with_grad:
            return energy, None
        g_s = self.w.alpha * gb + self.w.beta * gs
        g_s = np.where((raw >= 0.0) & (raw <= 1.0), g_s, 0.0)
        # S depends on m_cr through m_ct = union - m_cr
        g_m = self.w.beta * gm + (g_s * (inp.i_wr - inp.i_wt)).sum(axis=2)
        return energy, g_m * sig * (1.0 - sig) * self.overlap


def optimize_seam(inputs, weights=CompositionWeights(), cfg=SeamConfig()):
    """Adam on overlap logits from 0 (an even blend), best iterate returned."""
    from .warp_optimizer import AdamState, adam_step

    overlap = inputs.overlap
    if not np.any(overlap > 0):
        raise EmptyRegionError("the warped images do not overlap")
    energy = SeamEnergy(inputs, weights)
    sel = overlap > 0
    logits = np.zeros(overlap.shape)
    x = logits[sel]
    state = AdamState.zeros(x.size)
    best_x, best, first, prev = x.copy(), np.inf, None, None
    its = 0
    for its in range(1, cfg.max_iters + 1):
        logits[sel] = x
        e, g = energy(logits)
        if first is None:
            first = e
        if e < best:
            best, best_x = e, x.copy()
        if prev is not None and abs(e - prev) < cfg.tol:
            break
        prev = e
        x, state = adam_step(x, g[sel], state, cfg)
    logits = np.zeros(overlap.shape)
    logits[sel] = best_x
    m_cr, m_ct = masks_from_logits(logits, inputs.m_r, inputs.m_t)
    return SeamMask(logits, m_cr, m_ct, best, first, its)


@dataclass
class CompositionResult:
    panorama: np.ndarray
    seam: SeamMask
    inputs: CompositionInputs
    canvas: object

    @property
    def energy(self):
        return self.seam.energy


def warp_to_canvas(ref, tgt, mesh):
    """Place the reference and TPS-warp the target onto their joint canvas."""
    canvas = compute_canvas(ref, mesh.boundary("warped"))
    fld = field_from_mesh(mesh, canvas, (tgt.shape[1], tgt.shape[0]))
    i_wt, m_t = warp(tgt, fld)
    i_wr, m_r = place_reference(ref, canvas)
    return CompositionInputs(i_wr, i_wt, m_r, m_t), canvas, fld


def stitch_composition(ref, tgt, mesh, weights=CompositionWeights(), cfg=SeamConfig()):
    inputs, canvas, _ = warp_to_canvas(as_image(ref), as_image(tgt), mesh)
    try:
        seam = optimize_seam(inputs, weights, cfg)
    except EmptyRegionError:
        warnings.warn("no overlap; pasting without a seam", RuntimeWarning, stacklevel=2)
        m_cr = inputs.m_r.copy()
        seam = SeamMask(np.zeros_like(m_cr), m_cr, derive_target_mask(m_cr, inputs.m_r, inputs.m_t))
    pano = blend(inputs.i_wr, inputs.i_wt, seam.m_cr, seam.m_ct)
    return CompositionResult(pano, seam, inputs, canvas)
