"""Coarse-to-fine photometric optimisation of homography and TPS warps.

A Gaussian pyramid supplies the capture range for large motions: the
homography's four corner motions are found by Adam from a brute-force
integer shift at the coarsest level, then the TPS control points are refined
from the homography mesh.  Step sizes are in pixels of the current level.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import geometry
from .errors import DegenerateGeometryError, ShapeMismatchError
from .imagecore import as_image
from .warp_energy import (LossBreakdown, TpsAlignment, WarpLossWeights, homography_alignment,
                          homography_alignment_grad, inter_grid_grad, intra_grid_grad,
                          reference_overlap_labels)
from .warp_engine import count_folds

MIN_OVERLAP_FRACTION = 0.10


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 0.5
    max_iters: int = 50
    tol: float = 1e-4
    pyramid_levels: int = 4
    grid_rows: int = 13
    grid_cols: int = 13
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    level_iters: int = 200
    patience: int = 15
    h_rel_tol: float = 1e-5
    tps_patience: int = 12
    tps_rel_tol: float = 1e-3
    min_level_size: int = 24
    tps_levels: int = 2
    tps_learning_rate: float = 0.25
    adapt_learning_rate: float = 0.05
    omega: float = 10.0
    lam: float = 3.0

    def __post_init__(self):
        if self.max_iters < 1 or self.level_iters < 1:
            raise ValueError("iteration budgets must be >= 1")
        if self.tol <= 0:
            raise ValueError("tol must be > 0")
        if self.pyramid_levels < 1 or self.tps_levels < 1:
            raise ValueError("pyramid levels must be >= 1")
        if self.grid_rows < 2 or self.grid_cols < 2:
            raise ValueError("the control grid needs at least 2x2 points")

    @property
    def weights(self):
        return WarpLossWeights(self.omega, self.lam)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


@dataclass
class WarpResult:
    homography: geometry.Homography
    mesh: geometry.ControlMesh
    loss_history: list = field(default_factory=list)
    iterations_used: int = 0
    converged: bool = False
    folds: int = 0
    final_loss: float = float("nan")


def adam_step(params, grads, state, cfg, lr=None):
    """One bias-corrected Adam update; returns ``(params, state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ShapeMismatchError(
            f"params {params.shape}, grads {grads.shape}, state {state.m.shape} differ")
    lr = cfg.learning_rate if lr is None else lr
    t = state.t + 1
    m = cfg.beta1 * state.m + (1 - cfg.beta1) * grads
    v = cfg.beta2 * state.v + (1 - cfg.beta2) * grads * grads
    m_hat = m / (1 - cfg.beta1 ** t)
    v_hat = v / (1 - cfg.beta2 ** t)
    return params - lr * m_hat / (np.sqrt(v_hat) + cfg.eps), AdamState(m, v, t)


def pyramid_depth(shape, levels, min_size):
    """Number of usable levels: the coarsest keeps ``min(h, w) >= min_size``."""
    n = 1
    small = min(shape[:2])
    while n < levels and small / 2 ** n >= min_size:
        n += 1
    return n


def build_pyramid(img, levels):
    """Finest-first list; level ``k+1`` is level ``k`` blurred and decimated.

    Decimation keeps even pixels, so coarse pixel ``i`` sits exactly at fine
    coordinate ``2 i``.
    """
    pyr = [as_image(img)]
    for _ in range(levels - 1):
        sm = ndimage.gaussian_filter(pyr[-1], sigma=(1.0, 1.0, 0), mode="nearest")
        pyr.append(sm[::2, ::2])
    return pyr


def _corners(w, h):
    return np.array([[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]])


def _quad_ok(q):
    turns = []
    for k in range(4):
        a, b, c = q[k - 1], q[k], q[(k + 1) % 4]
        u, v = b - a, c - b
        turns.append(u[0] * v[1] - u[1] * v[0])
    turns = np.array(turns)
    scale = max(np.ptp(q[:, 0]) * np.ptp(q[:, 1]), 1e-12)
    return bool(np.all(turns > 1e-6 * scale) or np.all(turns < -1e-6 * scale))


def coarse_shift(ref, tgt, min_overlap=0.25):
    """Integer translation ``t`` minimising the mean |ref(p + t) - tgt(p)|.

    Only shifts leaving at least ``min_overlap`` of the smaller image in
    common are scored.
    """
    hr, wr = ref.shape[:2]
    ht, wt = tgt.shape[:2]
    need = min_overlap * min(hr * wr, ht * wt)
    best, best_t = np.inf, (0, 0)
    for dy in range(-ht + 1, hr):
        y0, y1 = max(0, -dy), min(ht, hr - dy)
        if y1 <= y0:
            continue
        for dx in range(-wt + 1, wr):
            x0, x1 = max(0, -dx), min(wt, wr - dx)
            if x1 <= x0 or (y1 - y0) * (x1 - x0) < need:
                continue
            a = tgt[y0:y1, x0:x1]
            b = ref[y0 + dy:y1 + dy, x0 + dx:x1 + dx]
            err = np.abs(a - b).mean()
            if err < best - 1e-12:
                best, best_t = err, (dx, dy)
    return np.array(best_t, dtype=np.float64)


def _initial_overlap(ref, tgt):
    h = min(ref.shape[0], tgt.shape[0])
    w = min(ref.shape[1], tgt.shape[1])
    return h * w / float(min(ref.shape[0] * ref.shape[1], tgt.shape[0] * tgt.shape[1]))


def _run_adam(fun, x0, cfg, lr, budget, patience, check=None, rel_tol=0.0):
    """Adam with a best-so-far snapshot and patience-based early stop.

    The run stops once ``patience`` iterations pass without beating the last
    reference loss by a relative ``rel_tol``.  ``fun(x) -> (loss, grad)``.
    Returns ``(best_x, best_loss, trace, its)`` where ``trace`` holds the
    loss at every iterate.
    """
    x = np.array(x0, dtype=np.float64).ravel()
    state = AdamState.zeros(x.size)
    best_x, best, mark = x.copy(), np.inf, np.inf
    trace = []
    stale = 0
    for _ in range(budget):
        loss, g = fun(x)
        trace.append(loss)
        if loss < best:
            best, best_x = loss, x.copy()
        if not np.isfinite(mark) or loss < mark - rel_tol * abs(mark):
            mark, stale = loss, 0
        else:
            stale += 1
            if stale >= patience:
                break
        x, state = adam_step(x, np.ravel(g), state, cfg, lr)
        if check is not None:
            check(x)
    return best_x, best, trace, len(trace)


def optimize_homography(ref, tgt, cfg=OptimizerConfig()):
    """Symmetric photometric homography fit; returns ``(Homography, history)``.

    ``H`` maps target pixels into the reference frame.
    """
    ref = as_image(ref)
    tgt = as_image(tgt)
    if _initial_overlap(ref, tgt) < MIN_OVERLAP_FRACTION:
        warnings.warn("images overlap by less than 10% at identity", RuntimeWarning, stacklevel=2)
        return geometry.Homography.identity(), []
    try:
        return _optimize_homography(ref, tgt, cfg, 1.0)
    except DegenerateGeometryError:
        warnings.warn("degenerate quad; restarting with a 10x smaller step", RuntimeWarning,
                      stacklevel=2)
        return _optimize_homography(ref, tgt, cfg, 0.1)


def _optimize_homography(ref, tgt, cfg, step_scale):
    n = min(pyramid_depth(ref.shape, cfg.pyramid_levels, cfg.min_level_size),
            pyramid_depth(tgt.shape, cfg.pyramid_levels, cfg.min_level_size))
    pr = build_pyramid(ref, n)
    pt = build_pyramid(tgt, n)
    full_src = _corners(tgt.shape[1], tgt.shape[0])

    top = n - 1
    shift = coarse_shift(pr[top], pt[top]) * 2 ** top if step_scale == 1.0 else np.zeros(2)
    dst = full_src + shift
    history = []

    def check(x):
        if not _quad_ok(x.reshape(4, 2)):
            raise DegenerateGeometryError("optimised corners form a degenerate quad")

    for k, lvl in enumerate(range(top, -1, -1)):
        s = 2.0 ** -lvl
        src = full_src * s
        r, t = pr[lvl], pt[lvl]

        def fun(x, src=src, r=r, t=t):
            v, g, _ = homography_alignment_grad(r, t, src, x.reshape(4, 2))
            return v, g

        lr = cfg.learning_rate * step_scale / 2 ** k
        x, best, trace, _ = _run_adam(fun, dst * s, cfg, lr, cfg.level_iters, cfg.patience, check,
                                      rel_tol=cfg.h_rel_tol)
        dst = x.reshape(4, 2) / s
        base = len(history)
        history += [LossBreakdown(base + i, 0.0, v, 0.0, 0.0, cfg.lam * v)
                    for i, v in enumerate(trace)]
    return geometry.solve_homography_4pt(full_src, dst), history


class _TpsObjective:
    """align + omega (intra + inter) at one pyramid level."""

    def __init__(self, ref, tgt, mesh, cfg, with_distortion=True):
        self.align = TpsAlignment(ref, tgt, mesh.rows, mesh.cols, mesh.source)
        self.shape = mesh.warped.shape
        self.w, self.h = mesh.width, mesh.height
        self.omega = cfg.omega if with_distortion else 0.0
        self.labels = reference_overlap_labels(mesh, ref.shape) if self.omega else None
        self.last = None

    def __call__(self, x):
        q = x.reshape(self.shape)
        a, ga = self.align(q)
        if not self.omega:
            self.last = (a, 0.0, 0.0)
            return a, ga
        ia, gi = intra_grid_grad(q, self.w, self.h)
        ie, ge = inter_grid_grad(q, self.labels)
        self.last = (a, ia, ie)
        return a + self.omega * (ia + ie), ga.reshape(self.shape) + self.omega * (gi + ge)

    def breakdown(self, x):
        self(x)
        return self.last


def optimize_tps(ref, tgt, h, cfg=OptimizerConfig()):
    """Refine the homography mesh by moving every control point.

    The objective is the TPS alignment term plus ``omega`` times the
    distortion terms; ``lam * h_align`` is constant here and only reported.
    """
    ref = as_image(ref)
    tgt = as_image(tgt)
    base = geometry.make_control_grid(cfg.grid_rows, cfg.grid_cols, tgt.shape[1], tgt.shape[0])
    init = geometry.mesh_from_homography(base, h)
    h_align = homography_alignment(ref, tgt, h)

    n = min(pyramid_depth(ref.shape, cfg.tps_levels, 4 * max(cfg.grid_rows, cfg.grid_cols)),
            pyramid_depth(tgt.shape, cfg.tps_levels, 4 * max(cfg.grid_rows, cfg.grid_cols)))
    pr = build_pyramid(ref, n)
    pt = build_pyramid(tgt, n)
    warped = init.warped
    history = []
    total_its = 0
    converged = False
    final = np.nan
    for k, lvl in enumerate(range(n - 1, -1, -1)):
        s = 2.0 ** -lvl
        mesh = init.rescaled(s).with_warped(warped * s)
        obj = _TpsObjective(pr[lvl], pt[lvl], mesh, cfg)
        x0 = mesh.warped.ravel()
        if lvl == 0 and k > 0:
            # never end above the homography initialisation
            start = init.warped.ravel()
            if obj(start)[0] < obj(x0)[0]:
                x0 = start
        lr = cfg.tps_learning_rate / 2 ** k
        x, best, trace, its = _run_adam(obj, x0, cfg, lr, cfg.level_iters, cfg.tps_patience,
                                        rel_tol=cfg.tps_rel_tol)
        converged = its < cfg.level_iters
        warped = x.reshape(mesh.warped.shape) / s
        total_its += its
        if lvl == 0:
            a, ia, ie = obj.breakdown(x)
            final = best
        off = len(history)
        history += [LossBreakdown(off + i, v, h_align, np.nan, np.nan,
                                  v + cfg.lam * h_align) for i, v in enumerate(trace)]
    if history:
        last = history[-1]
        history[-1] = LossBreakdown(last.iter, a, h_align, ia, ie,
                                    cfg.lam * h_align + a + cfg.omega * (ia + ie))
    mesh = init.with_warped(warped)
    folds = count_folds(mesh)
    if folds:
        warnings.warn(f"{folds} mesh cells folded over", RuntimeWarning, stacklevel=2)
    return WarpResult(h, mesh, history, total_its, converged, folds,
                      final + cfg.lam * h_align)


def adapt(ref, tgt, warm_start, cfg=OptimizerConfig()):
    """Per-pair refinement of the TPS alignment term alone.

    Runs at full resolution from ``warm_start`` (rescaled when it was fitted
    at another resolution) and stops after ``cfg.max_iters`` evaluations or
    once two consecutive losses differ by less than ``cfg.tol``.  The best
    iterate is returned, so the final loss never exceeds the first.
    """
    ref = as_image(ref)
    tgt = as_image(tgt)
    mesh, h = warm_start.mesh, warm_start.homography
    if mesh.width != tgt.shape[1] or mesh.height != tgt.shape[0]:
        sx = tgt.shape[1] / mesh.width
        sy = tgt.shape[0] / mesh.height
        mesh = mesh.rescaled(sx, sy)
        h = geometry.Homography(np.diag([sx, sy, 1.0]) @ h.h @ np.diag([1 / sx, 1 / sy, 1.0]))
    align = TpsAlignment(ref, tgt, mesh.rows, mesh.cols, mesh.source)
    shape = mesh.warped.shape

    x = mesh.warped.ravel().copy()
    state = AdamState.zeros(x.size)
    best_x, best = x.copy(), np.inf
    history = []
    prev = None
    converged = False
    for it in range(1, cfg.max_iters + 1):
        loss, g = align(x.reshape(shape))
        history.append(LossBreakdown(it, loss, 0.0, 0.0, 0.0, loss))
        if loss < best:
            best, best_x = loss, x.copy()
        if prev is not None and abs(loss - prev) < cfg.tol:
            converged = True
            break
        prev = loss
        x, state = adam_step(x, g.ravel(), state, cfg, cfg.adapt_learning_rate)
    out = mesh.with_warped(best_x.reshape(shape))
    return WarpResult(h, out, history, len(history), converged, count_folds(out), best)

