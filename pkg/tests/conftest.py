import numpy as np
import pytest


def smooth_texture(h, w, phase=0.0, channels=3):
    """Band-limited test image with non-zero gradients everywhere."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    chans = [
        0.5 + 0.35 * np.sin(0.21 * xx + 0.13 * yy + phase),
        0.5 + 0.30 * np.cos(0.17 * xx - 0.11 * yy + 2 * phase),
        0.5 + 0.25 * np.sin(0.07 * xx + 0.29 * yy - phase),
    ]
    return np.stack(chans[:channels], axis=-1)


def shifted_texture(h, w, dx, dy):
    """``smooth_texture`` sampled at ``(x + dx, y + dy)`` (exact, no resampling)."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xx = xx + dx
    yy = yy + dy
    return np.stack([
        0.5 + 0.35 * np.sin(0.21 * xx + 0.13 * yy),
        0.5 + 0.30 * np.cos(0.17 * xx - 0.11 * yy),
        0.5 + 0.25 * np.sin(0.07 * xx + 0.29 * yy),
    ], axis=-1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def stable_support_point(draw, support, step, max_draws=50):
    """First drawn point whose pixel support is unchanged across the FD stencil.

    The photometric losses average over a pixel set that jumps when a pixel
    crosses the warped border; central differences straddling such a jump
    measure the jump, not the gradient.  Returns ``(x, rejected_draws)``.
    """
    for k in range(max_draws):
        x = draw(k)
        base = support(x)
        stable = True
        for i in np.ndindex(x.shape):
            for s in (step, -step):
                y = x.copy()
                y[i] += s
                if not np.array_equal(support(y), base):
                    stable = False
                    break
            if not stable:
                break
        if stable:
            return x, k
    raise AssertionError("no draw with a stable pixel support")


def tps_support(source, size):
    """Pixel support of the backward-TPS alignment term on a ``size`` image."""
    from tpsstitch.geometry import ControlMesh
    from tpsstitch.warp_engine import Canvas, field_from_mesh

    w, h = size
    rows, cols = source.shape[:2]

    def support(warped):
        mesh = ControlMesh(rows, cols, w, h, source, warped.reshape(source.shape))
        return field_from_mesh(mesh, Canvas(w, h), (w, h)).valid

    return support


def homography_support(src, size):
    from tpsstitch.geometry import solve_homography_4pt
    from tpsstitch.warp_engine import Canvas, field_from_homography

    w, h = size

    def support(dst):
        hm = solve_homography_4pt(src, dst)
        return np.concatenate([field_from_homography(hm, Canvas(w, h), (w, h)).valid,
                               field_from_homography(hm.inverse(), Canvas(w, h), (w, h)).valid])

    return support
