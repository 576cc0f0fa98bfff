"""Image and mask containers, bilinear sampling and overlap metrics.

Images are plain ``numpy`` arrays of shape ``(height, width, channels)``
holding float intensities in [0, 1]; masks are ``(height, width)`` float
arrays in [0, 1].  Pixel ``(row i, column j)`` sits at the continuous point
``(x=j, y=i)``.
"""

import numpy as np
from PIL import Image
from scipy import ndimage

from ._io import atomic_path
from .errors import EmptyRegionError, ShapeMismatchError

# Sampling positions this close to the image border are snapped onto it;
# keeps exact-identity warps from losing their last row/column to roundoff.
SNAP_TOL = 1e-6

SSIM_SIGMA = 1.5
SSIM_RADIUS = 5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 99.0

LUMA = np.array([0.299, 0.587, 0.114])


def as_image(arr):
    """Return ``arr`` as a float64 ``(H, W, C)`` image, C in {1, 3}.

    uint8 input is scaled by 1/255; 2-D input gains a channel axis.
    """
    a = np.asarray(arr)
    if a.dtype == np.uint8:
        a = a.astype(np.float64) / 255.0
    else:
        a = a.astype(np.float64, copy=False)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ShapeMismatchError(f"expected (H, W[, 1|3]) image, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("image contains non-finite intensities")
    return a


def as_mask(arr, shape=None):
    m = np.asarray(arr, dtype=np.float64)
    if m.ndim == 3 and m.shape[2] == 1:
        m = m[:, :, 0]
    if m.ndim != 2:
        raise ShapeMismatchError(f"expected (H, W) mask, got shape {m.shape}")
    if shape is not None and m.shape != tuple(shape[:2]):
        raise ShapeMismatchError(f"mask shape {m.shape} does not match {tuple(shape[:2])}")
    if m.size and (m.min() < 0.0 or m.max() > 1.0):
        raise ValueError("mask values must lie in [0, 1]")
    return m


def load_image(path):
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I", "F"):
            im = im.convert("L")
        else:
            im = im.convert("RGB")
        return as_image(np.array(im))


def to_uint8(img):
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(path, img):
    """Write an image or mask as 8-bit PNG/JPEG (format from the suffix)."""
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[2] == 1:
        a = a[:, :, 0]
    with atomic_path(path) as tmp:
        fmt = "JPEG" if str(path).lower().endswith((".jpg", ".jpeg")) else "PNG"
        Image.fromarray(to_uint8(a)).save(tmp, format=fmt)


def luminance(img):
    img = as_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ LUMA


def sample_bilinear(img, x, y, with_grad=False):
    """Vectorised bilinear sampling at float positions.

    Returns ``(values, valid)`` with ``values`` of shape ``x.shape + (C,)``;
    with ``with_grad`` also the x/y derivatives of the interpolant.  A sample
    is valid only when its whole 2x2 neighbourhood lies inside the image, i.e.
    ``0 <= x <= W-1`` and ``0 <= y <= H-1``.  Neighbours outside the image
    read as 0.
    """
    h, w, c = img.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    shape = x.shape
    x = x.ravel().copy()
    y = y.ravel().copy()

    near = ((x > -SNAP_TOL) & (x < 0)) | ((x > w - 1) & (x < w - 1 + SNAP_TOL))
    x[near] = np.clip(x[near], 0, w - 1)
    near = ((y > -SNAP_TOL) & (y < 0)) | ((y > h - 1) & (y < h - 1 + SNAP_TOL))
    y[near] = np.clip(y[near], 0, h - 1)

    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    touch = (x > -1) & (x < w) & (y > -1) & (y < h)

    vals = np.zeros((x.size, c))
    gx = np.zeros((x.size, c)) if with_grad else None
    gy = np.zeros((x.size, c)) if with_grad else None
    if np.any(touch):
        pad = np.pad(img, ((1, 1), (1, 1), (0, 0)))
        xt, yt = x[touch], y[touch]
        x0 = np.floor(xt)
        y0 = np.floor(yt)
        fx = (xt - x0)[:, None]
        fy = (yt - y0)[:, None]
        # +1 for the zero border
        xi = x0.astype(np.intp) + 1
        yi = y0.astype(np.intp) + 1
        i00 = pad[yi, xi]
        i01 = pad[yi, xi + 1]
        i10 = pad[yi + 1, xi]
        i11 = pad[yi + 1, xi + 1]
        top = i00 + fx * (i01 - i00)
        bot = i10 + fx * (i11 - i10)
        vals[touch] = top + fy * (bot - top)
        if with_grad:
            gx[touch] = (1 - fy) * (i01 - i00) + fy * (i11 - i10)
            gy[touch] = bot - top
    vals = vals.reshape(shape + (c,))
    valid = valid.reshape(shape)
    if with_grad:
        return vals, valid, gx.reshape(shape + (c,)), gy.reshape(shape + (c,))
    return vals, valid


def bilinear_sample(img, x, y):
    """Sample one point; returns ``(per-channel values, valid)``."""
    vals, valid = sample_bilinear(img, np.array([x]), np.array([y]))
    return vals[0], bool(valid[0])


def _check_pair(a, b, region):
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"image shapes differ: {a.shape} vs {b.shape}")
    region = as_mask(region, a.shape)
    sel = region > 0.5
    if not np.any(sel):
        raise EmptyRegionError("no pixel of the region exceeds 0.5")
    return a, b, sel


def psnr(a, b, region):
    """Overlap PSNR in dB: per-channel PSNR over ``region > 0.5``, averaged.

    Each channel is capped at 99 dB when its MSE drops below 1e-10.
    """
    a, b, sel = _check_pair(a, b, region)
    mse = np.mean((a[sel] - b[sel]) ** 2, axis=0)
    per_channel = np.where(
        mse < 1e-10, PSNR_CAP, 10.0 * np.log10(1.0 / np.maximum(mse, 1e-300))
    )
    return float(np.mean(per_channel))


def ssim_map(a, b):
    """Local SSIM on luminance for every full 11x11 window.

    The returned map is cropped: entry ``[i, j]`` belongs to the window
    centred on pixel ``(i + 5, j + 5)``.
    """
    la = luminance(a)
    lb = luminance(b)
    r = SSIM_RADIUS

    def blur(z):
        return ndimage.gaussian_filter(
            z, SSIM_SIGMA, mode="constant", truncate=r / SSIM_SIGMA
        )[r:-r, r:-r]

    mu_a = blur(la)
    mu_b = blur(lb)
    var_a = blur(la * la) - mu_a ** 2
    var_b = blur(lb * lb) - mu_b ** 2
    cov = blur(la * lb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a, b, region):
    """Mean luminance SSIM over windows whose centre has ``region > 0.5``.

    Gaussian window 11x11, sigma 1.5, C1 = 0.01^2, C2 = 0.03^2; only windows
    lying fully inside the image are used.
    """
    a, b, sel = _check_pair(a, b, region)
    r = SSIM_RADIUS
    if a.shape[0] <= 2 * r or a.shape[1] <= 2 * r:
        raise EmptyRegionError("image smaller than the 11x11 SSIM window")
    centres = sel[r:-r, r:-r]
    if not np.any(centres):
        raise EmptyRegionError("no SSIM window centre inside the region")
    return float(np.mean(ssim_map(a, b)[centres]))
