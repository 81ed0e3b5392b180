"""Image resampling: separable bicubic resize, bilinear sampling, Gaussian blur.

All routines use the pixel-center convention: output coordinate x maps to
source coordinate (x + 0.5) / scale - 0.5. Downscaling stretches the cubic
kernel by the inverse scale (antialiasing) and every filter row is
normalised to unit sum, so constants are preserved exactly.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage


def cubic_kernel(x, a=-0.5):
    """Keys cubic convolution kernel with a = -0.5."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    out = np.zeros_like(x)
    m1 = x <= 1.0
    m2 = (x > 1.0) & (x < 2.0)
    out[m1] = (a + 2.0) * x[m1] ** 3 - (a + 3.0) * x[m1] ** 2 + 1.0
    out[m2] = a * (x[m2] ** 3 - 5.0 * x[m2] ** 2 + 8.0 * x[m2] - 4.0)
    return out


def triangle_kernel(x):
    """Linear (tent) interpolation kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    return np.maximum(0.0, 1.0 - x)


_KERNELS = {"cubic": (cubic_kernel, 2.0), "linear": (triangle_kernel, 1.0)}


def resize_weights(n_in, n_out, kernel="cubic"):
    """Dense (n_out, n_in) separable filter matrix for one axis.

    Edge taps are clamped to the border sample; rows sum to one.
    """
    n_in, n_out = int(n_in), int(n_out)
    if n_in < 1 or n_out < 1:
        raise ValueError("resize_weights: extents must be positive")
    func, radius = _KERNELS[kernel]
    scale = n_out / n_in
    k = min(scale, 1.0)
    support = radius / k
    weights = np.zeros((n_out, n_in))
    for i in range(n_out):
        center = (i + 0.5) / scale - 0.5
        lo = int(np.floor(center - support))
        hi = int(np.ceil(center + support))
        idx = np.arange(lo, hi + 1)
        w = func((idx - center) * k)
        np.add.at(weights[i], np.clip(idx, 0, n_in - 1), w)
        weights[i] /= weights[i].sum()
    return weights


_weights_cache: dict[tuple[int, int, str], np.ndarray] = {}


def _axis_weights(n_in, n_out, kernel="cubic"):
    key = (int(n_in), int(n_out), kernel)
    w = _weights_cache.get(key)
    if w is None:
        w = resize_weights(n_in, n_out, kernel)
        _weights_cache[key] = w
    return w


def _resize(img, out_shape, scale, kernel):
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("resize expects a 2-d raster")
    if (out_shape is None) == (scale is None):
        raise ValueError("give exactly one of out_shape or scale")
    if out_shape is None:
        out_shape = (int(round(img.shape[0] * scale)), int(round(img.shape[1] * scale)))
    wy = _axis_weights(img.shape[0], out_shape[0], kernel)
    wx = _axis_weights(img.shape[1], out_shape[1], kernel)
    return wy @ img @ wx.T


def resize_bicubic(img, out_shape=None, scale=None):
    """Bicubic resize of a 2-d raster to ``out_shape`` or by ``scale``.

    Exactly one of out_shape / scale must be given. Antialiased when
    shrinking.
    """
    return _resize(img, out_shape, scale, "cubic")


def resize_bilinear(img, out_shape=None, scale=None):
    """Bilinear resize; weights are non-negative, so the output range never
    leaves the input range."""
    return _resize(img, out_shape, scale, "linear")


def scale_coords(pts, factor):
    """Map pixel-center coordinates through a resize by ``factor``.

    Under the (x + 0.5)/s - 0.5 convention, the source coordinate x lands
    at s*x + (s - 1)/2 in the output raster.
    """
    pts = np.asarray(pts, dtype=np.float64)
    return factor * pts + (factor - 1.0) / 2.0


def bilinear_sample(img, ys, xs, fill=0.0):
    """Sample img at fractional (row, col) positions with bilinear weights.

    Positions whose 2x2 support falls entirely outside the raster produce
    ``fill``; partial support is zero-padded.
    """
    img = np.asarray(img, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0
    out = np.full(ys.shape, float(fill), dtype=np.float64)
    acc = np.zeros(ys.shape)
    touched = np.zeros(ys.shape, dtype=bool)
    for dy in (0, 1):
        for dx in (0, 1):
            yy = y0 + dy
            xx = x0 + dx
            wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            vals = np.zeros(ys.shape)
            vals[inside] = img[yy[inside], xx[inside]]
            acc += np.where(inside, wgt * vals, 0.0)
            touched |= inside
    out[touched] = acc[touched]
    return out


def bicubic_sample(img, ys, xs, fill=0.0):
    """Sample img at fractional positions with the 4x4 cubic kernel.

    Taps outside the raster are clamped to the border; positions farther
    than one pixel outside the raster produce ``fill``.
    """
    img = np.asarray(img, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    h, w = img.shape
    inside = (ys > -1.0) & (ys < h) & (xs > -1.0) & (xs < w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    out = np.zeros(ys.shape)
    for dy in range(-1, 3):
        wy = cubic_kernel(ys - (y0 + dy))
        yy = np.clip(y0 + dy, 0, h - 1)
        for dx in range(-1, 3):
            wx = cubic_kernel(xs - (x0 + dx))
            xx = np.clip(x0 + dx, 0, w - 1)
            out += wy * wx * img[yy, xx]
    return np.where(inside, out, float(fill))


def gaussian_blur(img, sigma):
    """Isotropic Gaussian blur with reflected borders; sigma 0 is identity."""
    if sigma <= 0:
        return np.asarray(img, dtype=np.float64).copy()
    return ndimage.gaussian_filter(np.asarray(img, dtype=np.float64), sigma, mode="reflect")
