"""Face shape model, mean template and dense correspondence warping.

A face's spatial configuration is a coefficient vector p on N pre-defined
deformation bases. The same p simultaneously drives the L sparse landmarks
(through the landmark basis) and a pixel-dense displacement field over the
mean template (through the dense basis, obtained by thin-plate-spline
interpolation of the landmark basis columns). With p = 0 the field is the
identity on the template.

Points are (x, y) pairs; rasters are indexed [row, col] = [y, x].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.interpolate import RBFInterpolator
from scipy.spatial import ConvexHull

from .errors import DataError, DegenerateInputError
from .resample import (bicubic_sample, bilinear_sample, gaussian_blur,
                       scale_coords)

N_SIMILARITY = 4

# 68-landmark convention: indices of the eye contours
LEFT_EYE = slice(36, 42)
RIGHT_EYE = slice(42, 48)


def eye_centers(landmarks):
    """(left, right) eye centers from a 68-point landmark set."""
    lms = np.asarray(landmarks, dtype=np.float64)
    return lms[LEFT_EYE].mean(axis=0), lms[RIGHT_EYE].mean(axis=0)


def interocular_distance(landmarks):
    left, right = eye_centers(landmarks)
    return float(np.hypot(*(right - left)))


# ------------------------------------------------------------ shape building

def _align_ls(src, dst):
    """Least-squares similarity aligning src onto dst. Returns aligned src."""
    sc = src - src.mean(axis=0)
    dc = dst - dst.mean(axis=0)
    zs = sc[:, 0] + 1j * sc[:, 1]
    zd = dc[:, 0] + 1j * dc[:, 1]
    denom = np.vdot(zs, zs).real
    if denom < 1e-300:
        raise DataError("degenerate shape: all landmarks coincide")
    alpha = np.vdot(zs, zd) / denom
    za = alpha * zs
    return np.stack([za.real, za.imag], axis=1) + dst.mean(axis=0)


def procrustes_align(shapes, iters=6):
    """Generalized Procrustes alignment.

    Returns (mean, aligned) where the mean shape is centred at the origin
    with unit inter-ocular distance and ``aligned`` are the input shapes
    similarity-mapped into the mean's frame.
    """
    shapes = np.asarray(shapes, dtype=np.float64)
    mean = shapes[0] - shapes[0].mean(axis=0)
    mean /= np.linalg.norm(mean)
    for _ in range(iters):
        aligned = np.stack([_align_ls(s, mean) for s in shapes])
        mean = aligned.mean(axis=0)
        mean -= mean.mean(axis=0)
        mean /= np.linalg.norm(mean)
    iod = interocular_distance(mean)
    if iod < 1e-12:
        raise DataError("mean shape has zero inter-ocular distance")
    mean /= iod
    aligned = np.stack([_align_ls(s, mean) for s in shapes])
    return mean, aligned


@dataclass
class ShapeModel:
    """Deformation bases shared by landmarks and the dense field.

    ``mean`` is the Procrustes mean at unit inter-ocular distance, centred
    at the origin. ``basis`` is (2L, N): columns 0..3 span the similarity
    transform of the mean (two raw unit translations, then normalised
    scaling and rotation modes); the remaining N - 4 columns are
    orthonormal non-rigid principal components. Flattening order is
    (x0, y0, x1, y1, ...).
    """

    mean: np.ndarray
    basis: np.ndarray
    eigvals: np.ndarray

    @property
    def n_landmarks(self):
        return self.mean.shape[0]

    @property
    def n_bases(self):
        return self.basis.shape[1]


def _similarity_block(mean):
    l = mean.shape[0]
    t_x = np.zeros((l, 2))
    t_x[:, 0] = 1.0
    t_y = np.zeros((l, 2))
    t_y[:, 1] = 1.0
    s_scale = mean / np.linalg.norm(mean)
    s_rot = np.stack([-mean[:, 1], mean[:, 0]], axis=1)
    s_rot /= np.linalg.norm(s_rot)
    return np.stack([b.reshape(-1) for b in (t_x, t_y, s_scale, s_rot)], axis=1)


def build_shape_model(shapes, n_bases):
    """Fit the deformation model to training landmark sets.

    Non-rigid components whose variance is numerically zero are stored as
    zero columns so that activating them never moves a landmark.
    """
    shapes = np.asarray(shapes, dtype=np.float64)
    if n_bases < N_SIMILARITY + 1:
        raise DataError(f"n_bases must be at least {N_SIMILARITY + 1}")
    n_nonrigid = n_bases - N_SIMILARITY
    if shapes.ndim != 3 or shapes.shape[0] < n_nonrigid:
        raise DataError(
            f"need at least {n_nonrigid} training shapes, got {shapes.shape[0]}")
    mean, aligned = procrustes_align(shapes)
    sim = _similarity_block(mean)
    q, _ = np.linalg.qr(sim)
    resid = (aligned - mean).reshape(len(shapes), -1)
    resid = resid - (resid @ q) @ q.T
    _, svals, vt = np.linalg.svd(resid, full_matrices=False)
    comps = np.zeros((mean.size, n_nonrigid))
    eigvals = np.zeros(n_nonrigid)
    tol = max(1e-9, 1e-12 * (svals[0] if svals.size else 0.0))
    for j in range(min(n_nonrigid, svals.size)):
        if svals[j] > tol:
            comps[:, j] = vt[j]
            eigvals[j] = svals[j] ** 2 / len(shapes)
    return ShapeModel(mean=mean, basis=np.concatenate([sim, comps], axis=1),
                      eigvals=eigvals)


# -------------------------------------------------------------- the template

@dataclass
class MeanTemplate:
    """The mean-face raster for one working resolution.

    ``mean_landmarks`` live in raster coordinates; ``landmark_basis`` is
    (L, 2, N) and ``dense_basis`` is (H, W, 2, N), both already scaled to
    this resolution so a single scale-free p describes the same face at
    every cascade stage. ``prior`` optionally carries the high-frequency
    channel stack (C, H, W).
    """

    px_iod: float
    mask: np.ndarray
    mean_landmarks: np.ndarray
    landmark_basis: np.ndarray
    dense_basis: np.ndarray
    prior: np.ndarray | None = None
    eye_left: np.ndarray | None = None
    eye_right: np.ndarray | None = None

    @property
    def shape(self):
        return self.mask.shape

    @property
    def n_bases(self):
        return self.landmark_basis.shape[2]

    @property
    def n_landmarks(self):
        return self.landmark_basis.shape[0]

    def landmarks(self, p):
        return landmarks_from_coeffs(self, p)


def tps_interpolate(sites, values, points):
    """Thin-plate-spline scattered-data interpolation (exact at sites)."""
    interp = RBFInterpolator(np.asarray(sites, dtype=np.float64),
                             np.asarray(values, dtype=np.float64),
                             kernel="thin_plate_spline")
    return interp(np.asarray(points, dtype=np.float64))


def hull_mask(points, shape, dilate=0.10):
    """Boolean raster of the convex hull of ``points`` dilated about its
    centroid by the given fraction."""
    pts = np.asarray(points, dtype=np.float64)
    centroid = pts.mean(axis=0)
    grown = centroid + (pts - centroid) * (1.0 + dilate)
    hull = ConvexHull(grown)
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    coords = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    inside = np.ones(coords.shape[0], dtype=bool)
    for a, b, c in hull.equations:
        inside &= coords @ np.array([a, b]) + c <= 1e-9
    return inside.reshape(h, w)


def make_template(model: ShapeModel, px_iod, margin=0.35):
    """Rasterise the shape model at a working resolution.

    ``margin`` is the border width around the landmark bounding box in
    inter-ocular units. Dense bases are TPS interpolations of the landmark
    basis columns over the raster grid.
    """
    if px_iod <= 0:
        raise DataError("px_iod must be positive")
    lms = model.mean * px_iod
    pad = margin * px_iod
    lo = lms.min(axis=0) - pad
    hi = lms.max(axis=0) + pad
    w = int(np.ceil(hi[0] - lo[0]))
    h = int(np.ceil(hi[1] - lo[1]))
    offset = -lo
    mean_landmarks = lms + offset
    landmark_basis = model.basis.reshape(model.n_landmarks, 2, model.n_bases) * px_iod
    dense = rasterize_basis(mean_landmarks, landmark_basis, (h, w))
    mask = hull_mask(mean_landmarks, (h, w))
    left, right = eye_centers(mean_landmarks)
    return MeanTemplate(px_iod=float(px_iod), mask=mask,
                        mean_landmarks=mean_landmarks,
                        landmark_basis=landmark_basis, dense_basis=dense,
                        eye_left=left, eye_right=right)


def rasterize_basis(sites, landmark_basis, shape):
    l, _, n = landmark_basis.shape
    h, w = shape
    ys, xs = np.mgrid[0:h, 0:w]
    grid = np.stack([xs.reshape(-1), ys.reshape(-1)], axis=1)
    vals = tps_interpolate(sites, landmark_basis.reshape(l, 2 * n), grid)
    return vals.reshape(h, w, 2, n)


def scale_template(t: MeanTemplate, factor):
    """The same template in a raster scaled by an integer factor.

    Frames stay aligned with bicubic resizing of the underlying images:
    raster extents multiply by ``factor`` and coordinates map through
    ``scale_coords``.
    """
    factor = int(factor)
    if factor < 1:
        raise DataError("scale factor must be a positive integer")
    if factor == 1:
        return t
    h, w = t.shape
    lms = scale_coords(t.mean_landmarks, factor)
    basis = t.landmark_basis * factor
    dense = rasterize_basis(lms, basis, (h * factor, w * factor))
    mask = hull_mask(lms, (h * factor, w * factor))
    left, right = eye_centers(lms)
    return replace(t, px_iod=t.px_iod * factor, mask=mask, mean_landmarks=lms,
                   landmark_basis=basis, dense_basis=dense, prior=None,
                   eye_left=left, eye_right=right)


# ------------------------------------------------------- coefficients, warps

def landmarks_from_coeffs(template: MeanTemplate, p):
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (template.n_bases,):
        raise DataError(f"expected {template.n_bases} coefficients, got {p.shape}")
    return template.mean_landmarks + template.landmark_basis @ p


def fit_coeffs(template: MeanTemplate, landmarks):
    """Least-squares coefficients reproducing the given landmark positions."""
    target = (np.asarray(landmarks, dtype=np.float64) - template.mean_landmarks)
    a = template.landmark_basis.reshape(-1, template.n_bases)
    p, *_ = np.linalg.lstsq(a, target.reshape(-1), rcond=None)
    return p


def eval_warp(template: MeanTemplate, p):
    """Dense field W(z) = z + B(z) p over the template raster, as (H, W, 2)
    target (x, y) coordinates. p = 0 gives the identity exactly."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (template.n_bases,):
        raise DataError(f"expected {template.n_bases} coefficients, got {p.shape}")
    h, w = template.shape
    ys, xs = np.mgrid[0:h, 0:w]
    ident = np.stack([xs, ys], axis=-1).astype(np.float64)
    return ident + template.dense_basis @ p


def warp_template_to_image(channels, mask, coords, out_shape):
    """Splat template-domain channels into an image raster.

    Each masked template pixel's value lands at its field coordinate with
    bilinear weights; accumulated values are normalised by the accumulated
    weight (so constants stay constant where covered) and untouched pixels
    are zero.
    """
    channels = np.asarray(channels, dtype=np.float64)
    single = channels.ndim == 2
    if single:
        channels = channels[None]
    oh, ow = int(out_shape[0]), int(out_shape[1])
    if oh < 1 or ow < 1:
        raise ValueError("output extent must be positive")
    sel = np.asarray(mask, dtype=bool).reshape(-1)
    pos = coords.reshape(-1, 2)[sel]
    vals = channels.reshape(channels.shape[0], -1)[:, sel]
    x0 = np.floor(pos[:, 0]).astype(np.int64)
    y0 = np.floor(pos[:, 1]).astype(np.int64)
    fx = pos[:, 0] - x0
    fy = pos[:, 1] - y0
    acc = np.zeros((channels.shape[0], oh, ow))
    wacc = np.zeros((oh, ow))
    for dy in (0, 1):
        for dx in (0, 1):
            xx = x0 + dx
            yy = y0 + dy
            wgt = (fy if dy else 1.0 - fy) * (fx if dx else 1.0 - fx)
            ok = (xx >= 0) & (xx < ow) & (yy >= 0) & (yy < oh)
            flat = yy[ok] * ow + xx[ok]
            np.add.at(wacc.reshape(-1), flat, wgt[ok])
            for c in range(channels.shape[0]):
                np.add.at(acc[c].reshape(-1), flat, wgt[ok] * vals[c][ok])
    covered = wacc > 1e-12
    out = np.zeros_like(acc)
    out[:, covered] = acc[:, covered] / wacc[covered]
    return out[0] if single else out


def warp_image_to_template(image, coords, mask=None):
    """Sample an image at the field coordinates: value at template pixel z is
    the bilinear sample at W(z); samples outside the image are zero."""
    out = bilinear_sample(image, coords[..., 1], coords[..., 0])
    if mask is not None:
        out = out * mask
    return out


# -------------------------------------------------------- initial alignment

@dataclass
class SimilarityTransform:
    """x' = a*x - b*y + tx ; y' = b*x + a*y + ty."""

    a: float
    b: float
    tx: float
    ty: float

    def apply(self, pts):
        pts = np.asarray(pts, dtype=np.float64)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack([self.a * x - self.b * y + self.tx,
                         self.b * x + self.a * y + self.ty], axis=-1)

    def inverse(self):
        d = self.a * self.a + self.b * self.b
        ai, bi = self.a / d, -self.b / d
        return SimilarityTransform(ai, bi,
                                   -(ai * self.tx - bi * self.ty),
                                   -(bi * self.tx + ai * self.ty))

    @property
    def scale(self):
        return float(np.hypot(self.a, self.b))

    @property
    def rotation(self):
        return float(np.arctan2(self.b, self.a))


def solve_similarity(src_pair, dst_pair):
    """The unique similarity mapping two source points onto two targets."""
    (s1, s2), (d1, d2) = src_pair, dst_pair
    zs1, zs2 = complex(*s1), complex(*s2)
    zd1, zd2 = complex(*d1), complex(*d2)
    if abs(zs2 - zs1) < 1e-12:
        raise DegenerateInputError("coincident source points")
    alpha = (zd2 - zd1) / (zs2 - zs1)
    beta = zd1 - alpha * zs1
    return SimilarityTransform(alpha.real, alpha.imag, beta.real, beta.imag)


def similarity_init(image, eye_left, eye_right, template: MeanTemplate):
    """Resample the image so its eyes land on the template's canonical eye
    positions. Returns (aligned image on the template raster, transform
    mapping image coordinates to aligned coordinates).

    When the map shrinks the source (template raster coarser than the
    input), the source is Gaussian-prefiltered first so point sampling does
    not alias; sigma follows the usual sqrt(f^2 - 1) rule.
    """
    tf = solve_similarity((eye_left, eye_right),
                          (template.eye_left, template.eye_right))
    shrink = 1.0 / tf.scale      # source pixels per template pixel
    src_img = np.asarray(image, dtype=np.float64)
    if shrink > 1.0 + 1e-9:
        src_img = gaussian_blur(src_img, 0.4 * np.sqrt(shrink ** 2 - 1.0))
    inv = tf.inverse()
    h, w = template.shape
    ys, xs = np.mgrid[0:h, 0:w]
    src = inv.apply(np.stack([xs, ys], axis=-1).astype(np.float64))
    aligned = bicubic_sample(src_img, src[..., 1], src[..., 0])
    return aligned, tf
