"""Cascaded coefficient regression from shape-indexed appearance.

Each stage predicts an additive update to the deformation coefficients from
gradient-orientation descriptors sampled at the current landmark estimate.
The stage learns an appearance Jacobian J by (lightly regularised) least
squares on coefficient/feature perturbation pairs and applies the
Gauss-Newton update matrix R = (J^T J)^{-1} J^T to centred features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geometry import (MeanTemplate, interocular_distance,
                       landmarks_from_coeffs)
from .resample import bilinear_sample


@dataclass
class FeatureConfig:
    cells: int = 4              # spatial cells per patch side
    bins: int = 8               # gradient orientation bins
    samples_per_cell: int = 4   # sample grid per cell side
    patch_scale: float = 1.0    # patch width in units of the current pxIOD
    min_half_width: float = 2.0

    @property
    def descriptor_length(self):
        return self.cells * self.cells * self.bins


@dataclass
class RegressorConfig:
    n_perturb: int = 10         # extra perturbed starts per training image
    ridge_scale: float = 1e-3   # ridge strength relative to fit residual
    perturb_floor: float = 0.01  # minimum per-basis perturbation std
    feature: FeatureConfig = field(default_factory=FeatureConfig)


def extract_features(image, landmarks, px_iod=None, cfg: FeatureConfig = None):
    """Shape-indexed descriptor: per-landmark orientation histograms.

    Each landmark contributes a cells x cells x bins histogram of weighted
    gradient orientations over a square patch whose width is patch_scale
    times the current inter-ocular distance. Blocks are L2-normalised per
    landmark (flat patches give zero blocks) and concatenated in landmark
    order. Samples outside the image read as zero.
    """
    cfg = cfg or FeatureConfig()
    image = np.asarray(image, dtype=np.float64)
    lms = np.asarray(landmarks, dtype=np.float64)
    if px_iod is None:
        px_iod = interocular_distance(lms)
    n_lm = lms.shape[0]
    grid = cfg.cells * cfg.samples_per_cell
    half = max(0.5 * cfg.patch_scale * float(px_iod), cfg.min_half_width)
    offs = (np.arange(grid) + 0.5) * (2.0 * half / grid) - half
    oy, ox = np.meshgrid(offs, offs, indexing="ij")
    px = lms[:, 0, None, None] + ox[None]
    py = lms[:, 1, None, None] + oy[None]
    d = half / grid
    gx = (bilinear_sample(image, py, px + d) -
          bilinear_sample(image, py, px - d)) / (2.0 * d)
    gy = (bilinear_sample(image, py + d, px) -
          bilinear_sample(image, py - d, px)) / (2.0 * d)
    mag = np.hypot(gx, gy)
    ang = np.arctan2(gy, gx)
    b = np.floor((ang + np.pi) / (2.0 * np.pi) * cfg.bins).astype(int) % cfg.bins

    cell = np.arange(grid) // cfg.samples_per_cell
    cy = cell[:, None]
    cx = cell[None, :]
    lix = np.arange(n_lm)[:, None, None]
    flat = ((lix * cfg.cells + cy[None]) * cfg.cells + cx[None]) * cfg.bins + b
    hist = np.zeros(n_lm * cfg.descriptor_length)
    np.add.at(hist, flat.reshape(-1), mag.reshape(-1))
    hist = hist.reshape(n_lm, cfg.descriptor_length)
    norms = np.linalg.norm(hist, axis=1)
    live = norms > 1e-12
    hist[live] /= norms[live, None]
    hist[~live] = 0.0
    return hist.reshape(-1)


@dataclass
class StageRegressor:
    """One regression stage: centred-feature mean, Jacobian, update matrix."""

    phi_bar: np.ndarray   # (F,)
    jacobian: np.ndarray  # (F, N)
    matrix: np.ndarray    # (N, F), equals (J^T J)^{-1} J^T

    @property
    def n_coeffs(self):
        return self.jacobian.shape[1]


def fit_jacobian(features, deltas, ridge_scale=1e-3):
    """Fit J and R from feature/coefficient-residual pairs.

    Solves phi - phi_bar ~ J (p_hat - p) in the least-squares sense. The
    ridge strength scales with the relative fit residual, so an exactly
    linear world is recovered to numerical precision while noisy data sees
    ridge_scale-level damping of the normal equations.
    """
    features = np.asarray(features, dtype=np.float64)
    deltas = np.asarray(deltas, dtype=np.float64)
    m, n = deltas.shape
    if features.shape[0] != m:
        raise DataError("feature/delta sample counts differ")
    phi_bar = features.mean(axis=0)
    x = features - phi_bar
    gram = deltas.T @ deltas
    base = np.trace(gram) / n
    rhs = deltas.T @ x
    lam0 = 1e-12 * max(base, 1.0)
    jt = np.linalg.solve(gram + lam0 * np.eye(n), rhs)
    xnorm = np.sum(x * x)
    if xnorm > 0:
        resid = x - deltas @ jt
        rho = np.sqrt(np.sum(resid * resid) / xnorm)
        lam = ridge_scale * rho * base
        if lam > lam0:
            jt = np.linalg.solve(gram + lam * np.eye(n), rhs)
    jac = jt.T
    if np.abs(jac).max() == 0.0:
        return StageRegressor(phi_bar=phi_bar, jacobian=jac,
                              matrix=np.zeros((n, features.shape[1])))
    hess = jac.T @ jac
    sv = np.linalg.svd(hess, compute_uv=False)
    if sv[-1] <= sv[0] * 1e-14:
        raise np.linalg.LinAlgError(
            "rank-deficient project-out Hessian; add training diversity")
    matrix = np.linalg.solve(hess, jac.T)
    return StageRegressor(phi_bar=phi_bar, jacobian=jac, matrix=matrix)


def _start_points(p_hat, stds, cfg, rng):
    starts = []
    for _ in range(cfg.n_perturb):
        starts.append(p_hat + rng.standard_normal(p_hat.shape) * stds)
    return starts


def train_stage(samples, template: MeanTemplate, cfg: RegressorConfig = None,
                rng=None):
    """Learn one regression stage from (image, p_hat, p_current) samples.

    Training pairs are the given current estimates plus n_perturb random
    starts per image, drawn around the ground truth with per-basis stds
    matching the stage's own residual distribution (floored so every live
    basis gets excited).
    """
    cfg = cfg or RegressorConfig()
    rng = rng or np.random.default_rng(0)
    if not samples:
        raise DataError("regressor training needs samples")
    n = template.n_bases
    resid = np.stack([np.asarray(s[1], dtype=np.float64) -
                      np.asarray(s[2], dtype=np.float64) for s in samples])
    stds = np.maximum(resid.std(axis=0), cfg.perturb_floor)
    m = len(samples) * (1 + cfg.n_perturb)
    if m < n + 1:
        raise DataError(f"need more than {n} training pairs, got {m}")
    feat_len = template.n_landmarks * cfg.feature.descriptor_length
    features = np.empty((m, feat_len))
    deltas = np.empty((m, n))
    row = 0
    for image, p_hat, p_cur in samples:
        p_hat = np.asarray(p_hat, dtype=np.float64)
        for p_start in [np.asarray(p_cur, dtype=np.float64)] + \
                _start_points(p_hat, stds, cfg, rng):
            lms = landmarks_from_coeffs(template, p_start)
            iod = max(interocular_distance(lms), 2.0)
            features[row] = extract_features(image, lms, px_iod=iod,
                                             cfg=cfg.feature)
            deltas[row] = p_hat - p_start
            row += 1
    return fit_jacobian(features, deltas, ridge_scale=cfg.ridge_scale)


def predict_update(stage: StageRegressor, image, p, template: MeanTemplate,
                   cfg: FeatureConfig = None):
    """One Gauss-Newton step: p + R (phi(image; landmarks(p)) - phi_bar)."""
    p = np.asarray(p, dtype=np.float64)
    lms = landmarks_from_coeffs(template, p)
    iod = max(interocular_distance(lms), 2.0)
    phi = extract_features(image, lms, px_iod=iod, cfg=cfg)
    return p + stage.matrix @ (phi - stage.phi_bar)
