"""Quality metrics over the facial region of the luminance channel.

PSNR uses peak 1.0 on normalised intensities; identical inputs give
``inf``, which reports substitute with the documented cap ``PSNR_CAP`` so
means stay finite. SSIM is the standard mean structural similarity with an
11x11 Gaussian window (sigma 1.5), averaged over window centers that lie
inside the region and far enough from the border for a full window. The
facial region is the convex hull of the ground-truth landmarks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.spatial import QhullError

from .errors import DataError
from .geometry import hull_mask

PSNR_CAP = 99.0  # reported in place of the infinite same-image sentinel

_WINDOW_RADIUS = 5
_WINDOW_SIGMA = 1.5
_C1 = (0.01) ** 2
_C2 = (0.03) ** 2


def facial_region(landmarks, shape):
    """Boolean mask: convex hull of the landmarks, undilated."""
    try:
        mask = hull_mask(landmarks, shape, dilate=0.0)
    except (QhullError, ValueError) as exc:
        raise DataError(f"degenerate landmarks for facial region: {exc}")
    if not mask.any():
        raise DataError("facial region is empty")
    return mask


def _check_pair(a, b, region):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise DataError(f"extent mismatch: {a.shape} vs {b.shape}")
    if region is not None:
        region = np.asarray(region, dtype=bool)
        if region.shape != a.shape:
            raise DataError("region extent mismatch")
        if not region.any():
            raise DataError("empty evaluation region")
    return a, b, region


def psnr(a, b, region=None, peak=1.0):
    """10 log10(peak^2 / MSE) over the masked pixels; inf when identical."""
    a, b, region = _check_pair(a, b, region)
    diff = a - b
    if region is not None:
        diff = diff[region]
    mse = np.mean(diff * diff)
    if mse == 0.0:
        return np.inf
    return float(10.0 * np.log10(peak * peak / mse))


def _window_mean(x):
    lp = ndimage.correlate1d(x, _gauss_taps(), axis=0, mode="nearest")
    return ndimage.correlate1d(lp, _gauss_taps(), axis=1, mode="nearest")


_taps_cache = None


def _gauss_taps():
    global _taps_cache
    if _taps_cache is None:
        xs = np.arange(-_WINDOW_RADIUS, _WINDOW_RADIUS + 1, dtype=np.float64)
        t = np.exp(-(xs * xs) / (2.0 * _WINDOW_SIGMA ** 2))
        _taps_cache = t / t.sum()
    return _taps_cache


def ssim(a, b, region=None):
    """Mean SSIM over valid window centers inside the region."""
    a, b, region = _check_pair(a, b, region)
    h, w = a.shape
    r = _WINDOW_RADIUS
    if h <= 2 * r or w <= 2 * r:
        raise DataError("image smaller than the SSIM window")
    mu_a = _window_mean(a)
    mu_b = _window_mean(b)
    var_a = _window_mean(a * a) - mu_a * mu_a
    var_b = _window_mean(b * b) - mu_b * mu_b
    cov = _window_mean(a * b) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + _C1) * (2.0 * cov + _C2)
    den = (mu_a * mu_a + mu_b * mu_b + _C1) * (var_a + var_b + _C2)
    smap = num / den
    valid = np.zeros(a.shape, dtype=bool)
    valid[r:h - r, r:w - r] = True
    if region is not None:
        valid &= region
    if not valid.any():
        raise DataError("no valid SSIM window centers in the region")
    return float(smap[valid].mean())


@dataclass
class ScoreRow:
    name: str
    psnr_db: float
    ssim: float


@dataclass
class ScoreReport:
    """Per-image rows plus their means. Column order: name, psnr_db, ssim."""

    rows: list
    mean_psnr: float
    mean_ssim: float
    errors: list

    def to_tsv(self):
        lines = ["name\tpsnr_db\tssim"]
        for r in self.rows:
            lines.append(f"{r.name}\t{r.psnr_db:.6f}\t{r.ssim:.6f}")
        lines.append(f"mean\t{self.mean_psnr:.6f}\t{self.mean_ssim:.6f}")
        for name, msg in self.errors:
            lines.append(f"# error\t{name}\t{msg}")
        return "\n".join(lines) + "\n"

    def summary(self):
        return (f"{len(self.rows)} images: mean PSNR {self.mean_psnr:.4f} dB, "
                f"mean SSIM {self.mean_ssim:.4f}"
                + (f" ({len(self.errors)} failed)" if self.errors else ""))


def score_records(records, psnr_cap=PSNR_CAP):
    """Score (name, predicted, truth, landmarks-or-None) tuples.

    Infinite PSNR values are capped at ``psnr_cap``. Records that fail to
    evaluate are collected under ``errors`` and skipped from the means.
    """
    rows = []
    errors = []
    for name, pred, truth, landmarks in records:
        try:
            region = None
            if landmarks is not None:
                region = facial_region(landmarks, np.asarray(truth).shape)
            p = psnr(pred, truth, region)
            s = ssim(pred, truth, region)
        except (DataError, OSError) as exc:
            errors.append((name, str(exc)))
            continue
        rows.append(ScoreRow(name=name, psnr_db=min(p, psnr_cap), ssim=s))
    if rows:
        mean_p = float(np.mean([r.psnr_db for r in rows]))
        mean_s = float(np.mean([r.ssim for r in rows]))
    else:
        mean_p = mean_s = float("nan")
    return ScoreReport(rows=rows, mean_psnr=mean_p, mean_ssim=mean_s,
                       errors=errors)
