"""High-frequency prior: where faces carry detail, as template channels.

The prior is built from training pairs: for each face, the magnitude of the
residual between the ground truth and its bicubic-upscaled low-res version is
warped into the mean template and averaged. The smoothed average is carved
into C spatially connected channels; channel c holds the map restricted to
cluster c, zero elsewhere. Channels are non-negative, have disjoint supports
and together cover exactly the above-threshold part of the map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import DataError
from .geometry import MeanTemplate, warp_image_to_template
from .resample import gaussian_blur, resize_bicubic, resize_bilinear


@dataclass
class PriorConfig:
    channels: int = 10
    percentile: float = 0.60      # magnitude floor as a quantile of the map
    smooth_radius: float = 1.0    # px, applied before thresholding
    normalize_peak: bool = True   # scale the map so its maximum is 1

    def __post_init__(self):
        if self.channels < 1:
            raise DataError("prior needs at least one channel")
        if not 0.0 <= self.percentile < 1.0:
            raise DataError("percentile must lie in [0, 1)")


def residual_magnitude(hires, lores):
    """|ground truth - bicubic upscale of the low-res input|."""
    hires = np.asarray(hires, dtype=np.float64)
    return np.abs(hires - resize_bicubic(lores, out_shape=hires.shape))


def build_preliminary(train_pairs, template: MeanTemplate, cfg: PriorConfig):
    """Average warped residual magnitude over the training set.

    ``train_pairs`` holds (hires, lores, field) triples where ``field`` maps
    the template onto the hires raster. Returns the smoothed (and optionally
    peak-normalised) map over the template domain.
    """
    if not train_pairs:
        raise DataError("prior construction needs a non-empty training set")
    acc = np.zeros(template.shape)
    for hires, lores, field in train_pairs:
        mag = residual_magnitude(hires, lores)
        acc += warp_image_to_template(mag, field, mask=template.mask)
    pre = acc / len(train_pairs)
    if cfg.smooth_radius > 0:
        pre = gaussian_blur(pre, cfg.smooth_radius)
    pre = pre * template.mask
    peak = pre.max()
    if cfg.normalize_peak and peak > 0:
        pre = pre / peak
    return pre


def _cluster_labels(active, mag, n_clusters):
    """Assign every active pixel to one of ``n_clusters`` spatial clusters.

    Starts from 8-connected components of the active set, then runs a
    magnitude-weighted Lloyd iteration on pixel coordinates to merge or
    split down to exactly the requested count. Fully deterministic.
    """
    ys, xs = np.nonzero(active)
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    w = mag[ys, xs]
    comp, n_comp = ndimage.label(active, structure=np.ones((3, 3), dtype=int))
    comp_ids = comp[ys, xs]

    centroids = []
    totals = []
    for i in range(1, n_comp + 1):
        sel = comp_ids == i
        wi = w[sel]
        centroids.append(np.average(pts[sel], axis=0, weights=wi)
                         if wi.sum() > 0 else pts[sel].mean(axis=0))
        totals.append(wi.sum())
    centroids = np.asarray(centroids)
    order = np.argsort(totals)[::-1]

    if n_comp >= n_clusters:
        centers = centroids[order[:n_clusters]]
    else:
        centers = list(centroids)
        # split: add the active pixel farthest from any current center,
        # until we have enough seeds (or run out of pixels)
        while len(centers) < n_clusters and len(centers) < len(pts):
            d2 = ((pts[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1)
            centers.append(pts[d2.min(axis=1).argmax()])
        centers = np.asarray(centers)

    labels = np.zeros(len(pts), dtype=int)
    for _ in range(50):
        d2 = ((pts[:, None, :] - centers[None]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        new_centers = centers.copy()
        for c in range(len(centers)):
            sel = labels == c
            if sel.any() and w[sel].sum() > 0:
                new_centers[c] = np.average(pts[sel], axis=0, weights=w[sel])
        if np.abs(new_centers - centers).max() < 1e-9:
            centers = new_centers
            break
        centers = new_centers

    raster = np.full(active.shape, -1, dtype=int)
    raster[ys, xs] = labels
    return raster


def partition_channels(pre_map, mask, cfg: PriorConfig):
    """Carve the preliminary map into C disjoint non-negative channels.

    Pixels at or below the magnitude floor (the cfg quantile of the map over
    the mask) belong to no channel. The channel stack sums exactly to the
    thresholded map.
    """
    pre_map = np.asarray(pre_map, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros((cfg.channels,) + pre_map.shape)
    vals = pre_map[mask]
    if vals.size == 0:
        return out
    thr = np.percentile(vals, cfg.percentile * 100.0)
    active = (pre_map > thr) & mask
    if not active.any():
        return out
    labels = _cluster_labels(active, pre_map, cfg.channels)
    for c in range(cfg.channels):
        sel = labels == c
        out[c][sel] = pre_map[sel]
    return out


def build_prior(train_pairs, template: MeanTemplate, cfg: PriorConfig = None):
    """Residual statistics -> preliminary map -> C-channel prior stack."""
    cfg = cfg or PriorConfig()
    pre = build_preliminary(train_pairs, template, cfg)
    return partition_channels(pre, template.mask, cfg)


def rescale_channels(channels, out_shape):
    """The same prior at another template resolution.

    The summed map is resized bilinearly (no undershoot) and the cluster
    assignment by nearest neighbour, so disjointness survives the resize.
    """
    channels = np.asarray(channels, dtype=np.float64)
    n, h, w = channels.shape
    oh, ow = int(out_shape[0]), int(out_shape[1])
    summed = channels.sum(axis=0)
    labels = np.full((h, w), -1, dtype=int)
    covered = channels.max(axis=0) > 0
    labels[covered] = channels[:, covered].argmax(axis=0)

    sy = np.clip(np.round((np.arange(oh) + 0.5) * h / oh - 0.5).astype(int), 0, h - 1)
    sx = np.clip(np.round((np.arange(ow) + 0.5) * w / ow - 0.5).astype(int), 0, w - 1)
    labels_r = labels[sy][:, sx]
    map_r = np.maximum(resize_bilinear(summed, out_shape=(oh, ow)), 0.0)

    out = np.zeros((n, oh, ow))
    for c in range(n):
        sel = labels_r == c
        out[c][sel] = map_r[sel]
    return out
