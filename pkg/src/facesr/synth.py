"""Procedural face generator for experiments and tests.

Produces stylised grayscale faces with a 68-point landmark annotation in the
standard ordering (jaw 0-16, brows 17-26, nose 27-35, eyes 36-47, mouth
48-67). The rendering anchors a fixed fine-scale texture to the face frame,
so detail is consistent across identities and learnable by a
correspondence-aware model. Images are float64 in [0, 1].
"""

from __future__ import annotations

import numpy as np

from .geometry import LEFT_EYE, RIGHT_EYE, eye_centers, hull_mask, solve_similarity
from .resample import gaussian_blur


def canonical_landmarks():
    """The neutral 68-point face in eye-normalised coordinates.

    Eye centers sit at (-0.5, 0) and (0.5, 0), so the inter-ocular distance
    is exactly 1. y grows downward, matching raster order.
    """
    pts = np.zeros((68, 2))
    # jaw: half ellipse, left ear -> chin -> right ear
    th = np.pi + np.arange(17) * (np.pi / 16.0)
    pts[0:17, 0] = 1.15 * np.cos(th)
    pts[0:17, 1] = 0.35 - 1.30 * np.sin(th)
    # brows: arched segments above each eye
    xs = np.linspace(-0.85, -0.15, 5)
    arch = 0.12 * np.sin(np.linspace(0, np.pi, 5))
    pts[17:22, 0] = xs
    pts[17:22, 1] = -0.50 - arch
    pts[22:27, 0] = -xs[::-1]
    pts[22:27, 1] = -0.50 - arch[::-1]
    # nose bridge and base
    pts[27:31, 0] = 0.0
    pts[27:31, 1] = np.linspace(-0.40, 0.32, 4)
    pts[31:36, 0] = np.linspace(-0.25, 0.25, 5)
    pts[31:36, 1] = [0.44, 0.47, 0.49, 0.47, 0.44]
    # eyes: six points each, corners on the horizontal axis
    eye = np.array([[-0.22, 0.0], [-0.10, -0.07], [0.10, -0.07],
                    [0.22, 0.0], [0.10, 0.07], [-0.10, 0.07]])
    pts[36:42] = eye + [-0.5, 0.0]
    pts[42:48] = eye + [0.5, 0.0]
    # mouth: outer ellipse (12 points) and inner ellipse (8 points)
    cy = 1.05
    th = np.pi - np.arange(12) * (2 * np.pi / 12.0)
    b = np.where(np.sin(th) >= 0, 0.18, 0.22)
    pts[48:60, 0] = 0.42 * np.cos(th)
    pts[48:60, 1] = cy - b * np.sin(th)
    th = np.pi - np.arange(8) * (2 * np.pi / 8.0)
    pts[60:68, 0] = 0.30 * np.cos(th)
    pts[60:68, 1] = cy - 0.07 * np.sin(th)
    return pts


def sample_landmarks(rng, strength=1.0):
    """A random identity: the canonical face under a few smooth deformation
    modes plus small independent jitter."""
    pts = canonical_landmarks()
    e = rng.standard_normal(5) * strength
    pts[:, 0] *= 1.0 + 0.08 * e[0]                  # face width
    lower = pts[:, 1] > 0.2
    pts[lower, 1] *= 1.0 + 0.07 * e[1]              # jaw/chin length
    pts[48:68, 1] += 0.05 * e[2]                    # mouth height
    pts[17:27, 1] -= 0.04 * e[3]                    # brow raise
    pts[48:68, 0] *= 1.0 + 0.08 * e[4]              # mouth width
    pts += rng.standard_normal(pts.shape) * 0.008 * strength
    # restore the eye-normalised frame
    left, right = eye_centers(pts)
    iod = np.hypot(*(right - left))
    pts = (pts - (left + right) / 2.0) / iod
    return pts


def place_landmarks(pts, px_iod, rng=None, max_rot=0.15, jitter=2.0,
                    margin=0.9):
    """Map eye-normalised landmarks into a raster frame.

    Scales to the requested pixel inter-ocular distance, optionally rotates
    and translates at random, and returns (landmarks, (height, width)) with
    the face fully inside the raster.
    """
    pts = np.asarray(pts, dtype=np.float64) * px_iod
    if rng is not None:
        ang = rng.uniform(-max_rot, max_rot)
        c, s = np.cos(ang), np.sin(ang)
        pts = pts @ np.array([[c, s], [-s, c]])
    pad = margin * px_iod
    lo = pts.min(axis=0) - pad
    hi = pts.max(axis=0) + pad
    shift = -lo
    if rng is not None:
        shift = shift + rng.uniform(0.0, jitter, size=2)
        hi = hi + jitter
    size = np.ceil(hi - lo).astype(int)
    return pts + shift, (int(size[1]), int(size[0]))


_SEGMENTS = (
    (range(0, 17), False, 0.10, 0.045),     # jaw line
    (range(17, 22), False, 0.30, 0.030),    # brows
    (range(22, 27), False, 0.30, 0.030),
    (range(27, 31), False, 0.16, 0.035),    # nose bridge
    (range(31, 36), False, 0.22, 0.028),    # nose base
    (range(36, 42), True, 0.38, 0.022),     # eye contours
    (range(42, 48), True, 0.38, 0.022),
    (range(48, 60), True, 0.32, 0.030),     # lips
    (range(60, 68), True, 0.22, 0.020),
)

# fixed texture table: (fx, fy) cycles per inter-ocular distance, phase, amp
_TEXTURE = (
    (3.1, 0.9, 0.00, 1.00), (1.2, 3.6, 1.30, 0.90), (2.6, -2.2, 2.10, 0.80),
    (-1.8, 2.9, 0.40, 0.70), (4.0, 1.6, 2.70, 0.55), (0.7, -4.1, 1.90, 0.50),
)


def _stroke(img, p0, p1, amp, sigma):
    """Subtract a Gaussian-profile line segment from the image in place."""
    h, w = img.shape
    r = 3.5 * sigma
    x0 = max(int(np.floor(min(p0[0], p1[0]) - r)), 0)
    x1 = min(int(np.ceil(max(p0[0], p1[0]) + r)) + 1, w)
    y0 = max(int(np.floor(min(p0[1], p1[1]) - r)), 0)
    y1 = min(int(np.ceil(max(p0[1], p1[1]) + r)) + 1, h)
    if x0 >= x1 or y0 >= y1:
        return
    ys, xs = np.mgrid[y0:y1, x0:x1]
    d = np.stack([xs - p0[0], ys - p0[1]], axis=-1).astype(np.float64)
    seg = np.asarray(p1, dtype=np.float64) - p0
    len2 = seg @ seg
    if len2 < 1e-12:
        dist2 = (d ** 2).sum(axis=-1)
    else:
        t = np.clip((d @ seg) / len2, 0.0, 1.0)
        dist2 = ((d - t[..., None] * seg) ** 2).sum(axis=-1)
    img[y0:y1, x0:x1] -= amp * np.exp(-dist2 / (2.0 * sigma * sigma))


def render_face(landmarks, shape, detail=1.0):
    """Draw a stylised face for raster-frame landmarks.

    ``detail`` scales the fine texture anchored to the face frame; the
    texture pattern itself is fixed so every rendered face carries the same
    high-frequency structure in face coordinates.
    """
    lms = np.asarray(landmarks, dtype=np.float64)
    h, w = shape
    left, right = eye_centers(lms)
    iod = float(np.hypot(*(right - left)))

    skin = hull_mask(lms[0:27], (h, w), dilate=0.18).astype(np.float64)
    skin = gaussian_blur(skin, 0.05 * iod)
    img = 0.25 + 0.55 * skin

    for idx, closed, amp, sigma in _SEGMENTS:
        idx = list(idx)
        if closed:
            idx = idx + [idx[0]]
        for a, b in zip(idx[:-1], idx[1:]):
            _stroke(img, lms[a], lms[b], amp, sigma * iod)

    # pupils
    ys, xs = np.mgrid[0:h, 0:w]
    for c in (left, right):
        d2 = (xs - c[0]) ** 2 + (ys - c[1]) ** 2
        img -= 0.45 * np.exp(-d2 / (2.0 * (0.055 * iod) ** 2))

    if detail > 0:
        # face-frame coordinates: eyes to (-0.5, 0) / (0.5, 0)
        tf = solve_similarity((left, right), ((-0.5, 0.0), (0.5, 0.0)))
        uv = tf.apply(np.stack([xs, ys], axis=-1).astype(np.float64))
        tex = np.zeros((h, w))
        for fx, fy, phase, amp in _TEXTURE:
            tex += amp * np.cos(2 * np.pi * (fx * uv[..., 0] + fy * uv[..., 1])
                                + phase)
        img += detail * 0.035 * skin * tex

    return np.clip(img, 0.0, 1.0)


def make_face(rng, px_iod, strength=1.0, detail=1.0, max_rot=0.15):
    """One random face: returns (image, landmarks) in a raster sized to fit."""
    pts = sample_landmarks(rng, strength=strength)
    lms, shape = place_landmarks(pts, px_iod, rng=rng, max_rot=max_rot)
    return render_face(lms, shape, detail=detail), lms


def eye_pair(landmarks):
    """Convenience wrapper: stacked (2, 2) array of the two eye centers."""
    left, right = eye_centers(landmarks)
    return np.stack([left, right])


__all__ = [
    "canonical_landmarks", "sample_landmarks", "place_landmarks",
    "render_face", "make_face", "eye_pair", "LEFT_EYE", "RIGHT_EYE",
]
