"""Dataset plumbing: manifest files, PNG IO, and controlled degradation.

A manifest is line-delimited UTF-8: one JSON object per line with a "path"
plus optional "landmarks" (68 x 2), "eyes" (2 x 2, left then right), and
"split". Blank lines and lines starting with '#' are ignored. Parsing errors
name the offending line and field.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image

from .errors import DataError
from .geometry import eye_centers
from .resample import gaussian_blur, resize_bicubic, scale_coords

N_LANDMARKS = 68

_KNOWN_FIELDS = {"path", "landmarks", "eyes", "split"}


@dataclass
class ManifestRecord:
    path: str
    landmarks: Optional[np.ndarray] = None   # (68, 2)
    eyes: Optional[np.ndarray] = None        # (2, 2) left, right
    split: str = "train"

    def eye_pair(self):
        """Eye centers, from the explicit field or from the landmarks."""
        if self.eyes is not None:
            return self.eyes[0], self.eyes[1]
        if self.landmarks is not None:
            return eye_centers(self.landmarks)
        raise DataError(f"record '{self.path}' has neither eyes nor landmarks")


def _point_array(value, n_points, lineno, name):
    try:
        arr = np.asarray(value, dtype=np.float64)
    except (TypeError, ValueError):
        raise DataError(f"manifest line {lineno}: field '{name}': "
                        "not a numeric array") from None
    if arr.shape != (n_points, 2):
        raise DataError(f"manifest line {lineno}: field '{name}': expected "
                        f"{n_points} (x, y) pairs, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"manifest line {lineno}: field '{name}': "
                        "non-finite value")
    return arr


def parse_record(line, lineno):
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise DataError(f"manifest line {lineno}: invalid JSON: {e}") from None
    if not isinstance(obj, dict):
        raise DataError(f"manifest line {lineno}: record must be an object")
    unknown = set(obj) - _KNOWN_FIELDS
    if unknown:
        raise DataError(f"manifest line {lineno}: field "
                        f"'{sorted(unknown)[0]}': unknown field")
    path = obj.get("path")
    if not isinstance(path, str) or not path:
        raise DataError(f"manifest line {lineno}: field 'path': "
                        "missing or empty")
    landmarks = eyes = None
    if obj.get("landmarks") is not None:
        landmarks = _point_array(obj["landmarks"], N_LANDMARKS, lineno,
                                 "landmarks")
    if obj.get("eyes") is not None:
        eyes = _point_array(obj["eyes"], 2, lineno, "eyes")
    split = obj.get("split", "train")
    if not isinstance(split, str) or not split:
        raise DataError(f"manifest line {lineno}: field 'split': "
                        "must be a non-empty string")
    return ManifestRecord(path=path, landmarks=landmarks, eyes=eyes,
                          split=split)


def parse_manifest(text):
    records = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        records.append(parse_record(stripped, lineno))
    return records


def load_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return parse_manifest(fh.read())


def dump_record(record: ManifestRecord):
    obj = {"path": record.path}
    if record.landmarks is not None:
        obj["landmarks"] = np.asarray(record.landmarks, dtype=np.float64).tolist()
    if record.eyes is not None:
        obj["eyes"] = np.asarray(record.eyes, dtype=np.float64).tolist()
    obj["split"] = record.split
    return json.dumps(obj)


def dump_manifest(records):
    return "".join(dump_record(r) + "\n" for r in records)


def save_manifest(records, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_manifest(records))


# ----------------------------------------------------------------- images

def load_image(path):
    """Grayscale float64 raster in [0, 1]."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16"):
            arr = np.asarray(im, dtype=np.float64) / 65535.0
        elif im.mode == "F":
            arr = np.asarray(im, dtype=np.float64)
        else:
            arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    if arr.ndim != 2:
        raise DataError(f"'{path}' did not decode to a single-channel raster")
    return arr


def save_image(path, img):
    """8-bit grayscale PNG; values clamped to [0, 1] before quantisation."""
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path)


def load_face(path):
    """Luminance in [0, 1] plus the chroma planes when the file is colour.

    Returns ``(y, chroma)`` where chroma is an (h, w, 2) float64 array of
    Cb/Cr in [0, 1], or None for single-channel files. The network only ever
    sees luminance; chroma just rides along so colour inputs stay colour.
    """
    with Image.open(path) as im:
        if im.mode in ("RGB", "RGBA", "P", "CMYK", "YCbCr"):
            ycc = np.asarray(im.convert("YCbCr"), dtype=np.float64) / 255.0
            return ycc[:, :, 0], ycc[:, :, 1:]
    return load_image(path), None


def save_face(path, y, chroma=None):
    """Inverse of load_face: grayscale PNG, or RGB when chroma is given."""
    if chroma is None:
        save_image(path, y)
        return
    y = np.clip(np.asarray(y, dtype=np.float64), 0.0, 1.0)
    chroma = np.clip(np.asarray(chroma, dtype=np.float64), 0.0, 1.0)
    if chroma.shape != y.shape + (2,):
        raise DataError(f"chroma shape {chroma.shape} does not match "
                        f"luminance {y.shape}")
    ycc = np.concatenate([y[:, :, None], chroma], axis=2)
    ycc8 = np.round(ycc * 255.0).astype(np.uint8)
    Image.fromarray(ycc8, mode="YCbCr").convert("RGB").save(path)


# ------------------------------------------------------------- degradation

@dataclass
class DegradeResult:
    image: np.ndarray
    landmarks: Optional[np.ndarray]
    eyes: Optional[np.ndarray]
    factor: float


def degrade(image, landmarks=None, eyes=None, *, factor=None,
            target_px_iod=None, blur_sigma=0.0, noise_level=0.0, rng=None):
    """Blur, shrink, and add sensor noise; annotations follow the geometry.

    Exactly one of ``factor`` (downscale divisor > 1) or ``target_px_iod``
    must be given; the target form needs eyes or landmarks to measure the
    source scale. ``noise_level`` is additive Gaussian noise expressed on
    the 8-bit scale (i.e. sigma = noise_level / 255 in [0, 1] units). The
    result is clamped to [0, 1].
    """
    image = np.asarray(image, dtype=np.float64)
    if (factor is None) == (target_px_iod is None):
        raise DataError("give exactly one of factor or target_px_iod")
    if target_px_iod is not None:
        if target_px_iod <= 0:
            raise DataError("target pxIOD must be positive")
        if eyes is not None:
            left, right = np.asarray(eyes, dtype=np.float64)
        elif landmarks is not None:
            left, right = eye_centers(np.asarray(landmarks, dtype=np.float64))
        else:
            raise DataError("target_px_iod needs eyes or landmarks")
        src_iod = math.hypot(*(right - left))
        if src_iod <= 0:
            raise DataError("source eye distance is degenerate")
        if target_px_iod > src_iod:
            raise DataError(f"target pxIOD {target_px_iod:g} exceeds source "
                            f"{src_iod:g}; degradation cannot upscale")
        factor = src_iod / target_px_iod
    if not factor >= 1.0:
        raise DataError("downscale factor must be >= 1")

    out = gaussian_blur(image, blur_sigma)
    if factor > 1.0:
        out = resize_bicubic(out, scale=1.0 / factor)
    if noise_level > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        out = out + rng.normal(0.0, noise_level / 255.0, out.shape)
    out = np.clip(out, 0.0, 1.0)

    def _scaled(pts):
        if pts is None or factor == 1.0:
            return None if pts is None else np.asarray(pts, dtype=np.float64)
        return scale_coords(np.asarray(pts, dtype=np.float64), 1.0 / factor)

    return DegradeResult(image=out, landmarks=_scaled(landmarks),
                         eyes=_scaled(eyes), factor=float(factor))
