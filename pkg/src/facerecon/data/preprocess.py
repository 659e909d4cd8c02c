"""Pixel normalisation and 5-point similarity alignment."""
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..errors import DegenerateLandmarksError, PixelRangeError

# 5-point layout (left eye, right eye, nose tip, left mouth, right mouth) on a
# 112x112 crop; scaled linearly to the requested output size.
CANONICAL_LANDMARKS_112 = np.array([
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
])


@dataclass(frozen=True)
class FaceImage:
    pixels: np.ndarray  # float32, (c, h, w), values in [-1, 1]
    subject_id: str = ""
    sample_id: str = ""

    def __post_init__(self):
        p = self.pixels
        if p.ndim != 3 or p.shape[1] != p.shape[2]:
            raise ValueError(f"FaceImage pixels must be (c, s, s), got {p.shape}")
        if p.size and (p.min() < -1.0 - 1e-6 or p.max() > 1.0 + 1e-6):
            raise PixelRangeError("FaceImage pixels must lie in [-1, 1]")

    @property
    def size(self):
        return self.pixels.shape[-1]


def canonical_landmarks(out_size):
    return CANONICAL_LANDMARKS_112 * (out_size / 112.0)


def normalize_pixels(raw):
    """Map integer pixels in [0, 255] to [-1, 1] via ``raw / 127.5 - 1``."""
    raw = np.asarray(raw)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise PixelRangeError(f"pixel values must lie in [0, 255], got [{raw.min()}, {raw.max()}]")
    return (raw.astype(np.float64) / 127.5 - 1.0).astype(np.float32)


def denormalize_pixels(x):
    return (np.asarray(x, dtype=np.float64) + 1.0) * 127.5


def to_uint8(x):
    return np.clip(np.rint(denormalize_pixels(x)), 0, 255).astype(np.uint8)


def load_image(path):
    """Read an image file as HxWx3 uint8 RGB (grayscale replicated)."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def save_image(pixels, path):
    """Write a (3, h, w) array in [-1, 1] as an 8-bit PNG/JPEG."""
    arr = to_uint8(np.transpose(np.asarray(pixels), (1, 2, 0)))
    Image.fromarray(arr, mode="RGB").save(path)


def estimate_similarity(src, dst):
    """Least-squares similarity transform (Umeyama) mapping ``src`` onto ``dst``.

    Returns a 2x3 matrix ``A`` with ``dst ~= A[:, :2] @ p + A[:, 2]``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s, mu_d = src.mean(0), dst.mean(0)
    sc, dc = src - mu_s, dst - mu_d
    var_s = (sc ** 2).sum() / len(src)
    if var_s < 1e-8:
        raise DegenerateLandmarksError("landmarks are coincident; similarity transform is singular")
    sv = np.linalg.svd(sc, compute_uv=False)
    if sv[1] < 1e-6 * sv[0]:
        raise DegenerateLandmarksError("landmarks are collinear; alignment is ill-posed")
    cov = dc.T @ sc / len(src)
    u, s, vt = np.linalg.svd(cov)
    d = np.ones(2)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        d[1] = -1.0
    rot = u @ np.diag(d) @ vt
    scale = (s * d).sum() / var_s
    A = np.empty((2, 3))
    A[:, :2] = scale * rot
    A[:, 2] = mu_d - scale * rot @ mu_s
    return A


def apply_affine(A, pts):
    pts = np.asarray(pts, dtype=np.float64)
    return pts @ A[:, :2].T + A[:, 2]


def invert_affine(A):
    lin = np.linalg.inv(A[:, :2])
    out = np.empty((2, 3))
    out[:, :2] = lin
    out[:, 2] = -lin @ A[:, 2]
    return out


def warp_affine(raw_image, A, out_size):
    """Resample ``raw_image`` (HxWxC uint8) so output pixel q = A(source pixel p).

    Bilinear in float64 with integer coordinates at pixel centres; samples
    outside the source are black. An exact identity reproduces the input.
    """
    raw = np.asarray(raw_image, dtype=np.float64)
    h, w = raw.shape[:2]
    inv = invert_affine(A)
    qy, qx = np.mgrid[0:out_size, 0:out_size].astype(np.float64)
    px = inv[0, 0] * qx + inv[0, 1] * qy + inv[0, 2]
    py = inv[1, 0] * qx + inv[1, 1] * qy + inv[1, 2]
    x0, y0 = np.floor(px).astype(int), np.floor(py).astype(int)
    fx, fy = (px - x0)[..., None], (py - y0)[..., None]

    def tap(yi, xi):
        ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        v = raw[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
        return v * ok[..., None]

    out = ((1 - fy) * ((1 - fx) * tap(y0, x0) + fx * tap(y0, x0 + 1))
           + fy * ((1 - fx) * tap(y0 + 1, x0) + fx * tap(y0 + 1, x0 + 1)))
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def align_and_crop(raw_image, landmarks, out_size, subject_id="", sample_id=""):
    """Similarity-align ``raw_image`` so its landmarks land on the canonical layout.

    ``raw_image`` is HxW or HxWx3 uint8; the result is a 3-channel FaceImage of
    ``out_size`` x ``out_size`` in [-1, 1].
    """
    if out_size < 16:
        raise ValueError(f"out_size must be >= 16, got {out_size}")
    raw = np.asarray(raw_image)
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    landmarks = np.asarray(landmarks, dtype=np.float64).reshape(5, 2)
    A = estimate_similarity(landmarks, canonical_landmarks(out_size))
    warped = warp_affine(raw.astype(np.uint8), A, out_size)
    pixels = np.transpose(normalize_pixels(warped), (2, 0, 1)).copy()
    return FaceImage(pixels, subject_id, sample_id)


def center_crop_resize(raw_image, out_size):
    """Pre-aligned path: centre square crop then resize to ``out_size``."""
    raw = np.asarray(raw_image)
    h, w = raw.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = raw[top:top + s, left:left + s]
    if s != out_size:
        crop = np.asarray(Image.fromarray(crop).resize((out_size, out_size), Image.BILINEAR))
    return crop
