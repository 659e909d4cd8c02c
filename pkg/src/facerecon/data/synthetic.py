"""Parametric "blob faces" for desk-scale experiments.

Each identity fixes skin/hair/eye colours and facial geometry; samples of an
identity vary in pose (shift, scale, roll), illumination, expression and
background, plus sensor noise. Images are quantised to 8 bits so in-memory and
on-disk copies agree exactly.
"""
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .dataset import FaceDataset
from .manifest import ManifestEntry, ImageManifest, write_manifest
from .preprocess import normalize_pixels


def _identity_params(rng):
    return {
        "skin": rng.uniform(0.25, 0.95, 3),
        "hair": rng.uniform(0.0, 0.8, 3),
        "eye": rng.uniform(0.0, 0.7, 3),
        "mouth": np.array([rng.uniform(0.5, 0.95), rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4)]),
        "face_rx": rng.uniform(0.28, 0.38),
        "face_ry": rng.uniform(0.34, 0.44),
        "hairline": rng.uniform(0.18, 0.36),
        "eye_dx": rng.uniform(0.11, 0.17),
        "eye_y": rng.uniform(0.38, 0.46),
        "eye_r": rng.uniform(0.035, 0.065),
        "nose_len": rng.uniform(0.06, 0.14),
        "mouth_y": rng.uniform(0.66, 0.74),
        "mouth_w": rng.uniform(0.08, 0.16),
        "marks": [(rng.uniform(0.3, 0.7), rng.uniform(0.35, 0.75), rng.uniform(0.03, 0.06),
                   rng.uniform(0.0, 1.0, 3)) for _ in range(2)],
    }


def _blob(xx, yy, cx, cy, rx, ry, sharp):
    d = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2
    return 1.0 / (1.0 + np.exp(np.clip(sharp * (d - 1.0), -50, 50)))


def render_face(params, size, rng):
    """Render one sample (HxWx3 uint8) and its five landmarks in pixel coordinates."""
    shift = rng.normal(0.0, 0.025, 2)
    scale = 1.0 + rng.normal(0.0, 0.04)
    roll = rng.normal(0.0, 0.06)
    light = rng.uniform(0.8, 1.15)
    smile = rng.uniform(-0.5, 1.0)
    bg = rng.uniform(0.0, 1.0, 3)

    # face-frame coordinates: undo shift/scale/roll of the pixel grid
    t = (np.arange(size) + 0.5) / size
    yy, xx = np.meshgrid(t, t, indexing="ij")
    u, v = xx - 0.5 - shift[0], yy - 0.52 - shift[1]
    c, s = np.cos(roll), np.sin(roll)
    fx = (c * u + s * v) / scale + 0.5
    fy = (-s * u + c * v) / scale + 0.52

    p = params
    img = np.broadcast_to(bg, (size, size, 3)).copy()
    sharp = 12.0

    def paint(mask, colour):
        nonlocal img
        img = img * (1 - mask[..., None]) + mask[..., None] * colour

    face = _blob(fx, fy, 0.5, 0.52, p["face_rx"], p["face_ry"], sharp)
    paint(face, p["skin"])
    hair = face * (1.0 / (1.0 + np.exp(np.clip(40.0 * (fy - p["hairline"]), -50, 50))))
    paint(hair, p["hair"])
    for mx, my, mr, mc in p["marks"]:
        paint(0.6 * face * _blob(fx, fy, mx, my, mr, mr, sharp), mc)
    for side in (-1, 1):
        paint(_blob(fx, fy, 0.5 + side * p["eye_dx"], p["eye_y"], p["eye_r"] * 1.4, p["eye_r"], sharp),
              np.ones(3) * 0.95)
        paint(_blob(fx, fy, 0.5 + side * p["eye_dx"], p["eye_y"], p["eye_r"] * 0.7, p["eye_r"] * 0.7, sharp),
              p["eye"])
    nose_y = p["eye_y"] + 0.08 + p["nose_len"] / 2
    paint(0.7 * _blob(fx, fy, 0.5, nose_y, 0.025, p["nose_len"] / 2, sharp), p["skin"] * 0.6)
    mouth_h = 0.018 + 0.02 * max(smile, 0.0)
    curve = 0.04 * smile * ((fx - 0.5) / p["mouth_w"]) ** 2
    paint(_blob(fx, fy + curve, 0.5, p["mouth_y"], p["mouth_w"], mouth_h, sharp), p["mouth"])

    img = np.clip(img * light + rng.normal(0.0, 0.02, img.shape), 0.0, 1.0)
    pix = np.rint(img * 255.0).astype(np.uint8)

    def to_pixel(px, py):
        u0, v0 = (px - 0.5) * scale, (py - 0.52) * scale
        x = c * u0 - s * v0 + 0.5 + shift[0]
        y = s * u0 + c * v0 + 0.52 + shift[1]
        return x * size - 0.5, y * size - 0.5

    mouth_corner_y = p["mouth_y"] - 0.04 * smile
    landmarks = [to_pixel(0.5 - p["eye_dx"], p["eye_y"]), to_pixel(0.5 + p["eye_dx"], p["eye_y"]),
                 to_pixel(0.5, nose_y + p["nose_len"] / 2),
                 to_pixel(0.5 - p["mouth_w"], mouth_corner_y), to_pixel(0.5 + p["mouth_w"], mouth_corner_y)]
    return pix, np.array(landmarks)


def synthetic_faces(n_subjects, samples_per_subject, size=32, seed=0, subject_prefix="s"):
    """Blob-face dataset held in memory.

    Identity parameters depend only on ``(seed, subject index)`` so two calls
    with the same seed agree on every shared subject.
    """
    pixels, subjects, samples = [], [], []
    for sid in range(n_subjects):
        params = _identity_params(np.random.default_rng([seed, sid, 0]))
        rng = np.random.default_rng([seed, sid, 1])
        for k in range(samples_per_subject):
            img, _ = render_face(params, size, rng)
            pixels.append(np.transpose(normalize_pixels(img), (2, 0, 1)))
            subjects.append(f"{subject_prefix}{sid:04d}")
            samples.append(f"{k:03d}")
    return FaceDataset(torch.from_numpy(np.stack(pixels)), subjects, samples)


def write_synthetic_dataset(out_dir, n_subjects, samples_per_subject, size=32, seed=0,
                            with_landmarks=False, partition_fn=None, subject_prefix="s"):
    """Render blob faces to PNG files plus ``manifest.jsonl``; returns the manifest."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    entries = []
    for sid in range(n_subjects):
        params = _identity_params(np.random.default_rng([seed, sid, 0]))
        rng = np.random.default_rng([seed, sid, 1])
        for k in range(samples_per_subject):
            img, lm = render_face(params, size, rng)
            subject, sample = f"{subject_prefix}{sid:04d}", f"{k:03d}"
            rel = f"images/{subject}_{sample}.png"
            Image.fromarray(img, mode="RGB").save(out_dir / rel)
            part = partition_fn(sid, k) if partition_fn else ""
            entries.append(ManifestEntry(rel, subject, sample,
                                         tuple(map(tuple, lm)) if with_landmarks else None, part))
    manifest = ImageManifest(tuple(entries), out_dir)
    write_manifest(manifest, out_dir / "manifest.jsonl")
    return manifest
