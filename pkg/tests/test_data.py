import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from facerecon.data import (FaceDataset, canonical_landmarks, estimate_similarity, load_manifest,
                            normalize_pixels, parse_manifest, synthetic_faces, write_synthetic_dataset)
from facerecon.data.dataset import as_dataset
from facerecon.data.preprocess import (align_and_crop, apply_affine, denormalize_pixels, to_uint8,
                                       warp_affine)
from facerecon.errors import (DegenerateLandmarksError, DuplicateIdentityError, ManifestParseError,
                              MissingFieldError, PixelRangeError)


def _line(**kw):
    return json.dumps(kw)


# -- manifest ---------------------------------------------------------------

def test_manifest_two_entries():
    text = "\n".join([_line(path="a.png", subject_id="s1", sample_id="a"),
                      _line(path="b.png", subject_id="s1", sample_id="b", partition="fb")])
    m = parse_manifest(text)
    assert len(m) == 2
    assert m[1].partition == "fb"
    assert m.subjects == ["s1"]


def test_manifest_duplicate_identity():
    text = "\n".join([_line(path="a.png", subject_id="s1", sample_id="a"),
                      _line(path="c.png", subject_id="s1", sample_id="a")])
    with pytest.raises(DuplicateIdentityError):
        parse_manifest(text)


def test_manifest_empty_file_is_parse_error(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text("")
    with pytest.raises(ManifestParseError) as e:
        load_manifest(p)
    assert e.value.line == 1


def test_manifest_errors_carry_line_numbers():
    text = _line(path="a.png", subject_id="s1", sample_id="a") + "\n{not json\n"
    with pytest.raises(ManifestParseError) as e:
        parse_manifest(text)
    assert e.value.line == 2
    with pytest.raises(MissingFieldError) as e:
        parse_manifest(_line(path="a.png", subject_id="s1"))
    assert e.value.line == 1
    with pytest.raises(ManifestParseError):
        parse_manifest(_line(path="a.png", subject_id="s", sample_id="a", landmarks=[1, 2, 3]))


def test_manifest_landmarks_flattened_roundtrip(tmp_path):
    lm = [float(v) for v in range(10)]
    p = tmp_path / "m.jsonl"
    p.write_text(_line(path="a.png", subject_id="s", sample_id="a", landmarks=lm) + "\n")
    m = load_manifest(p)
    assert m[0].landmarks == ((0, 1), (2, 3), (4, 5), (6, 7), (8, 9))
    assert m[0].to_json()["landmarks"] == lm
    assert m.resolve(m[0]) == tmp_path / "a.png"


def test_manifest_loading_is_deterministic(tmp_path):
    man = write_synthetic_dataset(tmp_path, 3, 2, size=24, seed=0)
    a = load_manifest(tmp_path / "manifest.jsonl")
    b = load_manifest(tmp_path / "manifest.jsonl")
    assert a.entries == b.entries == man.entries


# -- pixels -----------------------------------------------------------------

def test_normalize_endpoints():
    assert normalize_pixels(np.array([0]))[0] == -1.0
    assert abs(normalize_pixels(np.array([255]))[0] - 1.0) < 1e-6
    assert np.isclose(normalize_pixels(np.array([127]))[0], 127 / 127.5 - 1)
    assert np.isclose(normalize_pixels(np.array([127]))[0], -0.00392156862745098)


def test_normalize_rejects_out_of_range():
    with pytest.raises(PixelRangeError):
        normalize_pixels(np.array([256]))
    with pytest.raises(PixelRangeError):
        normalize_pixels(np.array([-1]))


@given(st.lists(st.integers(0, 255), min_size=2, max_size=50))
def test_normalize_roundtrip_and_monotone(vals):
    raw = np.array(vals)
    out = normalize_pixels(raw)
    assert np.all(np.abs(denormalize_pixels(out) - raw) < 1e-4)
    order = np.argsort(raw, kind="stable")
    assert np.all(np.diff(out[order]) >= 0)
    assert np.all((out >= -1) & (out <= 1))


def test_to_uint8_inverts_normalize():
    raw = np.arange(256, dtype=np.uint8)
    assert np.array_equal(to_uint8(normalize_pixels(raw)), raw)


# -- alignment ----------------------------------------------------------------

def test_align_identity_transform_equals_crop(rng):
    raw = rng.integers(0, 256, size=(64, 64, 3), dtype=np.uint8)
    face = align_and_crop(raw, canonical_landmarks(64), 64)
    assert face.pixels.shape == (3, 64, 64)
    assert np.abs(face.pixels - np.transpose(normalize_pixels(raw), (2, 0, 1))).max() < 1 / 255


def test_align_coincident_landmarks_rejected():
    raw = np.zeros((40, 40, 3), np.uint8)
    with pytest.raises(DegenerateLandmarksError):
        align_and_crop(raw, [(10, 10)] * 5, 32)
    with pytest.raises(DegenerateLandmarksError):
        align_and_crop(raw, [(i, 2 * i) for i in range(5)], 32)


def _dot_image(points, size):
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size), np.float64)
    for x, y in points:
        img += np.exp(-((xx - x) ** 2 + (yy - y) ** 2) / (2 * 1.5 ** 2))
    return img


def _centroids(img, guesses, radius=4):
    yy, xx = np.mgrid[0:img.shape[0], 0:img.shape[1]]
    out = []
    for gx, gy in guesses:
        m = ((xx - gx) ** 2 + (yy - gy) ** 2) <= radius ** 2
        w = img * m
        out.append(((w * xx).sum() / w.sum(), (w * yy).sum() / w.sum()))
    return np.array(out)


@pytest.mark.parametrize("angle,scale,shift", [(0.3, 1.4, (17, 9)), (-0.5, 0.8, (5, 30)), (1.2, 2.0, (200, 12))])
def test_align_recovers_canonical_positions(angle, scale, shift):
    out = 96
    canon = canonical_landmarks(out)
    c, s = np.cos(angle), np.sin(angle)
    T = np.array([[scale * c, -scale * s, shift[0]], [scale * s, scale * c, shift[1]]])
    src_pts = apply_affine(T, canon)
    size = 260
    assert src_pts.min() > 5 and src_pts.max() < size - 5
    img = _dot_image(src_pts, size)
    raw = np.repeat((255 * img / img.max()).astype(np.uint8)[..., None], 3, axis=2)
    face = align_and_crop(raw, src_pts, out)
    found = _centroids((face.pixels[0] + 1) / 2, canon)
    assert np.abs(found - canon).max() < 0.5


def test_estimate_similarity_exact_on_noise_free_points(rng):
    src = rng.uniform(0, 100, size=(5, 2))
    A = np.array([[0.7, -0.4, 3.0], [0.4, 0.7, -8.0]])
    assert np.allclose(estimate_similarity(src, apply_affine(A, src)), A)


@settings(max_examples=20, deadline=None)
@given(st.integers(20, 120), st.integers(16, 80))
def test_align_output_shape_any_source(src_size, out_size):
    raw = np.full((src_size, src_size + 7), 128, np.uint8)
    lm = canonical_landmarks(src_size)
    face = align_and_crop(raw, lm, out_size)
    assert face.pixels.shape == (3, out_size, out_size)
    assert face.pixels.min() >= -1 and face.pixels.max() <= 1


def test_grayscale_replicated_to_three_channels():
    raw = np.full((32, 32), 200, np.uint8)
    face = align_and_crop(raw, canonical_landmarks(32), 32)
    assert face.pixels.shape[0] == 3
    assert np.allclose(face.pixels[0], face.pixels[2])


def test_align_rejects_tiny_output():
    with pytest.raises(ValueError):
        align_and_crop(np.zeros((32, 32, 3), np.uint8), canonical_landmarks(32), 8)


def test_warp_pixel_centre_convention():
    # a pure translation by whole pixels must move pixel values exactly
    raw = np.zeros((20, 20, 3), np.uint8)
    raw[5, 7] = 255
    A = np.array([[1.0, 0, 3], [0, 1.0, 2]])
    out = warp_affine(raw, A, 20)
    assert out[7, 10, 0] == 255
    assert out.sum() == 3 * 255


# -- datasets -----------------------------------------------------------------

def test_manifest_to_dataset_with_landmarks(tmp_path):
    write_synthetic_dataset(tmp_path, 4, 3, size=48, seed=2, with_landmarks=True,
                            partition_fn=lambda s, k: "fa" if k == 0 else "fb")
    man = load_manifest(tmp_path / "manifest.jsonl")
    ds = FaceDataset.from_manifest(man, 32)
    assert ds.pixels.shape == (12, 3, 32, 32)
    assert len(ds.partition("fa")) == 4
    assert ds.pixels.min() >= -1 and ds.pixels.max() <= 1


def test_manifest_without_landmarks_centre_crops(tmp_path):
    write_synthetic_dataset(tmp_path, 2, 2, size=32, seed=2)
    ds = as_dataset(load_manifest(tmp_path / "manifest.jsonl"), 32)
    ref = synthetic_faces(2, 2, 32, seed=2)
    # PNG round trip of uint8 images is lossless
    assert np.abs(ds.pixels.numpy() - ref.pixels.numpy()).max() < 1e-6


def test_synthetic_faces_deterministic_and_shared_subjects():
    a = synthetic_faces(3, 2, 32, seed=9)
    b = synthetic_faces(5, 2, 32, seed=9)
    assert np.array_equal(a.pixels.numpy(), b.pixels[:6].numpy())
    assert a.subjects == ["s0000", "s0001", "s0002"]


def test_synthetic_images_are_8bit_quantised():
    ds = synthetic_faces(2, 2, 32, seed=0)
    raw = (ds.pixels.numpy() + 1) * 127.5
    assert np.abs(raw - np.round(raw)).max() < 1e-4
