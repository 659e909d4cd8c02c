import json

import numpy as np
import pytest
import torch

from facerecon.data import synthetic_faces
from facerecon.errors import DimensionMismatchError, FaceReconError
from facerecon.gan import (Discriminator, GanConfig, Generator, GeneratorHandle, generate, has_batchnorm,
                           sample_z, soft_labels, train_gan)


def test_no_batchnorm_anywhere():
    for size in (32, 160):
        assert not has_batchnorm(Generator(image_size=size))
        assert not has_batchnorm(Discriminator(image_size=size))
    assert any(isinstance(m, torch.nn.SELU) for m in Generator().modules())


def test_soft_label_ranges():
    r, f = soft_labels(10000, "real", 0), soft_labels(10000, "fake", 0)
    assert r.min() >= 0.7 and r.max() <= 1.2
    assert f.min() >= 0.0 and f.max() <= 0.3
    assert torch.equal(soft_labels(5, "real", 3), soft_labels(5, "real", 3))
    with pytest.raises(ValueError):
        soft_labels(0, "real", 0)
    with pytest.raises(ValueError):
        soft_labels(3, "other", 0)


def test_sample_z():
    assert torch.equal(sample_z(3, 100, 7), sample_z(3, 100, 7))
    z = sample_z(100_000, 4, 11)
    assert z.min() >= -1 and z.max() <= 1
    assert z.mean(dim=0).abs().max() < 0.02
    with pytest.raises(ValueError):
        sample_z(0, 100, 0)


def test_config_validation():
    with pytest.raises(FaceReconError):
        GanConfig(real_label_range=(0.2, 1.0)).validate()
    with pytest.raises(FaceReconError):
        GanConfig(g_lr=1e-5).validate()
    with pytest.raises(FaceReconError):
        GanConfig(image_size=30).validate()


def test_generate_shape_and_determinism():
    torch.manual_seed(0)
    h = GeneratorHandle(Generator(), GanConfig())
    z = sample_z(64, 100, 0)
    a, b = generate(h, z), generate(h, z)
    assert a.shape == (64, 3, 32, 32)
    assert torch.equal(a, b)
    assert a.min() >= -1 and a.max() <= 1
    with pytest.raises(DimensionMismatchError):
        generate(h, torch.zeros(2, 50))


def test_empty_dataset():
    ds = synthetic_faces(2, 2, 32, seed=0)
    with pytest.raises(FaceReconError):
        train_gan(ds.subset([]), GanConfig(iterations=1))


@pytest.fixture(scope="module")
def smoke_gan(tmp_path_factory):
    out = tmp_path_factory.mktemp("gan")
    ds = synthetic_faces(50, 10, 32, seed=21)
    h = train_gan(ds, GanConfig(iterations=200, checkpoint_every=100, seed=4), out_dir=out)
    return h, out


def test_smoke_training(smoke_gan):
    h, out = smoke_gan
    rows = [json.loads(l) for l in (out / "gan_log.jsonl").read_text().splitlines()]
    assert [r["iter"] for r in rows] == list(range(200))
    assert all(np.isfinite(r["d_loss"]) and np.isfinite(r["g_loss"]) for r in rows)
    assert sum(r["d_samples"] for r in rows) == 2 * sum(r["g_samples"] for r in rows)
    x = generate(h, sample_z(8, 100, 99)).flatten(1)
    d = torch.cdist(x, x)
    assert (d[~torch.eye(8, dtype=bool)] > 0).all()
    assert x.min() >= -1 and x.max() <= 1


def test_generator_continuity(smoke_gan):
    h, _ = smoke_gan
    z = sample_z(16, 100, 5)
    step = 0.01 * (sample_z(16, 100, 6))
    near = (generate(h, z) - generate(h, (z + step).clamp(-1, 1))).flatten(1).norm(dim=1)
    far = (generate(h, z) - generate(h, sample_z(16, 100, 7))).flatten(1).norm(dim=1)
    assert (near < far).all()


def test_handle_roundtrip(smoke_gan, tmp_path):
    h, out = smoke_gan
    h2 = GeneratorHandle.load(out / "generator.pt")
    z = sample_z(4, 100, 1)
    assert torch.equal(h.generate(z), h2.generate(z))
    assert h2.parameter_hash() == h.parameter_hash()


def test_resume_continues(tmp_path):
    ds = synthetic_faces(4, 4, 32, seed=2)
    cfg = GanConfig(iterations=6, checkpoint_every=3, batch_size=8, seed=1)
    full = train_gan(ds, cfg, out_dir=tmp_path / "full")
    part = train_gan(ds, GanConfig(**{**cfg.__dict__, "iterations": 3}), out_dir=tmp_path / "part")
    resumed = train_gan(ds, cfg, out_dir=tmp_path / "part", resume=tmp_path / "part" / "gan_state.pt")
    assert part.parameter_hash() != full.parameter_hash()
    assert resumed.parameter_hash() == full.parameter_hash()
    iters = [json.loads(l)["iter"] for l in (tmp_path / "part" / "gan_log.jsonl").read_text().splitlines()]
    assert iters == list(range(6))
