import copy

import numpy as np
import pytest
import torch

from facerecon.checkpoint import state_dict_hash
from facerecon.data import synthetic_faces
from facerecon.errors import FaceReconError, ResolutionMismatchError
from facerecon.gan import GanConfig, Generator, GeneratorHandle
from facerecon.losses import LossConfig
from facerecon.nbnet import build_network, desk_spec
from facerecon.trainer import TrainConfig, lr_at, make_training_stream, train_nbnet, two_phase_train


def test_lr_schedule_table():
    cfg = TrainConfig()
    assert lr_at(0, cfg) == 2e-4
    assert lr_at(4999, cfg) == 2e-4
    assert lr_at(5000, cfg) == pytest.approx(2e-4 * 0.94)
    assert lr_at(10000, cfg) == pytest.approx(1.7672e-4, rel=1e-12)
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_config_validation():
    with pytest.raises(FaceReconError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(FaceReconError):
        TrainConfig(phase1_batches=0, phase2_batches=0).validate()
    with pytest.raises(FaceReconError):
        TrainConfig(data_source="web").validate()


@pytest.fixture(scope="module")
def generator_handle():
    torch.manual_seed(0)
    return GeneratorHandle(Generator(), GanConfig())


def test_raw_epoch_contract(quick_extractor):
    ds = synthetic_faces(5, 2, 32, seed=3)
    stream = make_training_stream(ds, quick_extractor, 4, seed=0)
    idx = torch.cat([stream.indices(b) for b in range(8)])[:30]
    counts = np.bincount(idx.numpy(), minlength=10)
    assert counts.min() >= 2
    for e in range(3):
        assert sorted(idx[10 * e:10 * e + 10].tolist()) == list(range(10))
    y, x = stream.batch(0)
    assert torch.equal(x, ds.pixels[stream.indices(0)])
    assert torch.allclose(y, quick_extractor.embed(x))


def test_generator_stream_deterministic(quick_extractor, generator_handle):
    a = make_training_stream(generator_handle, quick_extractor, 8, seed=1).batch(0)
    b = make_training_stream(generator_handle, quick_extractor, 8, seed=1).batch(0)
    c = make_training_stream(generator_handle, quick_extractor, 8, seed=2).batch(0)
    assert torch.equal(a[1], b[1]) and torch.equal(a[0], b[0])
    assert not torch.equal(a[1], c[1])
    assert a[1].shape == (8, 3, 32, 32) and a[0].shape == (8, 128)


def test_stream_resolution_mismatch(quick_extractor):
    with pytest.raises(ResolutionMismatchError):
        make_training_stream(GeneratorHandle(Generator(image_size=16), GanConfig(image_size=16)),
                             quick_extractor, 4, 0)
    with pytest.raises(ResolutionMismatchError):
        make_training_stream(synthetic_faces(2, 2, 24, seed=0), quick_extractor, 4, 0)


def _small(p1=30, p2=10, seed=0, **kw):
    return TrainConfig(batch_size=8, phase1_batches=p1, phase2_batches=p2, seed=seed, checkpoint_every=10, **kw)


@pytest.fixture(scope="module")
def raw_stream(quick_extractor):
    return make_training_stream(synthetic_faces(6, 4, 32, seed=8), quick_extractor, 8, seed=0)


def test_logged_lr_matches_schedule(raw_stream):
    cfg = _small(p1=12, p2=0, decay_every=5)
    _, log = train_nbnet(build_network(desk_spec("dcnn"), seed=0), raw_stream, LossConfig(), cfg)
    assert [r["lr"] for r in log.records] == [lr_at(r["batch"], cfg) for r in log.records]
    assert {r["lr"] for r in log.records} == {2e-4, 2e-4 * 0.94, 2e-4 * 0.94 ** 2}


def test_resume_reproduces_trajectory(tmp_path, raw_stream):
    cfg = _small(p1=20, p2=0)
    _, full = train_nbnet(build_network(desk_spec("nbnet_b"), seed=1), raw_stream, LossConfig(), cfg,
                          checkpoint_dir=tmp_path)
    model = build_network(desk_spec("nbnet_b"), seed=99)
    _, resumed = train_nbnet(model, raw_stream, LossConfig(), cfg,
                             resume=tmp_path / "phase1_0000010.pt")
    assert resumed.losses() == full.losses()[10:]


def test_two_phase_handoff_and_frozen_upstream(quick_extractor, generator_handle):
    stream = make_training_stream(generator_handle, quick_extractor, 8, seed=3)
    ext_hash, gen_hash = quick_extractor.parameter_hash(), generator_handle.parameter_hash()
    fm = quick_extractor.perceptual_feature_map()
    only1, _ = two_phase_train(build_network(desk_spec("nbnet_a"), seed=2), stream, _small(p2=0))
    both, log = two_phase_train(build_network(desk_spec("nbnet_a"), seed=2), stream, _small(),
                                feature_map=fm)
    boundary = next(r for r in log.records if r.get("event") == "phase_boundary")
    assert boundary["handoff_hash"] == state_dict_hash(only1)
    assert boundary["optimizer_reset"] and boundary["schedule_reset"]
    assert [r["lr"] for r in log.records if r.get("phase") == 2][0] == 2e-4
    assert state_dict_hash(both) != state_dict_hash(only1)
    start = next(r for r in log.records if r.get("event") == "start")
    end = next(r for r in log.records if r.get("event") == "end")
    assert start["upstream"] == end["upstream"] == {"extractor": ext_hash, "generator": gen_hash}
    assert quick_extractor.parameter_hash() == ext_hash


def test_phase2_zero_equals_phase1(raw_stream):
    a, _ = two_phase_train(build_network(desk_spec("dcnn"), seed=5), raw_stream, _small(p2=0))
    b, _ = train_nbnet(build_network(desk_spec("dcnn"), seed=5), raw_stream, LossConfig(), _small(p2=0))
    assert state_dict_hash(a) == state_dict_hash(b)


def test_phase2_needs_feature_map(raw_stream):
    with pytest.raises(FaceReconError):
        two_phase_train(build_network(desk_spec("dcnn"), seed=5), raw_stream, _small(p1=1, p2=1))


def test_determinism_and_seed_dependence(raw_stream):
    runs = [train_nbnet(build_network(desk_spec("dcnn"), seed=s), raw_stream, LossConfig(), _small(p2=0))
            for s in (7, 7, 8)]
    assert runs[0][1].losses() == runs[1][1].losses()
    assert state_dict_hash(runs[0][0]) == state_dict_hash(runs[1][0])
    assert state_dict_hash(runs[0][0]) != state_dict_hash(runs[2][0])


def test_non_finite_loss_aborts(raw_stream):
    from facerecon.errors import TrainingDivergedError
    model = build_network(desk_spec("dcnn"), seed=0)
    with torch.no_grad():
        model.final[0].weight.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError):
        train_nbnet(model, raw_stream, LossConfig(), _small(p2=0))


def test_loss_decreases(raw_stream):
    _, log = train_nbnet(build_network(desk_spec("nbnet_b"), seed=0), raw_stream, LossConfig(),
                         _small(p1=400, p2=0))
    losses = log.losses()
    assert np.mean(losses[-100:]) < np.mean(losses[:100])
