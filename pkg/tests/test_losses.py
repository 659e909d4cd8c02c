import pytest
import torch
from hypothesis import given, settings, strategies as st

from facerecon.errors import DimensionMismatchError, FaceReconError
from facerecon.losses import (IdentityFeatureMap, LossConfig, PerceptualFeatureMap, batch_loss,
                              per_sample_loss, perceptual_loss, pixel_loss)


def test_pixel_loss_examples():
    assert pixel_loss(torch.tensor([1.0, 1.0]), torch.zeros(2), k=1) == 2.0
    assert pixel_loss(torch.tensor([3.0, 4.0]), torch.zeros(2), k=2).item() == pytest.approx(5.0)
    x = torch.randn(3, 4, 4)
    assert pixel_loss(x, x, k=1) == 0
    assert pixel_loss(x, x, k=3) == 0


def test_pixel_loss_errors():
    with pytest.raises(DimensionMismatchError):
        pixel_loss(torch.zeros(3), torch.zeros(4))
    with pytest.raises(FaceReconError):
        pixel_loss(torch.zeros(3), torch.zeros(3), k=0.5)


tensors = st.lists(st.floats(-2, 2, allow_nan=False), min_size=6, max_size=6).map(
    lambda v: torch.tensor(v, dtype=torch.float64))


@settings(max_examples=60)
@given(tensors, tensors, tensors, st.sampled_from([1.0, 1.5, 2.0, 3.0]))
def test_pixel_loss_is_metric(a, b, c, k):
    dab, dba = pixel_loss(a, b, k), pixel_loss(b, a, k)
    assert dab >= 0
    assert dab.item() == pytest.approx(dba.item(), abs=1e-12)
    assert dab <= pixel_loss(a, c, k) + pixel_loss(c, b, k) + 1e-9
    assert (dab == 0) == torch.equal(a, b)


def _conv_map():
    torch.manual_seed(0)
    return PerceptualFeatureMap(torch.nn.Sequential(torch.nn.Conv2d(3, 4, 3), torch.nn.ReLU()),
                                feature_id="tiny")


def test_perceptual_identity_and_symmetry():
    F = _conv_map()
    g = torch.Generator().manual_seed(2)
    for _ in range(10):
        a, b = torch.randn(3, 8, 8, generator=g), torch.randn(3, 8, 8, generator=g)
        assert perceptual_loss(a, a, F) == 0
        assert perceptual_loss(a, b, F).item() == pytest.approx(perceptual_loss(b, a, F).item(), rel=1e-6)


def test_perceptual_identity_map_equals_half_squared_l2():
    a, b = torch.randn(3, 5, 5, dtype=torch.float64), torch.randn(3, 5, 5, dtype=torch.float64)
    lhs = perceptual_loss(a, b, IdentityFeatureMap())
    assert lhs.item() == pytest.approx(0.5 * pixel_loss(a, b, 2).item() ** 2, rel=1e-12)


def test_perceptual_requires_map():
    with pytest.raises(FaceReconError):
        perceptual_loss(torch.zeros(3, 2, 2), torch.zeros(3, 2, 2), None)
    with pytest.raises(FaceReconError):
        LossConfig(kind="perceptual").validate()
    with pytest.raises(FaceReconError):
        LossConfig(k=0.5).validate()


def test_feature_map_frozen_and_stays_eval():
    F = _conv_map()
    F.train()
    assert not F.training
    assert all(not p.requires_grad for p in F.parameters())


@pytest.mark.parametrize("cfg", [LossConfig("pixel", 1, "sum"), LossConfig("pixel", 2, "sum"),
                                 LossConfig("perceptual", reduction="sum")])
def test_batch_loss_is_mean_of_pairs(cfg):
    F = _conv_map()
    x, x2 = torch.randn(2, 3, 6, 6), torch.randn(2, 3, 6, 6)
    if cfg.kind == "pixel":
        a, b = pixel_loss(x[0], x2[0], cfg.k), pixel_loss(x[1], x2[1], cfg.k)
    else:
        a, b = perceptual_loss(x[0], x2[0], F), perceptual_loss(x[1], x2[1], F)
    assert batch_loss(x, x2, cfg, F).item() == pytest.approx(((a + b) / 2).item(), rel=1e-5)
    assert batch_loss(x[:1], x2[:1], cfg, F).item() == pytest.approx(a.item(), rel=1e-5)
    assert batch_loss(x, x, cfg, F) == 0


def test_mean_reduction_is_mae():
    x, x2 = torch.randn(2, 3, 4, 4), torch.randn(2, 3, 4, 4)
    per = per_sample_loss(x, x2, LossConfig())
    assert torch.allclose(per, (x - x2).abs().mean(dim=(1, 2, 3)))


def test_empty_batch():
    with pytest.raises(FaceReconError):
        batch_loss(torch.zeros(0, 3, 2, 2), torch.zeros(0, 3, 2, 2), LossConfig())


@pytest.mark.parametrize("cfg", [LossConfig("pixel", 1), LossConfig("pixel", 2), LossConfig("perceptual")])
def test_loss_gradient_finite_differences(cfg):
    torch.manual_seed(3)
    F = PerceptualFeatureMap(torch.nn.Sequential(torch.nn.Conv2d(3, 2, 3), torch.nn.Tanh()).double())
    x = torch.randn(2, 3, 5, 5, dtype=torch.float64)
    x2 = torch.randn(2, 3, 5, 5, dtype=torch.float64, requires_grad=True)
    (g,) = torch.autograd.grad(batch_loss(x, x2, cfg, F), x2)
    eps = 1e-6
    with torch.no_grad():
        for idx in [(0, 0, 0, 0), (1, 2, 4, 4), (0, 1, 2, 3), (1, 0, 3, 1)]:
            xp, xm = x2.clone(), x2.clone()
            xp[idx] += eps
            xm[idx] -= eps
            fd = (batch_loss(x, xp, cfg, F) - batch_loss(x, xm, cfg, F)).item() / (2 * eps)
            assert fd == pytest.approx(g[idx].item(), rel=1e-3, abs=1e-9)


def test_perceptual_step_leaves_map_unchanged():
    F = _conv_map()
    before = [p.clone() for p in F.parameters()]
    net = torch.nn.Conv2d(3, 3, 1)
    opt = torch.optim.Adam(net.parameters(), lr=0.1)
    x = torch.randn(2, 3, 6, 6)
    batch_loss(net(x), x, LossConfig("perceptual"), F).backward()
    opt.step()
    assert all(torch.equal(a, b) for a, b in zip(before, F.parameters()))
