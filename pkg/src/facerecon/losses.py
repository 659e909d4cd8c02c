"""Reconstruction losses: Minkowski pixel distance and perceptual feature distance."""
from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import DimensionMismatchError, FaceReconError


class PerceptualFeatureMap(nn.Module):
    """A fixed feature function F(x). Parameters are frozen at construction."""

    def __init__(self, net, feature_id="", output_shape=None):
        super().__init__()
        self.net = net.eval()
        for p in self.net.parameters():
            p.requires_grad_(False)
        self.feature_id = feature_id
        self.output_shape = output_shape

    def train(self, mode=True):
        # stays in eval mode: batch-norm statistics must not drift
        return super().train(False)

    def forward(self, x):
        return self.net(x)


class IdentityFeatureMap(PerceptualFeatureMap):
    def __init__(self):
        super().__init__(nn.Identity(), feature_id="identity")


@dataclass
class LossConfig:
    kind: str = "pixel"          # pixel | perceptual
    k: float = 1.0               # Minkowski order
    reduction: str = "mean"      # mean: per-element average; sum: the raw norm
    feature_id: str = ""

    def validate(self, feature_map=None):
        if self.kind not in ("pixel", "perceptual"):
            raise FaceReconError(f"unknown loss kind {self.kind!r}")
        if self.k < 1:
            raise FaceReconError(f"Minkowski order must be >= 1, got {self.k}")
        if self.reduction not in ("mean", "sum"):
            raise FaceReconError(f"unknown reduction {self.reduction!r}")
        if self.kind == "perceptual" and feature_map is None:
            raise FaceReconError("perceptual loss needs a registered feature map")
        return self


def _check_shapes(x, x2):
    if x.shape != x2.shape:
        raise DimensionMismatchError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x2.shape)}")


def pixel_loss(x, x2, k=1.0):
    """(sum_m |x_m - x'_m|^k)^(1/k) over every element of one image."""
    x, x2 = torch.as_tensor(x), torch.as_tensor(x2)
    _check_shapes(x, x2)
    if k < 1:
        raise FaceReconError(f"Minkowski order must be >= 1, got {k}")
    diff = (x - x2).abs()
    if k == 1:
        return diff.sum()
    return diff.pow(k).sum().pow(1.0 / k)


def perceptual_loss(x, x2, feature_map):
    """0.5 * ||F(x) - F(x')||_2^2 for one image (or one batch treated as a whole)."""
    if feature_map is None:
        raise FaceReconError("perceptual loss needs a feature map")
    x, x2 = torch.as_tensor(x), torch.as_tensor(x2)
    _check_shapes(x, x2)
    squeeze = x.dim() == 3
    if squeeze:
        x, x2 = x[None], x2[None]
    d = feature_map(x) - feature_map(x2)
    return 0.5 * d.pow(2).sum()


def per_sample_loss(x, x2, config, feature_map=None):
    """Loss of each pair in a batch ``(n, c, h, w)``; returns shape ``(n,)``.

    ``reduction="mean"`` divides each per-pair quantity by its element count
    (MAE for k=1) so the value does not scale with resolution.
    """
    _check_shapes(x, x2)
    n = x.shape[0]
    if config.kind == "pixel":
        diff = (x - x2).abs().reshape(n, -1)
        if config.reduction == "mean":
            return diff.pow(config.k).mean(dim=1).pow(1.0 / config.k) if config.k != 1 else diff.mean(dim=1)
        return diff.pow(config.k).sum(dim=1).pow(1.0 / config.k) if config.k != 1 else diff.sum(dim=1)
    if feature_map is None:
        raise FaceReconError("perceptual loss needs a feature map")
    d = (feature_map(x) - feature_map(x2)).reshape(n, -1)
    sq = d.pow(2)
    return 0.5 * (sq.mean(dim=1) if config.reduction == "mean" else sq.sum(dim=1))


def batch_loss(x, x2, config, feature_map=None):
    """Mean per-pair loss over a non-empty batch."""
    if len(x) == 0:
        raise FaceReconError("batch is empty")
    return per_sample_loss(x, x2, config, feature_map).mean()
