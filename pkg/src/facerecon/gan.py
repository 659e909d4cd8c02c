"""Revised DCGAN face generator used to augment NbNet training data.

Changes from the DCGAN baseline: SELU activations and no batch normalisation
anywhere, soft labels (real ~ U[0.7, 1.2], generated ~ U[0, 0.3]), and a
generator learning rate above the discriminator's to offset the
discriminator seeing two batches per iteration.
"""
import json
import logging
import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint, torch_generator
from .data.dataset import as_dataset
from .errors import DimensionMismatchError, FaceReconError, TrainingDivergedError

log = logging.getLogger(__name__)


@dataclass
class GanConfig:
    z_dim: int = 100
    image_size: int = 32
    g_lr: float = 2e-4
    d_lr: float = 5e-5
    beta1: float = 0.5
    beta2: float = 0.999
    real_label_range: tuple = (0.7, 1.2)
    fake_label_range: tuple = (0.0, 0.3)
    batch_size: int = 64
    iterations: int = 2000
    base_channels: int = 16
    d_base_channels: int = 32
    kernel: int = 4
    checkpoint_every: int = 500
    seed: int = 0

    def validate(self):
        (rl, rh), (fl, fh) = self.real_label_range, self.fake_label_range
        if not (rl <= rh and fl <= fh):
            raise FaceReconError("label ranges must be ordered (low, high)")
        if not (fh < rl or rh < fl):
            raise FaceReconError("real and fake label ranges must be disjoint")
        if not self.g_lr > self.d_lr:
            raise FaceReconError("generator learning rate must exceed the discriminator's")
        if self.z_dim < 1 or self.batch_size < 1 or self.iterations < 0:
            raise FaceReconError("z_dim, batch_size must be positive and iterations non-negative")
        _geometry(self.image_size)
        return self


def _geometry(size):
    """(number of 2x stages, base size) with size = base * 2**(n - 1), base in {4, 5}."""
    base, n = size, 1
    while base > 5 and base % 2 == 0:
        base //= 2
        n += 1
    if base not in (4, 5):
        raise FaceReconError(f"unsupported image size {size}; need 4*2^k or 5*2^k")
    return n, base


def sample_z(n, z_dim, seed):
    """``n`` i.i.d. vectors uniform on [-1, 1]^z_dim; deterministic in ``seed``."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    g = seed if isinstance(seed, torch.Generator) else torch_generator("z", seed)
    return torch.rand(n, z_dim, generator=g) * 2.0 - 1.0


def soft_labels(n, kind, seed, config=None):
    """Uniform soft targets: real in [0.7, 1.2], fake in [0, 0.3] (by default)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    config = config or GanConfig()
    if kind == "real":
        lo, hi = config.real_label_range
    elif kind == "fake":
        lo, hi = config.fake_label_range
    else:
        raise ValueError(f"kind must be 'real' or 'fake', got {kind!r}")
    g = seed if isinstance(seed, torch.Generator) else torch_generator("labels", kind, seed)
    return lo + (hi - lo) * torch.rand(n, generator=g)


def _lecun_init(module):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, nonlinearity="linear")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


class Generator(nn.Module):
    """z -> image, de-convolution geometry mirroring the D-CNN with SELU."""

    def __init__(self, z_dim=100, image_size=32, base_channels=16, kernel=4):
        super().__init__()
        n, base = _geometry(image_size)
        chans = [base_channels * 2 ** (n - 1 - i) for i in range(n)]
        pad, opad = (kernel - 1) // 2, (kernel - 2) % 2  # size-doubling for k = 3 or 4
        layers, cin = [], z_dim
        for i, c in enumerate(chans):
            if i == 0:
                layers.append(nn.ConvTranspose2d(cin, c, base, 1, 0))
            else:
                layers.append(nn.ConvTranspose2d(cin, c, kernel, 2, pad, output_padding=opad))
            layers.append(nn.SELU())
            cin = c
        layers += [nn.Conv2d(cin, 3, 3, 1, 1), nn.Tanh()]
        self.net = nn.Sequential(*layers)
        self.z_dim = z_dim
        self.image_size = image_size
        _lecun_init(self)

    def forward(self, z):
        return self.net(z[:, :, None, None])


class Discriminator(nn.Module):
    """image -> real/fake logit; strided convolutions with SELU."""

    def __init__(self, image_size=32, base_channels=32, kernel=4):
        super().__init__()
        n, base = _geometry(image_size)
        chans = [base_channels * 2 ** i for i in range(n)]
        layers, cin = [], 3
        for c in chans[:-1]:
            layers += [nn.Conv2d(cin, c, kernel, 2, (kernel - 1) // 2), nn.SELU()]
            cin = c
        layers += [nn.Conv2d(cin, chans[-1], base, 1, 0), nn.SELU(), nn.Flatten(),
                   nn.Linear(chans[-1], 1)]
        self.net = nn.Sequential(*layers)
        _lecun_init(self)

    def forward(self, x):
        return self.net(x)[:, 0]


class GeneratorHandle:
    """Frozen generator r(z)."""

    def __init__(self, net, config):
        self._net = net.eval()
        for p in self._net.parameters():
            p.requires_grad_(False)
        self.config = config
        self.z_dim = net.z_dim
        self.image_size = net.image_size

    @torch.no_grad()
    def generate(self, z, batch_size=256):
        z = torch.as_tensor(z, dtype=torch.float32)
        if z.dim() != 2 or z.shape[1] != self.z_dim:
            raise DimensionMismatchError(f"expected z of shape (n, {self.z_dim}), got {tuple(z.shape)}")
        return torch.cat([self._net(z[i:i + batch_size]) for i in range(0, len(z), batch_size)])

    def parameter_hash(self):
        from .checkpoint import state_dict_hash
        return state_dict_hash(self._net)

    def save(self, path):
        return save_checkpoint(path, "generator", {"state": self._net.state_dict(),
                                                   "config": asdict(self.config)},
                               z_dim=self.z_dim, image_size=self.image_size)

    @classmethod
    def load(cls, path):
        header, payload = load_checkpoint(path, "generator")
        config = GanConfig(**payload["config"])
        net = Generator(config.z_dim, config.image_size, config.base_channels, config.kernel)
        net.load_state_dict(payload["state"])
        return cls(net, config)


def generate(handle, z):
    return handle.generate(z)


def has_batchnorm(module):
    return any(isinstance(m, nn.modules.batchnorm._BatchNorm) for m in module.modules())


def _save_state(path, it, G, D, opt_g, opt_d, config):
    return save_checkpoint(path, "gan-train", {
        "iteration": it, "G": G.state_dict(), "D": D.state_dict(),
        "opt_g": opt_g.state_dict(), "opt_d": opt_d.state_dict(), "config": asdict(config)})


def train_gan(dataset, config=None, out_dir=None, resume=None):
    """Adversarial training with the soft-label, 2:1 discriminator update discipline.

    Per iteration the discriminator takes one step on a real batch (soft real
    labels) plus a generated batch (soft fake labels); the generator takes one
    step on one fresh batch. With ``out_dir`` a JSON Lines log
    ``{iter, g_loss, d_loss, d_samples, g_samples}`` and periodic checkpoints are
    written there; ``resume`` continues from such a checkpoint.
    """
    config = (config or GanConfig()).validate()
    data = as_dataset(dataset, config.image_size)
    if len(data) == 0:
        raise FaceReconError("GAN training needs a non-empty dataset")

    torch.manual_seed(config.seed)
    G = Generator(config.z_dim, config.image_size, config.base_channels, config.kernel)
    D = Discriminator(config.image_size, config.d_base_channels, config.kernel)
    betas = (config.beta1, config.beta2)
    opt_g = torch.optim.Adam(G.parameters(), lr=config.g_lr, betas=betas)
    opt_d = torch.optim.Adam(D.parameters(), lr=config.d_lr, betas=betas)
    start = 0
    if resume is not None:
        _, state = load_checkpoint(resume, "gan-train")
        G.load_state_dict(state["G"])
        D.load_state_dict(state["D"])
        opt_g.load_state_dict(state["opt_g"])
        opt_d.load_state_dict(state["opt_d"])
        start = state["iteration"]

    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    last_ckpt = resume
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "gan_log.jsonl", "a" if resume else "w", encoding="utf-8")
    try:
        B = config.batch_size
        for it in range(start, config.iterations):
            g = torch_generator("gan", config.seed, it)
            real = data.pixels[torch.randint(0, len(data), (B,), generator=g)]
            fake = G(sample_z(B, config.z_dim, g))
            d_loss = (F.binary_cross_entropy_with_logits(D(real), soft_labels(B, "real", g, config))
                      + F.binary_cross_entropy_with_logits(D(fake.detach()), soft_labels(B, "fake", g, config)))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            fake = G(sample_z(B, config.z_dim, g))
            g_loss = F.binary_cross_entropy_with_logits(D(fake), torch.ones(B))
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            gl, dl = g_loss.item(), d_loss.item()
            if not (math.isfinite(gl) and math.isfinite(dl)):
                raise TrainingDivergedError(f"GAN loss non-finite at iteration {it}", last_ckpt)
            if log_fh:
                log_fh.write(json.dumps({"iter": it, "g_loss": gl, "d_loss": dl,
                                         "d_samples": 2 * B, "g_samples": B}) + "\n")
            if it % 200 == 0:
                log.info("gan iter %d d_loss %.4f g_loss %.4f", it, dl, gl)
            if out_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
                last_ckpt = _save_state(out_dir / "gan_state.pt", it + 1, G, D, opt_g, opt_d, config)
    finally:
        if log_fh:
            log_fh.close()
    if out_dir is not None:
        _save_state(out_dir / "gan_state.pt", config.iterations, G, D, opt_g, opt_d, config)
    handle = GeneratorHandle(G, config)
    if out_dir is not None:
        handle.save(out_dir / "generator.pt")
    return handle
