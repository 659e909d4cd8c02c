"""NbNet training: template/image streams, step-decay Adam, two-phase schedule."""
import json
import logging
import math
import time
from dataclasses import dataclass, asdict, field
from pathlib import Path

import torch

from .checkpoint import load_checkpoint, save_checkpoint, state_dict_hash, torch_generator
from .data.dataset import FaceDataset, as_dataset
from .errors import FaceReconError, ResolutionMismatchError, TrainingDivergedError
from .gan import GeneratorHandle, sample_z
from .losses import LossConfig, batch_loss

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    beta1: float = 0.5
    beta2: float = 0.999
    lr0: float = 2e-4
    lr_decay: float = 0.94
    decay_every: int = 5000
    phase1_batches: int = 300_000
    phase2_batches: int = 100_000
    seed: int = 0
    data_source: str = "generator"      # generator | raw_manifest
    reduction: str = "mean"
    checkpoint_every: int = 1000
    keep_last: int = 3
    reset_optimizer_phase2: bool = True

    def validate(self):
        problems = []
        for name in ("batch_size", "decay_every"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if self.phase1_batches < 0 or self.phase2_batches < 0:
            problems.append("phase batch counts must be non-negative")
        if self.phase1_batches + self.phase2_batches == 0:
            problems.append("at least one training phase must have batches")
        if self.data_source not in ("generator", "raw_manifest"):
            problems.append(f"unknown data_source {self.data_source!r}")
        if problems:
            raise FaceReconError("; ".join(problems))
        return self


def lr_at(batch_index, config):
    """Step decay: ``lr0 * lr_decay ** floor(batch_index / decay_every)``."""
    if batch_index < 0:
        raise ValueError("batch_index must be >= 0")
    return config.lr0 * config.lr_decay ** (batch_index // config.decay_every)


class TrainingStream:
    """Deterministic, random-access stream of ``(templates, images)`` batches.

    Batch ``b`` depends only on ``(seed, b)``, so a run resumed at batch ``b``
    sees exactly the data an uninterrupted run would.
    """

    def __init__(self, source, extractor, batch_size, seed):
        self.extractor = extractor
        self.batch_size = batch_size
        self.seed = seed
        if isinstance(source, GeneratorHandle):
            self.mode = "generator"
            self.generator = source
            if source.image_size != extractor.input_size:
                raise ResolutionMismatchError(
                    f"generator emits {source.image_size}px images, extractor takes {extractor.input_size}px")
        else:
            self.mode = "raw"
            self.generator = None
            if isinstance(source, (list, tuple)):
                parts = [as_dataset(s, extractor.input_size) for s in source]
                source = FaceDataset(torch.cat([p.pixels for p in parts]),
                                     sum((p.subject_ids for p in parts), []),
                                     sum((p.sample_ids for p in parts), []))
            self.dataset = as_dataset(source, extractor.input_size)
            if len(self.dataset) == 0:
                raise FaceReconError("raw training source is empty")
            self.dataset.check_size(extractor.input_size)
            self._templates = extractor.embed(self.dataset.pixels)
            self._perms = {}

    def _epoch_perm(self, epoch):
        if epoch not in self._perms:
            if len(self._perms) > 8:
                self._perms.clear()
            self._perms[epoch] = torch.randperm(len(self.dataset),
                                                generator=torch_generator("epoch", self.seed, epoch))
        return self._perms[epoch]

    def indices(self, b):
        """Dataset indices of raw-mode batch ``b`` (epochs shuffled without replacement)."""
        n, B = len(self.dataset), self.batch_size
        pos = torch.arange(b * B, (b + 1) * B)
        epochs = pos // n
        return torch.stack([self._epoch_perm(int(e))[int(p % n)] for e, p in zip(epochs, pos)])

    def batch(self, b):
        if self.mode == "generator":
            z = sample_z(self.batch_size, self.generator.z_dim, torch_generator("stream", self.seed, b))
            x = self.generator.generate(z)
            return self.extractor.embed(x), x
        idx = self.indices(b)
        return self._templates[idx], self.dataset.pixels[idx]

    def __iter__(self):
        b = 0
        while True:
            yield self.batch(b)
            b += 1

    def upstream_hashes(self):
        h = {"extractor": self.extractor.parameter_hash()}
        if self.generator is not None:
            h["generator"] = self.generator.parameter_hash()
        return h


def make_training_stream(source, extractor, batch_size, seed):
    return TrainingStream(source, extractor, batch_size, seed)


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def append(self, **rec):
        self.records.append(rec)

    def losses(self, phase=None):
        return [r["loss"] for r in self.records if "loss" in r and (phase is None or r["phase"] == phase)]

    def write(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for r in self.records:
                fh.write(json.dumps(r) + "\n")


def _make_optimizer(model, config):
    return torch.optim.Adam(model.parameters(), lr=config.lr0, betas=(config.beta1, config.beta2))


def _save_train_state(path, model, opt, next_batch, phase, config, loss_config, stream_offset):
    return save_checkpoint(path, "train-state", {
        "model": model.state_dict(), "optimizer": opt.state_dict(), "next_batch": next_batch,
        "phase": phase, "lr": lr_at(next_batch, config), "stream_offset": stream_offset,
        "config": asdict(config), "loss": asdict(loss_config), "spec": model.spec.to_dict()})


def train_nbnet(model, stream, loss, config, n_batches=None, feature_map=None, phase=1,
                stream_offset=0, checkpoint_dir=None, resume=None, optimizer=None, log_=None):
    """Minimise the empirical reconstruction loss with Adam and step-decay lr.

    ``n_batches`` defaults to ``config.phase1_batches``. Batch ``i`` of this run
    reads stream batch ``stream_offset + i`` and uses ``lr_at(i)``. With
    ``checkpoint_dir`` a train state is saved every ``config.checkpoint_every``
    batches (last ``keep_last`` kept, plus the best interval-mean loss).
    """
    config.validate()
    loss.validate(feature_map)
    n_batches = config.phase1_batches if n_batches is None else n_batches
    opt = optimizer or _make_optimizer(model, config)
    start = 0
    if resume is not None:
        _, state = load_checkpoint(resume, "train-state")
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        start, phase, stream_offset = state["next_batch"], state["phase"], state["stream_offset"]
    log_ = log_ if log_ is not None else TrainingLog()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    kept, last_ckpt, best = [], resume, math.inf
    interval = []
    model.train()
    for i in range(start, n_batches):
        t0 = time.perf_counter()
        lr = lr_at(i, config)
        for group in opt.param_groups:
            group["lr"] = lr
        y, x = stream.batch(stream_offset + i)
        out = model(y)
        value = batch_loss(x, out, loss, feature_map)
        if not math.isfinite(value.item()):
            raise TrainingDivergedError(f"non-finite loss at phase {phase} batch {i}", last_ckpt)
        opt.zero_grad()
        value.backward()
        opt.step()
        v = value.item()
        interval.append(v)
        log_.append(phase=phase, batch=i, loss=v, lr=lr, wall_ms=round(1000 * (time.perf_counter() - t0), 3))
        if i % 500 == 0:
            log.info("phase %d batch %d loss %.5f lr %.3g", phase, i, v, lr)
        if ckpt_dir is not None and config.checkpoint_every and (i + 1) % config.checkpoint_every == 0:
            path = ckpt_dir / f"phase{phase}_{i + 1:07d}.pt"
            last_ckpt = _save_train_state(path, model, opt, i + 1, phase, config, loss, stream_offset)
            kept.append(path)
            while len(kept) > config.keep_last:
                kept.pop(0).unlink(missing_ok=True)
            mean = sum(interval) / len(interval)
            if mean < best:
                best = mean
                _save_train_state(ckpt_dir / f"phase{phase}_best.pt", model, opt, i + 1, phase,
                                  config, loss, stream_offset)
            interval = []
    return model, log_


def two_phase_train(model, stream, config, feature_map=None, checkpoint_dir=None):
    """Pixel-loss (k=1) phase followed by a perceptual-loss refinement phase.

    Phase 2 starts from phase 1's final parameters with fresh optimiser moments
    and a restarted lr schedule; the handoff is recorded in the log.
    """
    config.validate()
    log_ = TrainingLog()
    log_.append(event="start", upstream=stream.upstream_hashes(), init_hash=state_dict_hash(model))
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    opt = _make_optimizer(model, config)
    if config.phase1_batches:
        train_nbnet(model, stream, LossConfig("pixel", 1.0, config.reduction), config,
                    n_batches=config.phase1_batches, phase=1, stream_offset=0,
                    checkpoint_dir=ckpt / "phase1" if ckpt else None, optimizer=opt, log_=log_)
    if config.phase2_batches:
        if feature_map is None:
            raise FaceReconError("phase 2 needs a perceptual feature map")
        log_.append(event="phase_boundary", handoff_hash=state_dict_hash(model),
                    optimizer_reset=config.reset_optimizer_phase2, schedule_reset=True)
        if config.reset_optimizer_phase2:
            opt = _make_optimizer(model, config)
        train_nbnet(model, stream, LossConfig("perceptual", 2.0, config.reduction, feature_map.feature_id),
                    config, n_batches=config.phase2_batches, feature_map=feature_map, phase=2,
                    stream_offset=config.phase1_batches,
                    checkpoint_dir=ckpt / "phase2" if ckpt else None, optimizer=opt, log_=log_)
    log_.append(event="end", upstream=stream.upstream_hashes(), final_hash=state_dict_hash(model))
    return model, log_
