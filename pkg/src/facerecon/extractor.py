"""Black-box template extractors.

The attack may only *query* an extractor: images in, embeddings out. Handles
therefore never expose their network, parameters or gradients; all calls run
under ``torch.no_grad`` and return detached copies.
"""
import copy
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_checkpoint, save_checkpoint, state_dict_hash
from .data.dataset import as_dataset
from .errors import (DimensionMismatchError, ExtractorError, InsufficientIdentitiesError,
                     ResolutionMismatchError, TrainingDivergedError)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Template:
    vector: np.ndarray
    subject_id: str = ""
    sample_id: str = ""
    extractor_id: str = ""

    @property
    def dim(self):
        return int(self.vector.shape[0])


def similarity(a, b):
    """Cosine similarity of two templates, in [-1, 1]."""
    if isinstance(a, Template) and isinstance(b, Template) and a.extractor_id != b.extractor_id:
        raise DimensionMismatchError(
            f"templates come from different extractors ({a.extractor_id!r} vs {b.extractor_id!r})")
    va = np.asarray(a.vector if isinstance(a, Template) else a, dtype=np.float64)
    vb = np.asarray(b.vector if isinstance(b, Template) else b, dtype=np.float64)
    if va.shape != vb.shape:
        raise DimensionMismatchError(f"template dimensions differ: {va.shape} vs {vb.shape}")
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(va @ vb / (na * nb), -1.0, 1.0))


def cosine_matrix(a, b):
    """Pairwise cosine similarities between the rows of ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1, keepdims=True)
    nb = np.linalg.norm(b, axis=1, keepdims=True)
    if (na == 0).any() or (nb == 0).any():
        raise ValueError("cosine similarity is undefined for a zero vector")
    return np.clip((a / na) @ (b / nb).T, -1.0, 1.0)


class StandInNet(nn.Module):
    """Four conv stages, global average pooling, linear head, L2 normalisation."""

    def __init__(self, output_dim=128, width=32, input_size=32):
        super().__init__()
        chans = [3, width, width * 2, width * 4, width * 4]
        stages = []
        for i in range(4):
            stages.append(nn.Sequential(
                nn.Conv2d(chans[i], chans[i + 1], 3, padding=1, bias=False),
                nn.BatchNorm2d(chans[i + 1]),
                nn.ReLU(inplace=True),
                nn.Conv2d(chans[i + 1], chans[i + 1], 3, padding=1, bias=False),
                nn.BatchNorm2d(chans[i + 1]),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2) if i < 3 else nn.Identity(),
            ))
        self.stages = nn.ModuleList(stages)
        self.head = nn.Linear(chans[-1], output_dim)
        self.output_dim = output_dim
        self.input_size = input_size

    def features(self, x, upto):
        for stage in self.stages[:upto]:
            x = stage(x)
        return x

    def forward(self, x):
        x = self.features(x, len(self.stages))
        x = x.mean(dim=(2, 3))
        return F.normalize(self.head(x), dim=1)


class ExtractorHandle:
    """Query-only wrapper around a frozen embedding network."""

    def __init__(self, net, extractor_id, input_size, unit_norm=True, meta=None):
        if net.output_dim < 2:
            raise ExtractorError("output_dim must be >= 2")
        self._net = net.eval()
        for p in self._net.parameters():
            p.requires_grad_(False)
        self.extractor_id = extractor_id
        self.output_dim = int(net.output_dim)
        self.input_size = int(input_size)
        self.unit_norm = unit_norm
        self.meta = dict(meta or {})

    def __repr__(self):
        return (f"ExtractorHandle(id={self.extractor_id!r}, output_dim={self.output_dim}, "
                f"input_size={self.input_size}, unit_norm={self.unit_norm})")

    def _check(self, pixels):
        if self._net is None:
            raise ExtractorError("extractor is not initialised")
        if pixels.shape[-1] != self.input_size or pixels.shape[-2] != self.input_size:
            raise ResolutionMismatchError(
                f"extractor {self.extractor_id!r} takes {self.input_size}px images, "
                f"got {tuple(pixels.shape[-2:])}")

    @torch.no_grad()
    def embed(self, pixels, batch_size=256):
        """Embed a ``(n, 3, s, s)`` tensor; returns a detached float32 tensor."""
        pixels = torch.as_tensor(pixels, dtype=torch.float32)
        self._check(pixels)
        out = [self._net(pixels[i:i + batch_size]) for i in range(0, len(pixels), batch_size)]
        return torch.cat(out).detach().clone()

    def extract(self, image):
        """Template of one FaceImage."""
        pixels = torch.as_tensor(np.asarray(image.pixels))[None]
        vec = self.embed(pixels)[0].numpy().astype(np.float64)
        return Template(vec, image.subject_id, image.sample_id, self.extractor_id)

    def extract_dataset(self, dataset):
        vecs = self.embed(dataset.pixels).numpy().astype(np.float64)
        return [Template(v, s, k, self.extractor_id)
                for v, s, k in zip(vecs, dataset.subject_ids, dataset.sample_ids)]

    def parameter_hash(self):
        return state_dict_hash(self._net)

    def perceptual_feature_map(self, stage=2):
        """Frozen copy of the first ``stage`` conv stages, usable as a perceptual feature map.

        The copy is independent of this handle: gradients through it reach only
        its input, never the extractor.
        """
        from .losses import PerceptualFeatureMap
        trunk = copy.deepcopy(self._net)
        stages = nn.Sequential(*list(trunk.stages)[:stage]).eval()
        return PerceptualFeatureMap(stages, feature_id=f"{self.extractor_id}:stage{stage}")

    def save(self, path):
        cfg = {"output_dim": self.output_dim, "width": self._net.stages[0][0].out_channels,
               "input_size": self.input_size}
        return save_checkpoint(path, "extractor", {"state": self._net.state_dict(), "config": cfg,
                                                   "meta": self.meta},
                               extractor_id=self.extractor_id, output_dim=self.output_dim,
                               input_size=self.input_size, unit_norm=self.unit_norm)

    @classmethod
    def load(cls, path):
        header, payload = load_checkpoint(path, "extractor")
        cfg = payload["config"]
        net = StandInNet(cfg["output_dim"], cfg["width"], cfg["input_size"])
        net.load_state_dict(payload["state"])
        return cls(net, header["extractor_id"], header["input_size"], header["unit_norm"], payload["meta"])


class EmbeddingFileExtractor:
    """Extractor backed by precomputed embeddings keyed by (subject_id, sample_id).

    Lets templates produced by an external system (e.g. a FaceNet release) drive
    the evaluation. Lookups need identity metadata, so only ``extract`` on
    labelled images is supported; unseen images raise ``ExtractorError``.
    """

    def __init__(self, table, extractor_id, input_size, unit_norm=None):
        dims = {len(v) for v in table.values()}
        if len(dims) != 1:
            raise DimensionMismatchError(f"embedding file mixes dimensions {sorted(dims)}")
        self._table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.output_dim = dims.pop()
        self.extractor_id = extractor_id
        self.input_size = input_size
        norms = np.array([np.linalg.norm(v) for v in self._table.values()])
        self.unit_norm = bool(np.all(np.abs(norms - 1) < 1e-4)) if unit_norm is None else unit_norm

    @classmethod
    def from_jsonl(cls, path, extractor_id=None, input_size=160):
        table = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                try:
                    table[(str(obj["subject_id"]), str(obj["sample_id"]))] = obj["vector"]
                except KeyError as exc:
                    raise ExtractorError(f"{path}:{lineno}: missing field {exc}") from None
        return cls(table, extractor_id or Path(path).stem, input_size)

    def extract(self, image):
        key = (image.subject_id, image.sample_id)
        if key not in self._table:
            raise ExtractorError(f"no precomputed embedding for {key}")
        return Template(self._table[key].copy(), key[0], key[1], self.extractor_id)

    def embed(self, pixels, batch_size=256):
        raise ExtractorError("embedding-file extractors cannot embed new images")


def write_embeddings(templates, path):
    with open(path, "w", encoding="utf-8") as fh:
        for t in templates:
            fh.write(json.dumps({"subject_id": t.subject_id, "sample_id": t.sample_id,
                                 "vector": [float(v) for v in t.vector]}) + "\n")


@dataclass
class ExtractorConfig:
    output_dim: int = 128
    width: int = 32
    input_size: int = 32
    steps: int = 1500
    subjects_per_batch: int = 16
    samples_per_subject: int = 4
    lr: float = 1e-3
    margin: float = 0.3
    augment: bool = True
    seed: int = 0
    extractor_id: str = "standin"


def _batch_hard_triplet(emb, labels, margin):
    cos = emb @ emb.T
    dist = 1.0 - cos
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos = dist.masked_fill(~same | eye, -1.0).max(dim=1).values
    neg = dist.masked_fill(same, 4.0).min(dim=1).values
    return F.relu(pos - neg + margin).mean()


def _augment(x, gen):
    # random translation by up to 2px with reflection padding plus brightness jitter
    n = len(x)
    pad = F.pad(x, (2, 2, 2, 2), mode="replicate")
    dx = torch.randint(0, 5, (n,), generator=gen)
    dy = torch.randint(0, 5, (n,), generator=gen)
    s = x.shape[-1]
    out = torch.stack([pad[i, :, dy[i]:dy[i] + s, dx[i]:dx[i] + s] for i in range(n)])
    gain = 1.0 + 0.1 * (torch.rand(n, 1, 1, 1, generator=gen) * 2 - 1)
    return ((out + 1) * gain - 1).clamp(-1, 1)


def train_stand_in_extractor(train_set, config=None, checkpoint=None):
    """Train the desk-scale embedding network with a batch-hard triplet loss."""
    config = config or ExtractorConfig()
    data = as_dataset(train_set, config.input_size)
    by_subject = {}
    for i, s in enumerate(data.subject_ids):
        by_subject.setdefault(s, []).append(i)
    eligible = sorted(s for s, idx in by_subject.items() if len(idx) >= 2)
    if len(eligible) < 2:
        raise InsufficientIdentitiesError(
            f"need >= 2 subjects with >= 2 samples each, found {len(eligible)}")

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    net = StandInNet(config.output_dim, config.width, config.input_size)
    opt = torch.optim.Adam(net.parameters(), lr=config.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.steps)
    label_of = {s: i for i, s in enumerate(eligible)}
    p = min(config.subjects_per_batch, len(eligible))
    net.train()
    for step in range(config.steps):
        chosen = torch.randperm(len(eligible), generator=gen)[:p].tolist()
        idx, labels = [], []
        for c in chosen:
            pool = by_subject[eligible[c]]
            pick = torch.randint(0, len(pool), (config.samples_per_subject,), generator=gen).tolist()
            idx += [pool[j] for j in pick]
            labels += [c] * config.samples_per_subject
        x = data.pixels[idx]
        if config.augment:
            x = _augment(x, gen)
        loss = _batch_hard_triplet(net(x), torch.tensor(labels), config.margin)
        if not math.isfinite(loss.item()):
            raise TrainingDivergedError(f"extractor loss became non-finite at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if step % 250 == 0:
            log.info("extractor step %d loss %.4f", step, loss.item())
    handle = ExtractorHandle(net, config.extractor_id, config.input_size, unit_norm=True,
                             meta={"objective": "batch-hard triplet (cosine distance)",
                                   "margin": config.margin, "steps": config.steps,
                                   "train_subjects": len(eligible), "seed": config.seed})
    if checkpoint is not None:
        handle.save(checkpoint)
    return handle
