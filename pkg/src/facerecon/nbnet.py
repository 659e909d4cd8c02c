"""D-CNN, NbNet-A and NbNet-B reconstruction networks.

A network is described declaratively by a :class:`NetworkSpec` (a list of
:class:`BlockSpec`) and built into a :class:`ReconstructionModel` mapping a
template ``(n, d)`` to an image ``(n, 3, s, s)`` in [-1, 1].

Block wiring, for block output ``c'``:

* ``plain``: one DconvOP producing all ``c'`` channels.
* ``nb_a``: DconvOP produces ``c'/2`` channels; ConvOP 1 reads them, ConvOP
  ``p > 1`` reads only the output of ConvOP ``p - 1``.
* ``nb_b``: as ``nb_a`` but ConvOP ``p > 1`` reads the concatenation of the
  DconvOP output and ConvOPs ``1..p-1``.

The block output concatenates the DconvOP output and every ConvOP output in
index order.
"""
import json
from dataclasses import dataclass, field, asdict, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .data.preprocess import FaceImage
from .errors import DimensionMismatchError, SpecError

BLOCK_KINDS = ("plain", "nb_a", "nb_b")
NET_KINDS = {"dcnn": "plain", "nbnet_a": "nb_a", "nbnet_b": "nb_b"}


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    out_channels: int
    dconv_kernel: int = 3
    dconv_stride: int = 2
    dconv_padding: int = 1
    dconv_output_padding: int = 1
    convop_channels: int = 8
    convop_kernel: int = 3

    @property
    def dconv_channels(self):
        return self.out_channels if self.kind == "plain" else self.out_channels // 2

    @property
    def convop_count(self):
        if self.kind == "plain":
            return 0
        return self.dconv_channels // self.convop_channels

    def convop_input_widths(self):
        """Input channel count of each ConvOP, in index order."""
        h, c8 = self.dconv_channels, self.convop_channels
        if self.kind == "nb_a":
            return [h] + [c8] * (self.convop_count - 1)
        if self.kind == "nb_b":
            return [h + c8 * p for p in range(self.convop_count)]
        return []

    def output_size(self, in_size):
        return ((in_size - 1) * self.dconv_stride - 2 * self.dconv_padding
                + self.dconv_kernel + self.dconv_output_padding)

    def validate(self):
        if self.kind not in BLOCK_KINDS:
            raise SpecError(f"unknown block kind {self.kind!r}; expected one of {BLOCK_KINDS}")
        if self.out_channels < 1:
            raise SpecError("out_channels must be positive")
        if self.kind != "plain":
            if self.out_channels % 2:
                raise SpecError(f"{self.kind} block needs an even out_channels, got {self.out_channels}")
            if self.convop_channels < 1 or self.dconv_channels % self.convop_channels:
                raise SpecError(f"c'/2 = {self.dconv_channels} is not divisible by "
                                f"convop_channels = {self.convop_channels}")


@dataclass(frozen=True)
class NetworkSpec:
    blocks: tuple
    input_dim: int = 128
    final_channels: int = 3
    final_kernel: int = 3
    loss_kind: str = "pixel"
    name: str = ""

    @property
    def kind(self):
        kinds = {b.kind for b in self.blocks}
        return kinds.pop() if len(kinds) == 1 else "mixed"

    def spatial_sizes(self):
        sizes, s = [], 1
        for b in self.blocks:
            s = b.output_size(s)
            sizes.append(s)
        return sizes

    @property
    def output_size(self):
        return self.spatial_sizes()[-1]

    def validate(self):
        if not self.blocks:
            raise SpecError("a network needs at least one block")
        if self.input_dim < 1:
            raise SpecError("input_dim must be positive")
        for b in self.blocks:
            b.validate()
        sizes = self.spatial_sizes()
        if any(s < 1 for s in sizes):
            raise SpecError(f"de-convolution geometry yields non-positive sizes {sizes}")
        for i in range(1, len(sizes)):
            if self.blocks[i].dconv_stride == 2 and sizes[i] != 2 * sizes[i - 1]:
                raise SpecError(f"stride-2 block {i + 1} must double the spatial size "
                                f"({sizes[i - 1]} -> {sizes[i]})")
        if self.final_channels != 3:
            raise SpecError("final ConvOP must emit 3 channels")
        if self.loss_kind not in ("pixel", "perceptual"):
            raise SpecError(f"unknown loss kind {self.loss_kind!r}")
        return self

    def to_dict(self):
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blocks"] = tuple(BlockSpec(**b) for b in d["blocks"])
        return cls(**d)


# (c', dconv kernel) for the six blocks of the full-size networks
_CANONICAL_PLAN = [(512, 5), (256, 3), (128, 3), (64, 3), (32, 3), (16, 3)]
# four-block, 32x32 variant: canonical budgets / 4 with 8-channel ConvOPs (P = 8, 4, 2, 1)
_DESK_PLAN = [(128, 4), (64, 3), (32, 3), (16, 3)]


def _normalize_kind(kind):
    if kind in NET_KINDS:
        return NET_KINDS[kind]
    if kind in BLOCK_KINDS:
        return kind
    raise SpecError(f"unknown network kind {kind!r}; expected one of {sorted(NET_KINDS)}")


def canonical_spec(kind, input_dim=128):
    """Six-block 160x160 network (1 -> 5 -> 10 -> 20 -> 40 -> 80 -> 160)."""
    bk = _normalize_kind(kind)
    blocks = []
    for i, (c, k) in enumerate(_CANONICAL_PLAN):
        first = i == 0
        blocks.append(BlockSpec(bk, c, dconv_kernel=k, dconv_stride=2,
                                dconv_padding=0 if first else 1,
                                dconv_output_padding=0 if first else 1, convop_channels=8))
    return NetworkSpec(tuple(blocks), input_dim=input_dim, name=f"{kind}-canonical").validate()


def desk_spec(kind, input_dim=128):
    """Four-block 32x32 network (1 -> 4 -> 8 -> 16 -> 32) for CPU-scale runs."""
    bk = _normalize_kind(kind)
    blocks = []
    for i, (c, k) in enumerate(_DESK_PLAN):
        first = i == 0
        blocks.append(BlockSpec(bk, c, dconv_kernel=k, dconv_stride=2,
                                dconv_padding=0 if first else 1,
                                dconv_output_padding=0 if first else 1, convop_channels=8))
    return NetworkSpec(tuple(blocks), input_dim=input_dim, name=f"{kind}-desk").validate()


def load_spec(path):
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    return NetworkSpec.from_dict(data).validate()


def save_spec(spec, path):
    path = Path(path)
    if path.suffix == ".json":
        path.write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True))
    else:
        path.write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))
    return path


class DconvOP(nn.Sequential):
    def __init__(self, cin, cout, kernel, stride, padding, output_padding):
        super().__init__(
            nn.ConvTranspose2d(cin, cout, kernel, stride, padding, output_padding, bias=False),
            nn.BatchNorm2d(cout),
            nn.ReLU(inplace=False),
        )


class ConvOP(nn.Sequential):
    def __init__(self, cin, cout, kernel=3, final=False):
        super().__init__(
            nn.Conv2d(cin, cout, kernel, 1, kernel // 2, bias=False),
            nn.BatchNorm2d(cout),
            nn.Tanh() if final else nn.ReLU(inplace=False),
        )


@dataclass
class BlockActivation:
    x_dconv: torch.Tensor
    x_convops: list = field(default_factory=list)
    concatenated: torch.Tensor = None


class NbBlock(nn.Module):
    def __init__(self, spec: BlockSpec, in_channels):
        super().__init__()
        spec.validate()
        self.spec = spec
        self.in_channels = in_channels
        self.dconv = DconvOP(in_channels, spec.dconv_channels, spec.dconv_kernel, spec.dconv_stride,
                             spec.dconv_padding, spec.dconv_output_padding)
        self.convops = nn.ModuleList(ConvOP(w, spec.convop_channels, spec.convop_kernel)
                                     for w in spec.convop_input_widths())

    def activations(self, x):
        if x.shape[1] != self.in_channels:
            raise DimensionMismatchError(
                f"block expects {self.in_channels} input channels, got {x.shape[1]}")
        x_dconv = self.dconv(x)
        outs = []
        for p, op in enumerate(self.convops):
            if p == 0:
                inp = x_dconv
            elif self.spec.kind == "nb_a":
                inp = outs[-1]
            else:
                inp = torch.cat([x_dconv] + outs, dim=1)
            outs.append(op(inp))
        cat = torch.cat([x_dconv] + outs, dim=1) if outs else x_dconv
        return BlockActivation(x_dconv, outs, cat)

    def forward(self, x):
        return self.activations(x).concatenated


def block_forward(block, x):
    """Run one block and expose its DconvOP, ConvOP and concatenated outputs."""
    return block.activations(x)


class ReconstructionModel(nn.Module):
    """g_theta: template -> image."""

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        blocks, cin = [], spec.input_dim
        for b in spec.blocks:
            blocks.append(NbBlock(b, cin))
            cin = b.out_channels
        self.blocks = nn.ModuleList(blocks)
        self.final = ConvOP(cin, spec.final_channels, spec.final_kernel, final=True)

    def forward(self, y):
        if y.dim() == 2:
            y = y[:, :, None, None]
        if y.shape[1] != self.spec.input_dim:
            raise DimensionMismatchError(
                f"model expects {self.spec.input_dim}-D templates, got {y.shape[1]}-D")
        x = y
        for block in self.blocks:
            x = block(x)
        return self.final(x)

    def trace_shapes(self, batch=2):
        """Output shape ``(c, h, w)`` of every block and the final ConvOP."""
        was_training = self.training
        self.eval()
        shapes = []
        with torch.no_grad():
            x = torch.zeros(batch, self.spec.input_dim, 1, 1)
            for block in self.blocks:
                x = block(x)
                shapes.append(tuple(x.shape[1:]))
            shapes.append(tuple(self.final(x).shape[1:]))
        self.train(was_training)
        return shapes


def init_weights(model, std=0.02, generator=None):
    """Conv/de-conv weights ~ N(0, std); batch-norm scale 1, shift 0."""
    for m in model.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
            with torch.no_grad():
                m.weight.normal_(0.0, std, generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.BatchNorm2d):
            nn.init.ones_(m.weight)
            nn.init.zeros_(m.bias)
    return model


def build_network(spec, init="normal", std=0.02, seed=None):
    spec.validate()
    model = ReconstructionModel(spec)
    if init == "normal":
        gen = torch.Generator().manual_seed(seed) if seed is not None else None
        init_weights(model, std, gen)
    elif init != "default":
        raise SpecError(f"unknown init policy {init!r}")
    return model


def count_parameters(model, kernels_only=False):
    """Number of trainable parameters (running batch-norm statistics excluded).

    ``kernels_only`` counts conv/de-conv weight tensors alone, the convention
    that reproduces the published D-CNN figure when blocks 2-6 use 4x4 kernels.
    """
    if not kernels_only:
        return sum(p.numel() for p in model.parameters() if p.requires_grad)
    return sum(m.weight.numel() for m in model.modules()
               if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)))


def reconstruct(model, template):
    """Reconstruct one face image from a template (eval mode, no gradient)."""
    vec = np.asarray(getattr(template, "vector", template), dtype=np.float32)
    if vec.shape != (model.spec.input_dim,):
        raise DimensionMismatchError(
            f"model expects {model.spec.input_dim}-D templates, got shape {vec.shape}")
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model(torch.from_numpy(vec)[None])[0].numpy()
    model.train(was_training)
    return FaceImage(np.clip(out, -1.0, 1.0), getattr(template, "subject_id", ""),
                     getattr(template, "sample_id", ""))


def reconstruct_batch(model, templates, batch_size=256):
    """Reconstruct a ``(n, d)`` template tensor; returns ``(n, 3, s, s)``."""
    templates = torch.as_tensor(templates, dtype=torch.float32)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = torch.cat([model(templates[i:i + batch_size])
                         for i in range(0, len(templates), batch_size)])
    model.train(was_training)
    return out


def save_model(model, path, **meta):
    return save_checkpoint(path, "nbnet", {"spec": model.spec.to_dict(), "state": model.state_dict(),
                                           "meta": meta},
                           network_kind=model.spec.kind, input_dim=model.spec.input_dim)


def load_model(path):
    header, payload = load_checkpoint(path, "nbnet")
    model = ReconstructionModel(NetworkSpec.from_dict(payload["spec"]))
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload.get("meta", {})


def with_loss(spec, loss_kind):
    return replace(spec, loss_kind=loss_kind)
