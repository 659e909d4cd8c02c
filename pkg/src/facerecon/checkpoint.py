"""Versioned checkpoint files and small reproducibility helpers."""
import hashlib
import io
import os
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

FORMAT_VERSION = 1


def save_checkpoint(path, kind, payload, **header):
    """Write ``payload`` under a header ``{format, kind, version, ...}``.

    The write goes through a temporary file so a crash never leaves a
    truncated checkpoint behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    record = {
        "header": {"format": "facerecon", "kind": kind, "version": FORMAT_VERSION, **header},
        "payload": payload,
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(record, tmp)
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind=None):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        record = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a zoo of types for corrupt files
        raise CheckpointError(f"cannot read checkpoint {path} "
                              f"(expected facerecon format v{FORMAT_VERSION}): {exc}") from exc
    header = record.get("header") if isinstance(record, dict) else None
    if not header or header.get("format") != "facerecon":
        raise CheckpointError(f"{path} is not a facerecon checkpoint")
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')} "
                              f"(this build reads v{FORMAT_VERSION})")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    return header, record["payload"]


def seed_everything(seed):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def derive_seed(*parts):
    """Stable 63-bit seed from arbitrary hashable parts."""
    h = hashlib.sha256(repr(parts).encode()).digest()
    return int.from_bytes(h[:8], "little") >> 1


def torch_generator(*parts):
    g = torch.Generator()
    g.manual_seed(derive_seed(*parts))
    return g


def state_dict_hash(module_or_state):
    """SHA-256 over every tensor in a module/state dict, in key order."""
    state = module_or_state.state_dict() if hasattr(module_or_state, "state_dict") else module_or_state
    h = hashlib.sha256()
    for key in sorted(state):
        value = state[key]
        h.update(key.encode())
        if torch.is_tensor(value):
            buf = io.BytesIO()
            np.save(buf, value.detach().cpu().contiguous().numpy(), allow_pickle=False)
            h.update(buf.getvalue())
        else:
            h.update(repr(value).encode())
    return h.hexdigest()


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
