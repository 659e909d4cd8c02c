"""Run configuration: one YAML file with per-stage sections and two built-in profiles."""
import copy
import os
from dataclasses import asdict, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .extractor import ExtractorConfig
from .gan import GanConfig
from .trainer import TrainConfig

OUTPUT_ENV = "FACERECON_OUTPUT"

_EVAL = {"attacks": ["type1", "type2"], "far_targets": [0.001, 0.01], "n_folds": 10, "fold_seed": 0,
         "gallery_partition": "gallery", "probe_partitions": []}

_SYNTH_TRAIN = {"n_subjects": 40, "samples_per_subject": 15, "seed": 300}
_SYNTH_EVAL = {"n_subjects": 20, "samples_per_subject": 10, "seed": 900}


def _base():
    return {
        "seed": 0,
        "output_dir": "runs",
        "run_id": "run",
        "data": {"image_size": 32, "train_manifest": None, "eval_manifest": None, "raw_manifest": None,
                 "raw_limit": 200, "mixed_manifests": [], "synthetic_train": dict(_SYNTH_TRAIN),
                 "synthetic_eval": dict(_SYNTH_EVAL)},
        "extractor": {**asdict(ExtractorConfig()), "checkpoint": None},
        "gan": {**asdict(GanConfig()), "checkpoint": None},
        "nbnet": {"arch": "nbnet_b", "spec": "desk", "source": "generator", "init_std": 0.02,
                  "perceptual_stage": 2, "checkpoint": None},
        "train": asdict(TrainConfig()),
        "eval": copy.deepcopy(_EVAL),
        "norta": {"n_samples": 100000,
                  "marginals": [{"name": "uniform"}, {"name": "exponential", "scale": 1.0},
                                {"name": "normal", "loc": 0.0, "scale": 1.0}],
                  "correlation": [[1.0, 0.5, 0.3], [0.5, 1.0, 0.2], [0.3, 0.2, 1.0]]},
    }


def profile(name):
    """``canonical`` carries the published constants; ``desk`` is the CPU-scale profile."""
    cfg = _base()
    if name == "canonical":
        cfg["data"]["image_size"] = 160
        cfg["extractor"].update(input_size=160, width=32, steps=20000)
        cfg["gan"].update(image_size=160, base_channels=64, d_base_channels=64, iterations=100000,
                          checkpoint_every=5000)
        cfg["nbnet"]["spec"] = "canonical"
        cfg["train"].update(phase1_batches=300_000, phase2_batches=100_000, checkpoint_every=1000)
    elif name == "desk":
        cfg["extractor"].update(width=16, steps=800)
        cfg["gan"].update(iterations=2000, checkpoint_every=500)
        cfg["train"].update(phase1_batches=2000, phase2_batches=500, checkpoint_every=500)
    else:
        raise ConfigError([f"unknown profile {name!r}; expected 'canonical' or 'desk'"])
    cfg["run_id"] = name
    return cfg


def _merge(base, over, prefix=""):
    problems = []
    for k, v in over.items():
        key = f"{prefix}{k}"
        if k not in base:
            problems.append(f"unknown config key {key!r}")
        elif isinstance(base[k], dict) and isinstance(v, dict):
            problems += _merge(base[k], v, key + ".")
        else:
            base[k] = v
    return problems


def parse_override(text):
    """``section.key=value`` with a YAML-parsed value."""
    if "=" not in text:
        raise ConfigError([f"override {text!r} must look like section.key=value"])
    key, value = text.split("=", 1)
    out = cur = {}
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = yaml.safe_load(value)
    return out


def load_config(path=None, profile_name="desk", overrides=(), seed=None):
    """Profile defaults <- YAML file <- ``--set`` overrides <- ``--seed``; validated exhaustively."""
    cfg = profile(profile_name)
    problems = []
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError([f"config file {path} does not exist"])
        data = yaml.safe_load(p.read_text(encoding="utf-8")) or {}
        if not isinstance(data, dict):
            raise ConfigError([f"config file {path} must hold a mapping"])
        if "profile" in data:
            cfg = profile(data.pop("profile"))
        problems += _merge(cfg, data)
    for o in overrides:
        problems += _merge(cfg, parse_override(o) if isinstance(o, str) else o)
    if seed is not None:
        cfg["seed"] = int(seed)
    if os.environ.get(OUTPUT_ENV):
        cfg["output_dir"] = os.environ[OUTPUT_ENV]
    problems += validate_config(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def _dataclass_problems(section, cls, data):
    names = {f.name for f in fields(cls)}
    kwargs = {k: v for k, v in data.items() if k in names}
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except Exception as e:  # validation messages are collected, not raised
        return [f"{section}: {e}"]
    return []


def validate_config(cfg):
    problems = []
    for key in ("train_manifest", "eval_manifest", "raw_manifest"):
        v = cfg["data"].get(key)
        if v is not None and not Path(v).is_file():
            problems.append(f"data.{key}: file {v} does not exist")
    for v in cfg["data"].get("mixed_manifests") or []:
        if not Path(v).is_file():
            problems.append(f"data.mixed_manifests: file {v} does not exist")
    for section in ("extractor", "gan", "nbnet"):
        v = cfg[section].get("checkpoint")
        if v is not None and not Path(v).is_file():
            problems.append(f"{section}.checkpoint: file {v} does not exist")
    problems += _dataclass_problems("extractor", ExtractorConfig, cfg["extractor"])
    problems += _dataclass_problems("gan", GanConfig, {**cfg["gan"], "real_label_range": tuple(
        cfg["gan"]["real_label_range"]), "fake_label_range": tuple(cfg["gan"]["fake_label_range"])})
    problems += _dataclass_problems("train", TrainConfig, cfg["train"])
    nb = cfg["nbnet"]
    if nb["arch"] not in ("dcnn", "nbnet_a", "nbnet_b"):
        problems.append(f"nbnet.arch: {nb['arch']!r} is not one of dcnn, nbnet_a, nbnet_b")
    if nb["source"] not in ("generator", "raw", "mixed"):
        problems.append(f"nbnet.source: {nb['source']!r} is not one of generator, raw, mixed")
    if nb["spec"] not in ("desk", "canonical") and not Path(str(nb["spec"])).is_file():
        problems.append(f"nbnet.spec: {nb['spec']!r} is neither a profile name nor an existing file")
    size = cfg["data"]["image_size"]
    if cfg["extractor"]["input_size"] != size or cfg["gan"]["image_size"] != size:
        problems.append("data.image_size, extractor.input_size and gan.image_size must agree")
    ev = cfg["eval"]
    bad = [a for a in ev["attacks"] if a not in ("type1", "type2", "original")]
    if bad:
        problems.append(f"eval.attacks: unknown attacks {bad}")
    if not ev["far_targets"] or any(not 0 < f < 1 for f in ev["far_targets"]):
        problems.append("eval.far_targets must be fractions in (0, 1)")
    if ev["n_folds"] < 1:
        problems.append("eval.n_folds must be >= 1")
    return problems


def dump_config(cfg):
    return yaml.safe_dump(cfg, sort_keys=True)
