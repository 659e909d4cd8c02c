"""Command-line pipeline: one subcommand per stage, all sharing one run directory.

Exit codes: 0 success, 2 validation error, 1 runtime failure.
"""
import json
import logging
import shutil
import sys
from dataclasses import fields
from pathlib import Path

import click
import numpy as np
import torch

from . import __version__
from .attack_eval import (AttackResult, IdentityReconstructor, VerificationResult, evaluate_attack,
                          make_folds, rank1_identification, render_report)
from .checkpoint import file_hash, seed_everything
from .config import dump_config, load_config
from .data import FaceDataset, load_manifest, synthetic_faces, write_synthetic_dataset
from .data.preprocess import to_uint8
from .errors import CheckpointError, ConfigError, FaceReconError
from .extractor import ExtractorConfig, ExtractorHandle, EmbeddingFileExtractor, train_stand_in_extractor
from .gan import GanConfig, GeneratorHandle, train_gan
from .nbnet import (build_network, canonical_spec, count_parameters, desk_spec, load_model, load_spec,
                    reconstruct_batch, save_model)
from .trainer import TrainConfig, make_training_stream, two_phase_train

log = logging.getLogger("facerecon")


class ValidationFailure(click.ClickException):
    exit_code = 2


# -- helpers ---------------------------------------------------------------

def _dc(cls, section, seed):
    names = {f.name for f in fields(cls)}
    kw = {k: (tuple(v) if isinstance(v, list) else v) for k, v in section.items() if k in names}
    kw["seed"] = seed
    return cls(**kw)


def _run_root(cfg):
    return Path(cfg["output_dir"]) / cfg["run_id"]


def _stage_dir(cfg, name, overwrite):
    d = _run_root(cfg) / name
    if d.exists() and any(d.iterdir()):
        if not overwrite:
            raise ValidationFailure(f"run directory {d} already exists; pass --overwrite to replace it")
        shutil.rmtree(d)
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_manifest(out, cfg, stage, inputs=(), outputs=()):
    """Resolved config + seeds + artifact hashes; contains no timestamps."""
    man = {"stage": stage, "version": __version__, "seed": cfg["seed"], "config": cfg,
           "inputs": {str(p): file_hash(p) for p in inputs},
           "outputs": {Path(p).name: file_hash(p) for p in outputs}}
    (out / "run_manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n",
                                           encoding="utf-8")
    (out / "config.yaml").write_text(dump_config(cfg), encoding="utf-8")


def _train_data(cfg):
    size = cfg["data"]["image_size"]
    if cfg["data"]["train_manifest"]:
        return FaceDataset.from_manifest(load_manifest(cfg["data"]["train_manifest"]), size)
    return synthetic_faces(size=size, **cfg["data"]["synthetic_train"])


def _eval_data(cfg):
    size = cfg["data"]["image_size"]
    if cfg["data"]["eval_manifest"]:
        return FaceDataset.from_manifest(load_manifest(cfg["data"]["eval_manifest"]), size)
    ds = synthetic_faces(size=size, subject_prefix="t", **cfg["data"]["synthetic_eval"])
    ds.partitions = ["gallery" if s == "000" else "probe" for s in ds.sample_ids]
    return ds


def _raw_data(cfg):
    size = cfg["data"]["image_size"]
    if cfg["nbnet"]["source"] == "mixed":
        paths = cfg["data"]["mixed_manifests"]
        if not paths:
            raise ValidationFailure("data.mixed_manifests: source 'mixed' needs at least one manifest")
        return [FaceDataset.from_manifest(load_manifest(p), size) for p in paths]
    if cfg["data"]["raw_manifest"]:
        ds = FaceDataset.from_manifest(load_manifest(cfg["data"]["raw_manifest"]), size)
    else:
        ds = _train_data(cfg)
    limit = cfg["data"]["raw_limit"]
    if limit and len(ds) > limit:
        idx = np.sort(np.random.default_rng(cfg["seed"]).permutation(len(ds))[:limit])
        ds = ds.subset(idx)
    return ds


def _artifact(cfg, section, default):
    p = cfg[section].get("checkpoint") or (_run_root(cfg) / default)
    if not Path(p).is_file():
        raise ValidationFailure(f"{section}.checkpoint: required artifact {p} not found "
                                f"(run the {section} stage first or set {section}.checkpoint)")
    return Path(p)


def _load_extractor(path):
    path = Path(path)
    if path.suffix == ".jsonl":
        return EmbeddingFileExtractor.from_jsonl(path)
    return ExtractorHandle.load(path)


def _spec(cfg, arch):
    s = cfg["nbnet"]["spec"]
    if s == "desk":
        return desk_spec(arch)
    if s == "canonical":
        return canonical_spec(arch)
    return load_spec(s)


def _common(f):
    f = click.option("--config", "config_path", type=click.Path(), default=None, help="YAML config file.")(f)
    f = click.option("--profile", default="desk", type=click.Choice(["desk", "canonical"]),
                     show_default=True)(f)
    f = click.option("--set", "overrides", multiple=True, help="Override, e.g. train.phase1_batches=100.")(f)
    f = click.option("--seed", type=int, default=None, help="Global seed (overrides the config).")(f)
    f = click.option("--run-id", default=None, help="Run directory name under the output root.")(f)
    f = click.option("--overwrite", is_flag=True, help="Replace an existing stage directory.")(f)
    return f


def _cfg(config_path, profile, overrides, seed, run_id):
    cfg = load_config(config_path, profile, overrides, seed)
    if run_id:
        cfg["run_id"] = run_id
    seed_everything(cfg["seed"])
    return cfg


# -- commands --------------------------------------------------------------

@click.group()
@click.version_option(__version__)
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Template-to-face reconstruction attacks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")


@main.command("make-synthetic")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--subjects", default=40, show_default=True)
@click.option("--samples", default=15, show_default=True)
@click.option("--size", default=32, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--prefix", default="s", show_default=True, help="Subject id prefix.")
@click.option("--landmarks/--no-landmarks", default=False)
@click.option("--gallery-split", is_flag=True, help="Mark sample 000 'gallery' and the rest 'probe'.")
def make_synthetic(out_dir, subjects, samples, size, seed, prefix, landmarks, gallery_split):
    """Write a synthetic face corpus with a manifest.jsonl."""
    part = (lambda sid, k: "gallery" if k == 0 else "probe") if gallery_split else None
    write_synthetic_dataset(out_dir, subjects, samples, size, seed, with_landmarks=landmarks,
                            partition_fn=part, subject_prefix=prefix)
    click.echo(str(Path(out_dir) / "manifest.jsonl"))


@main.command("train-extractor")
@_common
def train_extractor(config_path, profile, overrides, seed, run_id, overwrite):
    """Train the stand-in embedding network on the training data."""
    cfg = _cfg(config_path, profile, overrides, seed, run_id)
    out = _stage_dir(cfg, "extractor", overwrite)
    ecfg = _dc(ExtractorConfig, cfg["extractor"], cfg["seed"])
    train_stand_in_extractor(_train_data(cfg), ecfg, checkpoint=out / "extractor.pt")
    _write_manifest(out, cfg, "train-extractor", outputs=[out / "extractor.pt"])
    click.echo(str(out / "extractor.pt"))


@main.command("train-gan")
@_common
def train_gan_cmd(config_path, profile, overrides, seed, run_id, overwrite):
    """Train the face generator on the training data."""
    cfg = _cfg(config_path, profile, overrides, seed, run_id)
    out = _stage_dir(cfg, "gan", overwrite)
    gcfg = _dc(GanConfig, cfg["gan"], cfg["seed"])
    train_gan(_train_data(cfg), gcfg, out_dir=out)
    _write_manifest(out, cfg, "train-gan", outputs=[out / "generator.pt"])
    click.echo(str(out / "generator.pt"))


@main.command("train-nbnet")
@_common
@click.option("--arch", type=click.Choice(["dcnn", "nbnet_a", "nbnet_b"]), default=None)
@click.option("--source", type=click.Choice(["generator", "raw", "mixed"]), default=None)
@click.option("--param-count", is_flag=True, help="Print the trainable parameter count and exit.")
def train_nbnet_cmd(config_path, profile, overrides, seed, run_id, overwrite, arch, source, param_count):
    """Two-phase NbNet / D-CNN training against a frozen extractor."""
    cfg = _cfg(config_path, profile, overrides, seed, run_id)
    arch = arch or cfg["nbnet"]["arch"]
    source = source or cfg["nbnet"]["source"]
    cfg["nbnet"].update(arch=arch, source=source)
    spec = _spec(cfg, arch)
    if param_count:
        click.echo(str(count_parameters(build_network(spec, seed=cfg["seed"]))))
        return
    tcfg = _dc(TrainConfig, {**cfg["train"], "data_source": "generator" if source == "generator"
                             else "raw_manifest"}, cfg["seed"])
    ext_path = _artifact(cfg, "extractor", "extractor/extractor.pt")
    inputs = [ext_path]
    extractor = _load_extractor(ext_path)
    if source == "generator":
        gen_path = _artifact(cfg, "gan", "gan/generator.pt")
        inputs.append(gen_path)
        src = GeneratorHandle.load(gen_path)
    else:
        src = _raw_data(cfg)
    out = _stage_dir(cfg, f"nbnet_{arch}_{source}", overwrite)
    model = build_network(spec, std=cfg["nbnet"]["init_std"], seed=cfg["seed"])
    stream = make_training_stream(src, extractor, tcfg.batch_size, cfg["seed"])
    fmap = extractor.perceptual_feature_map(cfg["nbnet"]["perceptual_stage"]) if tcfg.phase2_batches else None
    model, tlog = two_phase_train(model, stream, tcfg, feature_map=fmap, checkpoint_dir=out / "checkpoints")
    tlog.write(out / "training_log.jsonl")
    save_model(model, out / "model.pt", arch=arch, source=source, seed=cfg["seed"])
    _write_manifest(out, cfg, "train-nbnet", inputs=inputs, outputs=[out / "model.pt"])
    click.echo(str(out / "model.pt"))


def _panel(originals, recons, scores, path):
    """Originals on top, reconstructions below, similarity written under each pair."""
    from PIL import Image, ImageDraw
    n, s = len(recons), recons.shape[-1]
    scale = max(1, 96 // s)
    cell = s * scale
    text_h = 14 if scores is not None else 0
    rows = 2 if originals is not None else 1
    canvas = Image.new("RGB", (n * cell, rows * cell + text_h), "white")
    draw = ImageDraw.Draw(canvas)
    for i in range(n):
        ims = ([originals[i]] if originals is not None else []) + [recons[i]]
        for r, im in enumerate(ims):
            tile = Image.fromarray(np.transpose(to_uint8(im.numpy()), (1, 2, 0))).resize((cell, cell),
                                                                                          Image.NEAREST)
            canvas.paste(tile, (i * cell, r * cell))
        if scores is not None:
            draw.text((i * cell + 2, rows * cell + 1), f"{scores[i]:.3f}", fill="black")
    canvas.save(path)


@main.command("reconstruct")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--extractor", "extractor_path", default=None, type=click.Path(exists=True))
@click.option("--images", "images_manifest", default=None, type=click.Path(exists=True),
              help="Manifest of originals.")
@click.option("--templates", "templates_path", default=None, type=click.Path(exists=True),
              help="Template JSONL.")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--size", default=32, show_default=True)
@click.option("--limit", default=16, show_default=True)
def reconstruct_cmd(model_path, extractor_path, images_manifest, templates_path, out_dir, size, limit):
    """Reconstruct faces; with originals, write side-by-side panels annotated with similarity."""
    if (images_manifest is None) == (templates_path is None):
        raise ValidationFailure("give exactly one of --images or --templates")
    model, _ = load_model(model_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if images_manifest is not None:
        if extractor_path is None:
            raise ValidationFailure("--images needs --extractor")
        extractor = _load_extractor(extractor_path)
        ds = FaceDataset.from_manifest(load_manifest(images_manifest), size)
        ds = ds.subset(range(min(limit, len(ds))))
        t = extractor.embed(ds.pixels)
        recon = reconstruct_batch(model, t).clamp(-1, 1)
        rt = extractor.embed(recon)
        scores = torch.nn.functional.cosine_similarity(t, rt).numpy()
        for i in range(len(ds)):
            _panel(ds.pixels[i:i + 1], recon[i:i + 1], scores[i:i + 1],
                   out / f"{ds.subject_ids[i]}_{ds.sample_ids[i]}.png")
        (out / "similarity.json").write_text(json.dumps(
            {f"{a}/{b}": float(v) for a, b, v in zip(ds.subject_ids, ds.sample_ids, scores)},
            indent=2, sort_keys=True) + "\n", encoding="utf-8")
        click.echo(f"{len(ds)} panels written to {out}")
    else:
        rows = [json.loads(line) for line in Path(templates_path).read_text().splitlines() if line.strip()]
        t = torch.tensor([r["vector"] for r in rows[:limit]], dtype=torch.float32)
        if t.shape[1] != model.spec.input_dim:
            raise ValidationFailure(f"templates are {t.shape[1]}-D, model expects {model.spec.input_dim}-D")
        recon = reconstruct_batch(model, t).clamp(-1, 1)
        for i, r in enumerate(rows[:limit]):
            _panel(None, recon[i:i + 1], None, out / f"{r.get('subject_id', 'x')}_{r.get('sample_id', i)}.png")
        click.echo(f"{len(recon)} reconstructions written to {out}")


def _serialise(results):
    out = []
    for r in results:
        out.append({"model": r.model, "dataset": r.dataset, "attack": r.attack,
                    "far_targets": list(r.far_targets),
                    "folds": [{"fold_id": f.fold_id, "tar": list(f.tar), "thresholds": list(f.thresholds),
                               "roc_far": f.roc_far.tolist(), "roc_tar": f.roc_tar.tolist()}
                              for f in r.folds],
                    "aggregate": None if r.aggregate is None else {f"{k:g}": v for k, v in r.aggregate.items()}})
    return out


def _deserialise(items):
    res = []
    for d in items:
        fars = tuple(d["far_targets"])
        folds = [VerificationResult(f["fold_id"], d["attack"], fars, tuple(f["tar"]), tuple(f["thresholds"]),
                                    np.array(f["roc_far"]), np.array(f["roc_tar"])) for f in d["folds"]]
        agg = None if d["aggregate"] is None else {float(k): v for k, v in d["aggregate"].items()}
        res.append(AttackResult(d["model"], d["dataset"], d["attack"], fars, folds, agg))
    return res


@main.command("attack")
@_common
@click.option("--model", "models", multiple=True, help="NAME=CHECKPOINT; 'original' uses the originals.")
def attack_cmd(config_path, profile, overrides, seed, run_id, overwrite, models):
    """Type-I / type-II verification attacks and rank-1 identification on the evaluation set."""
    cfg = _cfg(config_path, profile, overrides, seed, run_id)
    ext_path = _artifact(cfg, "extractor", "extractor/extractor.pt")
    extractor = _load_extractor(ext_path)
    named = {}
    for m in models:
        name, _, path = m.partition("=")
        if name == "original" and not path:
            named[name] = None
            continue
        if not path or not Path(path).is_file():
            raise ValidationFailure(f"--model {m!r}: checkpoint not found")
        named[name] = Path(path)
    if not models:
        named = {p.parent.name.removeprefix("nbnet_"): p for p in sorted(_run_root(cfg).glob("nbnet_*/model.pt"))}
        named["original"] = None
    if not named:
        raise ValidationFailure("no models to attack")
    ev = cfg["eval"]
    data = _eval_data(cfg)
    dname = Path(cfg["data"]["eval_manifest"]).stem if cfg["data"]["eval_manifest"] else "synthetic"
    folds = make_folds(data.subject_ids, ev["n_folds"], ev["fold_seed"])
    out = _stage_dir(cfg, "attack", overwrite)
    results, ident = [], []
    for name in sorted(named):
        model = IdentityReconstructor() if named[name] is None else load_model(named[name])[0]
        try:
            results += evaluate_attack(data, model, extractor, folds, ev["attacks"], tuple(ev["far_targets"]),
                                       model_name=name, dataset_name=dname)
        except FaceReconError as e:
            raise FaceReconError(f"attack on model {name!r}: {e}") from e
        gallery = data.partition(ev["gallery_partition"]) if ev["gallery_partition"] else None
        if gallery is not None and len(gallery) == 0:
            log.warning("no images in gallery partition %r; skipping identification", ev["gallery_partition"])
        elif gallery is not None:
            probes = ev["probe_partitions"] or sorted(set(data.partitions) - {ev["gallery_partition"]})
            for part in probes:
                ident.append((name, dname, rank1_identification(
                    gallery, data.partition(part), extractor,
                    None if named[name] is None else model, part)))
    (out / "attack_results.json").write_text(json.dumps(_serialise(results), sort_keys=True) + "\n",
                                             encoding="utf-8")
    (out / "identification.json").write_text(json.dumps(
        [{"model": m, "dataset": d, "partition": r.partition, "rate": r.rate, "best_subject": r.best_subject,
          "best_index": r.best_index, "tied": r.tied} for m, d, r in ident], sort_keys=True) + "\n",
        encoding="utf-8")
    paths = render_report(results, out, ident)
    _write_manifest(out, cfg, "attack", inputs=[ext_path] + [p for p in named.values() if p],
                    outputs=[paths["json"]])
    click.echo(paths["markdown"].read_text())


@main.command("report")
@click.argument("result_files", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
def report_cmd(result_files, out_dir):
    """Merge attack_results.json files into one table set and ROC plots."""
    from .attack_eval.metrics import IdentificationResult
    results, ident = [], []
    for f in result_files:
        results += _deserialise(json.loads(Path(f).read_text()))
        idf = Path(f).with_name("identification.json")
        if idf.is_file():
            for d in json.loads(idf.read_text()):
                ident.append((d["model"], d["dataset"], IdentificationResult(
                    d["rate"], d["partition"], d["best_subject"], d["best_index"], d["tied"])))
    paths = render_report(results, out_dir, ident)
    click.echo(paths["markdown"].read_text())


@main.command("norta-demo")
@_common
def norta_demo(config_path, profile, overrides, seed, run_id, overwrite):
    """Fit NORTA to the configured marginals/correlation, sample, and summarise."""
    from scipy import stats
    from . import norta
    cfg = _cfg(config_path, profile, overrides, seed, run_id)
    nc = cfg["norta"]
    marginals = [norta.Marginal.from_dict(m) for m in nc["marginals"]]
    sigma_b = norta.covariance_from_correlation(nc["correlation"], marginals)
    model = norta.fit(sigma_b, marginals)
    b = norta.sample(model, norta.uniform_inputs(nc["n_samples"], model.k, cfg["seed"]))
    out = _stage_dir(cfg, "norta", overwrite)
    model.save(out / "norta_model.json")
    summary = {"adjusted": model.adjusted, "lambda_a": model.lambda_a.round(12).tolist(),
               "target_cov": sigma_b.round(12).tolist(), "sample_cov": np.cov(b.T).round(12).tolist(),
               "ks": [float(stats.kstest(b[:, i], m.cdf).statistic) for i, m in enumerate(marginals)]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_manifest(out, cfg, "norta-demo", outputs=[out / "norta_model.json", out / "summary.json"])
    click.echo(json.dumps(summary, indent=2, sort_keys=True))


def run(argv=None):
    """Entry point mapping failures onto exit codes 2 (validation) and 1 (runtime)."""
    try:
        main.main(args=argv, prog_name="facerecon", standalone_mode=False)
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 1
    except (click.UsageError, ValidationFailure) as e:
        e.show()
        return 2
    except ConfigError as e:
        click.echo("configuration invalid:", err=True)
        for p in e.problems:
            click.echo(f"  - {p}", err=True)
        return 2
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except (FaceReconError, CheckpointError, OSError) as e:
        click.echo(f"error: {e}", err=True)
        return 1
    except Exception as e:  # anything else is still a runtime failure, not a crash
        log.exception("unhandled failure")
        click.echo(f"error: {type(e).__name__}: {e}", err=True)
        return 1
    return 0


def entry():
    sys.exit(run())


if __name__ == "__main__":
    entry()
