"""Results files, tables and ROC plots. Output is a pure function of the inputs."""
import csv
import io
import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METADATA = {"threshold_rule": "accept if score >= threshold; empirical impostor quantile, no interpolation",
            "sigma": "population standard deviation across folds",
            "reported": "mu - sigma", "units": "percent"}


def _far_label(f):
    return f"{100 * f:g}%"


def results_json(results, identification=()):
    """Machine-readable results: one record per (model, dataset, attack)."""
    records = []
    for r in sorted(results, key=lambda r: (r.model, r.dataset, r.attack)):
        far = {}
        for j, f in enumerate(r.far_targets):
            if r.aggregate is not None:
                a = r.aggregate[f]
                far[f"{f:g}"] = {"mu": 100 * a["mu"], "sigma": 100 * a["sigma"],
                                 "reported": 100 * a["reported"], "threshold": a["threshold"],
                                 "per_fold": [100 * v for v in a["per_fold"]]}
            else:
                row = r.folds[0]
                far[f"{f:g}"] = {"mu": 100 * row.tar[j], "sigma": 0.0, "reported": 100 * row.tar[j],
                                 "threshold": row.thresholds[j], "per_fold": [100 * row.tar[j]]}
        records.append({"model": r.model, "dataset": r.dataset, "attack": r.attack,
                        "n_folds": len(r.folds), "far": far})
    ident = [{"model": m, "dataset": d, "partition": res.partition, "rank1": res.rate,
              "n_probes": res.n_probes, "ties": int(sum(res.tied))}
             for m, d, res in sorted(identification, key=lambda t: (t[0], t[1], t[2].partition))]
    return {"metadata": METADATA, "verification": records, "identification": ident}


def _rows(data):
    fars = sorted({k for rec in data["verification"] for k in rec["far"]}, key=float)
    header = ["model", "dataset", "attack"]
    for f in fars:
        lab = _far_label(float(f))
        header += [f"mu@{lab}", f"sigma@{lab}", f"mu-sigma@{lab}"]
    rows = []
    for rec in data["verification"]:
        row = [rec["model"], rec["dataset"], rec["attack"]]
        for f in fars:
            v = rec["far"].get(f)
            row += ["" if v is None else f"{v[k]:.2f}" for k in ("mu", "sigma", "reported")]
        rows.append(row)
    return header, rows


def markdown_table(data):
    header, rows = _rows(data)
    lines = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    if data["identification"]:
        lines += ["", "| model | dataset | partition | rank-1 (%) |", "|---|---|---|---|"]
        lines += [f"| {r['model']} | {r['dataset']} | {r['partition']} | {r['rank1']:.2f} |"
                  for r in data["identification"]]
    return "\n".join(lines) + "\n"


def csv_table(data):
    header, rows = _rows(data)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def plot_roc(results, path, title=""):
    """Fold-pooled ROC curves (one line per result) on a log FAR axis."""
    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    for r in sorted(results, key=lambda r: (r.model, r.attack)):
        grid = np.logspace(-4, 0, 200)
        tar = np.mean([np.interp(grid, f.roc_far, f.roc_tar) for f in r.folds], axis=0)
        ax.plot(grid, 100 * tar, label=f"{r.model} ({r.attack})")
    ax.set_xscale("log")
    ax.set_xlabel("FAR")
    ax.set_ylabel("TAR (%)")
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7, loc="lower right")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)


def render_report(results, out_dir, identification=()):
    """Write results.json, results.md, results.csv and per-dataset ROC plots.

    ``identification`` holds ``(model, dataset, IdentificationResult)`` triples.
    """
    results = list(results)
    if not results and not identification:
        raise ValueError("nothing to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = results_json(results, identification)
    (out / "results.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out / "results.md").write_text(markdown_table(data), encoding="utf-8")
    (out / "results.csv").write_text(csv_table(data), encoding="utf-8")
    plots = []
    for key in sorted({(r.dataset, r.attack) for r in results}):
        group = [r for r in results if (r.dataset, r.attack) == key]
        p = out / f"roc_{key[0]}_{key[1]}.png"
        plot_roc(group, p, title=f"{key[0]} {key[1]}")
        plots.append(p)
    return {"json": out / "results.json", "markdown": out / "results.md", "csv": out / "results.csv",
            "plots": plots}
