"""Figure rendering from a run directory's metric CSVs.

Pure function of the CSV files: reads them, writes SVG figures (text kept as
text, every plotted value annotated verbatim) plus a summary CSV.  Missing
required inputs raise a single error listing all of them.
"""

import csv
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import LdtError  # noqa: E402

plt.rcParams["svg.fonttype"] = "none"

PRUNE_METHODS = ("ldt", "random", "l1")


class ReportInputError(LdtError):
    category = "missing-input"


def _read_csv(path):
    """Rows as dicts of raw strings (values annotated verbatim later)."""
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _spectra_path(run_dir):
    for tag in ("train", "retrain"):
        p = os.path.join(run_dir, f"{tag}_spectra.csv")
        if os.path.exists(p):
            return p
    return os.path.join(run_dir, "train_spectra.csv")


def _energy_path(run_dir):
    return os.path.join(run_dir, "train_cov_energy.csv")


def plot_spectra(run_dir, out_path):
    rows = _read_csv(_spectra_path(run_dir))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.set_xlabel("epoch")
    ax.set_ylabel("eigenvalue")
    ax.set_title("discriminant eigenvalue spectrum per epoch")
    by_scale_k = {}
    for r in rows:
        key = (int(r["scale"]), int(r["k"]))
        by_scale_k.setdefault(key, []).append(
            (int(r["epoch"]), r["eigenvalue"])
        )
    for (scale, k), pts in sorted(by_scale_k.items()):
        if k > 4:
            continue
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [float(p[1]) for p in pts]
        ax.plot(xs, ys, marker=".", label=f"scale {scale}, $\\lambda_{{{k}}}$")
        ax.annotate(pts[-1][1], (xs[-1], ys[-1]), fontsize=6)
    if by_scale_k:
        ax.set_yscale("symlog")
        ax.legend(fontsize=7)
    fig.savefig(out_path)
    plt.close(fig)


def plot_cov_energy(run_dir, out_path):
    rows = _read_csv(_energy_path(run_dir))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.set_xlabel("epoch")
    ax.set_ylabel("off-diagonal energy of the total scatter")
    ax.set_title("feature covariance off-diagonal energy")
    by_scale = {}
    for r in rows:
        by_scale.setdefault(int(r["scale"]), []).append(
            (int(r["epoch"]), r["offdiag_energy"])
        )
    for scale, pts in sorted(by_scale.items()):
        pts.sort()
        xs = [p[0] for p in pts]
        ys = [float(p[1]) for p in pts]
        ax.plot(xs, ys, marker=".", label=f"scale {scale}")
        ax.annotate(pts[-1][1], (xs[-1], ys[-1]), fontsize=6)
    if by_scale:
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    fig.savefig(out_path)
    plt.close(fig)


def plot_map_vs_rate(run_dir, out_path):
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.set_xlabel("cumulative parameter removal rate")
    ax.set_ylabel("val mAP")
    ax.set_title("accuracy vs pruning rate")
    summary = {}
    for method in PRUNE_METHODS:
        path = os.path.join(run_dir, f"prune_{method}_rounds.csv")
        if not os.path.exists(path):
            continue
        rows = _read_csv(path)
        xs, ys, raw = [], [], []
        cumulative = 1.0
        for r in sorted(rows, key=lambda r: int(r["round"])):
            cumulative *= 1.0 - float(r["rate"])
            xs.append(1.0 - cumulative)
            ys.append(float(r["val_map"]))
            raw.append(r["val_map"])
        ax.plot(xs, ys, marker="o", label=method)
        for x, y, txt in zip(xs, ys, raw):
            ax.annotate(txt, (x, y), fontsize=6)
        if ys:
            summary[f"final_map_{method}"] = raw[-1]
    ax.legend()
    fig.savefig(out_path)
    plt.close(fig)
    return summary


def stability_correlations(rows):
    """Pairwise Pearson correlation of importance vectors across batches."""
    by_batch = {}
    for r in rows:
        by_batch.setdefault(int(r["batch"]), {})[
            (r["layer"], int(r["channel"]))
        ] = float(r["importance"])
    batches = sorted(by_batch)
    if not batches:
        return batches, np.zeros((0, 0))
    keys = sorted(by_batch[batches[0]])
    mat = np.array([[by_batch[b][k] for k in keys] for b in batches])
    n = len(batches)
    corr = np.ones((n, n))
    for i in range(n):
        for j in range(n):
            a, b = mat[i], mat[j]
            da, db = a - a.mean(), b - b.mean()
            denom = np.sqrt((da * da).sum() * (db * db).sum())
            corr[i, j] = (da * db).sum() / denom if denom > 0 else 0.0
    return batches, corr


def plot_stability(run_dir, out_path):
    rows = _read_csv(os.path.join(run_dir, "stability.csv"))
    batches, corr = stability_correlations(rows)
    fig, ax = plt.subplots(figsize=(5, 4.5))
    ax.set_title("importance stability across image batches")
    ax.set_xlabel("batch")
    ax.set_ylabel("batch")
    if len(batches):
        im = ax.imshow(corr, vmin=-1.0, vmax=1.0, cmap="viridis")
        fig.colorbar(im, ax=ax)
        for i in range(len(batches)):
            for j in range(len(batches)):
                ax.text(j, i, f"{corr[i, j]:.3f}", ha="center",
                        va="center", fontsize=7)
        ax.set_xticks(range(len(batches)), [str(b) for b in batches])
        ax.set_yticks(range(len(batches)), [str(b) for b in batches])
    fig.savefig(out_path)
    plt.close(fig)
    if len(batches) > 1:
        off = corr[~np.eye(len(batches), dtype=bool)]
        return {"min_stability_corr": f"{off.min():.6f}"}
    return {}


def generate_report(run_dir):
    """Render all figures; returns the list of files written."""
    required = [
        _spectra_path(run_dir),
        _energy_path(run_dir),
        os.path.join(run_dir, "stability.csv"),
    ]
    if not any(
        os.path.exists(os.path.join(run_dir, f"prune_{m}_rounds.csv"))
        for m in PRUNE_METHODS
    ):
        required.append(os.path.join(run_dir, "prune_<method>_rounds.csv"))
    missing = [p for p in required if not os.path.exists(p)]
    if missing:
        raise ReportInputError(
            "missing input CSVs: " + ", ".join(sorted(missing))
        )

    made = []
    summary = {}
    path = os.path.join(run_dir, "fig_spectra.svg")
    plot_spectra(run_dir, path)
    made.append(path)
    path = os.path.join(run_dir, "fig_cov_energy.svg")
    plot_cov_energy(run_dir, path)
    made.append(path)
    path = os.path.join(run_dir, "fig_map_vs_rate.svg")
    summary.update(plot_map_vs_rate(run_dir, path))
    made.append(path)
    path = os.path.join(run_dir, "fig_stability.svg")
    summary.update(plot_stability(run_dir, path))
    made.append(path)

    summary_path = os.path.join(run_dir, "report_summary.csv")
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for k in sorted(summary):
            w.writerow([k, summary[k]])
    made.append(summary_path)
    return made
