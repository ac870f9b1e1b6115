"""Static SVG figures built from run-directory CSV files.

Figures are byte-reproducible: the SVG hash salt is fixed and no creation
date is embedded.
"""

from __future__ import annotations

import csv
import io
import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .exceptions import ManifestError  # noqa: E402
from .training import atomic_write  # noqa: E402

BOUND_COLUMNS = ("k", "elbo", "iwae", "piwo", "ipiwo", "log_px", "limit_y", "limit_z")
RESULT_COLUMNS = ("flavor", "rate", "split", "test_accuracy", "status")
METRIC_COLUMNS = ("epoch", "beta", "mean_kl_z")


def read_csv(path, required) -> list:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestError(f"{path}: missing column {missing[0]!r}")
        return list(reader)


def _save(fig, path) -> None:
    buf = io.BytesIO()
    with matplotlib.rc_context({"svg.hashsalt": "sspiwo", "svg.fonttype": "none"}):
        fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write(path, buf.getvalue())


def plot_bounds(csv_path, out_path) -> None:
    """Bound value against k with the oracle limits as horizontal lines."""
    rows = read_csv(csv_path, BOUND_COLUMNS)
    k = [int(r["k"]) for r in rows]
    col = lambda name: [float(r[name]) for r in rows]  # noqa: E731
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, color in (("iwae", "C0"), ("piwo", "C1"), ("ipiwo", "C2")):
        ax.plot(k, col(name), marker="o", color=color, label=name.upper() if name == "iwae" else
                {"piwo": "PIWO", "ipiwo": "iPIWO"}[name])
    ax.plot(k, col("elbo"), linestyle=":", color="gray", label="ELBO")
    for name, color, label in (("log_px", "C0", "log p(x)"), ("limit_y", "C1", "log p(x) - KL_y"),
                               ("limit_z", "C2", "log p(x) - KL_z")):
        ax.axhline(float(rows[0][name]), color=color, linestyle="--", linewidth=0.8, label=label)
    ax.set_xlabel("k")
    ax.set_ylabel("nats")
    ax.set_xticks(k)
    ax.legend(fontsize=7)
    _save(fig, out_path)


def plot_accuracy(csv_path, out_path) -> None:
    """Mean test accuracy against supervision rate, one line per flavor."""
    rows = [r for r in read_csv(csv_path, RESULT_COLUMNS) if r["status"] == "ok"]
    if not rows:
        raise ManifestError(f"{csv_path}: no successful cells to plot")
    flavors = sorted({r["flavor"] for r in rows})
    fig, ax = plt.subplots(figsize=(6, 4))
    for fl in flavors:
        by_rate = {}
        for r in rows:
            if r["flavor"] == fl:
                by_rate.setdefault(float(r["rate"]), []).append(float(r["test_accuracy"]))
        rates = sorted(by_rate)
        ax.plot(rates, [100 * sum(by_rate[x]) / len(by_rate[x]) for x in rates], marker="o", label=fl)
    ax.set_xscale("log")
    ax.set_xlabel("supervision rate")
    ax.set_ylabel("test accuracy (%)")
    ax.legend(fontsize=7)
    _save(fig, out_path)


def plot_anneal(metric_paths, out_path, root) -> None:
    """Annealing coefficient and mean KL_z per epoch for each run."""
    fig, (ax_b, ax_k) = plt.subplots(2, 1, figsize=(6, 5), sharex=True)
    for path in metric_paths:
        rows = read_csv(path, METRIC_COLUMNS)
        ep = [int(r["epoch"]) for r in rows]
        label = os.path.relpath(os.path.dirname(path), root)
        ax_b.plot(ep, [float(r["beta"]) for r in rows], linewidth=0.8)
        ax_k.plot(ep, [float(r["mean_kl_z"]) for r in rows], linewidth=0.8, label=label)
    ax_b.set_ylabel("beta")
    ax_k.set_ylabel("mean KL_z (nats)")
    ax_k.set_xlabel("epoch")
    if len(metric_paths) <= 10:
        ax_k.legend(fontsize=6)
    _save(fig, out_path)


def plot_run_dir(run_dir) -> list:
    """Write every figure the contents of ``run_dir`` support; returns the paths."""
    if not os.path.isdir(run_dir):
        raise ManifestError(f"{run_dir}: not a directory")
    written = []
    bounds = os.path.join(run_dir, "bounds.csv")
    if os.path.exists(bounds):
        written.append(os.path.join(run_dir, "bounds_vs_k.svg"))
        plot_bounds(bounds, written[-1])
    results = os.path.join(run_dir, "results.csv")
    if os.path.exists(results):
        written.append(os.path.join(run_dir, "accuracy_vs_rate.svg"))
        plot_accuracy(results, written[-1])
    metrics = sorted(os.path.join(d, "metrics.csv") for d, _, files in os.walk(run_dir) if "metrics.csv" in files)
    if metrics:
        written.append(os.path.join(run_dir, "anneal_trace.svg"))
        plot_anneal(metrics, written[-1], run_dir)
    if not written:
        raise ManifestError(f"{run_dir}: no bounds.csv, results.csv or metrics.csv to plot")
    return written
