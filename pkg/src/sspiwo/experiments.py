"""Experiment manifests and the flavor x supervision-rate grid runner.

A manifest is a TOML file::

    seed = 0
    out = "runs/syn-a"
    preset = "desk"
    flavors = ["none", "vae", "piwo", "ipiwo", "iwae"]
    rates = [0.005, 0.1, 1.0]
    sweep_alpha = true        # false: train once per split at ``alpha``
    alpha = 10.0

    [dataset]                 # either a synthetic generator ...
    synthetic = "syn-a"
    n_unlabeled = 2000        # any SyntheticSpec field overrides the preset
    # ... or corpus files:
    # labeled = "train.tsv"   (label<TAB>text per line)
    # test = "test.tsv"
    # unlabeled = "unlabeled.txt"
    # vocab_cap = 10000
    # max_len = 256

    [train]                   # any TrainConfig field
    anneal_steps = 300
    max_epochs = 30

Relative paths resolve against the manifest's directory.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import sys
from dataclasses import dataclass, field, fields, replace

from joblib import Parallel, delayed

from .data import SYN_A, SyntheticSpec, build_corpus_dataset, generate_synthetic
from .exceptions import ManifestError, SSPIWOError
from .objectives import Flavor, ObjectiveSpec
from .training import TrainConfig, atomic_write, cross_split_evaluate, model_factory_for

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

SYNTHETIC_PRESETS = {"syn-a": SYN_A}
DESK_TRAIN = {"anneal_steps": 300}
RESULT_COLUMNS = ("flavor", "rate", "split", "alpha", "best_dev_accuracy", "test_accuracy", "best_epoch",
                  "final_kl_z", "status")


@dataclass
class ExperimentManifest:
    dataset: dict
    flavors: list
    rates: list
    train: TrainConfig
    out: str
    seed: int = 0
    preset: str = "desk"
    sweep_alpha: bool = True
    alpha: float = 10.0
    base_dir: str = field(default=".", repr=False)

    def __post_init__(self):
        if not self.flavors:
            raise ManifestError("flavors must be non-empty")
        try:
            self.flavors = [Flavor.parse(f).value for f in self.flavors]
        except SSPIWOError as exc:
            raise ManifestError(str(exc)) from exc
        if not self.rates or any(not 0 < float(r) <= 1 for r in self.rates):
            raise ManifestError("rates must be non-empty and lie in (0, 1]")
        self.rates = [float(r) for r in self.rates]
        if self.preset not in ("desk", "paper"):
            raise ManifestError(f"unknown preset {self.preset!r}")

    def resolve(self, path: str) -> str:
        return path if os.path.isabs(path) else os.path.join(self.base_dir, path)


def load_manifest(path, **overrides) -> ExperimentManifest:
    """Parse a manifest file; ``overrides`` (seed, out, preset) win over its values."""
    try:
        with open(path, "rb") as f:
            raw = tomllib.load(f)
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    return manifest_from_dict(raw, base_dir=os.path.dirname(os.path.abspath(path)), **overrides)


def manifest_from_dict(raw: dict, base_dir: str = ".", **overrides) -> ExperimentManifest:
    raw = dict(raw)
    known = {"dataset", "flavors", "rates", "train", "out", "seed", "preset", "sweep_alpha", "alpha"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ManifestError(f"unknown manifest keys: {unknown}")
    raw.update({k: v for k, v in overrides.items() if v is not None})
    train_kw = {**DESK_TRAIN, **raw.get("train", {})}
    valid = {f.name for f in fields(TrainConfig)}
    bad = sorted(set(train_kw) - valid)
    if bad:
        raise ManifestError(f"unknown [train] keys: {bad}")
    for key in ("alpha_grid", "adam_betas"):
        if key in train_kw:
            train_kw[key] = tuple(train_kw[key])
    seed = int(raw.get("seed", 0))
    try:
        train = TrainConfig(**{**train_kw, "seed": seed})
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"invalid [train] section: {exc}") from exc
    for key in ("dataset", "flavors", "rates"):
        if key not in raw:
            raise ManifestError(f"manifest is missing {key!r}")
    return ExperimentManifest(dataset=dict(raw["dataset"]), flavors=list(raw["flavors"]),
                              rates=list(raw["rates"]), train=train, out=str(raw.get("out", "runs")),
                              seed=seed, preset=str(raw.get("preset", "desk")),
                              sweep_alpha=bool(raw.get("sweep_alpha", True)),
                              alpha=float(raw.get("alpha", 10.0)), base_dir=base_dir)


def build_dataset(manifest: ExperimentManifest):
    ds = dict(manifest.dataset)
    if "synthetic" in ds:
        name = ds.pop("synthetic")
        if name not in SYNTHETIC_PRESETS:
            raise ManifestError(f"unknown synthetic preset {name!r}")
        valid = {f.name for f in fields(SyntheticSpec)}
        bad = sorted(set(ds) - valid)
        if bad:
            raise ManifestError(f"unknown [dataset] keys: {bad}")
        return generate_synthetic(replace(SYNTHETIC_PRESETS[name], **ds))
    if "labeled" in ds and "test" in ds:
        return build_corpus_dataset(manifest.resolve(ds["labeled"]), manifest.resolve(ds["test"]),
                                    manifest.resolve(ds["unlabeled"]) if ds.get("unlabeled") else None,
                                    vocab_cap=ds.get("vocab_cap", 10_000), max_len=ds.get("max_len", 256),
                                    seed=manifest.seed)
    raise ManifestError("[dataset] needs either 'synthetic' or both 'labeled' and 'test'")


def _cell(flavor, rate, dataset, manifest: ExperimentManifest, out_dir):
    cfg = manifest.train.with_(supervision_rate=rate)
    spec = ObjectiveSpec(flavor, k=cfg.k, alpha=manifest.alpha)
    factory = model_factory_for(dataset, manifest.preset)
    root = os.path.join(out_dir, "runs", f"{flavor}", f"rate={rate:g}")
    try:
        res = cross_split_evaluate(factory, dataset, spec, cfg, sweep=manifest.sweep_alpha, run_root=root)
    except SSPIWOError as exc:
        return flavor, rate, None, f"error: {type(exc).__name__}: {exc}"
    return flavor, rate, res, "ok"


def run_experiment(manifest: ExperimentManifest, *, jobs: int = 1, out: str | None = None, log=print) -> dict:
    """Run every flavor x rate cell and write ``results.csv``, ``results.txt`` and ``summary.json``."""
    out_dir = manifest.resolve(out or manifest.out)
    os.makedirs(out_dir, exist_ok=True)
    dataset = build_dataset(manifest)
    cells = [(f, r) for f in manifest.flavors for r in manifest.rates]
    if jobs > 1:
        results = Parallel(n_jobs=jobs)(delayed(_cell)(f, r, dataset, manifest, out_dir) for f, r in cells)
    else:
        results = []
        for f, r in cells:
            results.append(_cell(f, r, dataset, manifest, out_dir))
            if log:
                res, status = results[-1][2], results[-1][3]
                log(f"{f:>6} @ {r:g}: " + (res.formatted() if res else status))
    grid = {(f, r): (res, status) for f, r, res, status in results}
    atomic_write(os.path.join(out_dir, "results.csv"), results_csv(grid, manifest))
    table = results_table(grid, manifest)
    atomic_write(os.path.join(out_dir, "results.txt"), table)
    summary = {"cells": [{"flavor": f, "rate": r, "status": s,
                          "mean": res.mean if res else None, "std": res.std if res else None,
                          "mean_log10_alpha": res.mean_log10_alpha if res and manifest.sweep_alpha else None}
                         for (f, r), (res, s) in grid.items()],
               "bayes_accuracy": dataset.bayes_accuracy}
    atomic_write(os.path.join(out_dir, "summary.json"),
                 json.dumps(summary, indent=2, sort_keys=True, default=_json_float) + "\n")
    return {"grid": grid, "table": table, "out": out_dir, "failed": [k for k, (_, s) in grid.items() if s != "ok"]}


def _json_float(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def _fmt(v, digits=6):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return f"{v:.{digits}f}" if isinstance(v, float) else str(v)


def results_csv(grid, manifest) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for f in manifest.flavors:
        for r in manifest.rates:
            res, status = grid[(f, r)]
            if res is None:
                w.writerow([f, f"{r:g}", "", "", "", "", "", "", status])
                continue
            for split, sweep in enumerate(res.runs):
                b = sweep.best
                w.writerow([f, f"{r:g}", split, f"{sweep.best_alpha:g}", _fmt(b.best_dev_accuracy),
                            _fmt(b.test_accuracy), b.best_epoch, _fmt(b.final_kl_z), status])
    return buf.getvalue()


def results_table(grid, manifest) -> str:
    """Accuracy grid in ``mean(std)`` percent, best semi-supervised cell per
    rate marked ``*``, followed by mean log10(alpha) per flavor."""
    names = {"none": "None", "vae": "VAE", "piwo": "PIWO", "ipiwo": "iPIWO", "iwae": "IWAE"}
    header = ["flavor"] + [f"{100 * r:g}%" for r in manifest.rates]
    best = {}
    for r in manifest.rates:
        scored = [(grid[(f, r)][0].mean, f) for f in manifest.flavors if f != "none" and grid[(f, r)][0]]
        if scored:
            best[r] = max(scored, key=lambda t: (t[0], -manifest.flavors.index(t[1])))[1]
    rows = []
    for f in manifest.flavors:
        row = [names[f]]
        for r in manifest.rates:
            res, status = grid[(f, r)]
            row.append((res.formatted() + ("*" if best.get(r) == f else "")) if res else "failed")
        rows.append(row)
    lines = ["Test accuracy (%), mean(std) over 5 dev-split rotations; * = best semi-supervised", ""]
    lines += _align([header] + rows)
    if manifest.sweep_alpha:
        lines += ["", "Mean log10(alpha) of the selected alpha, averaged over all rates and rotations", ""]
        arows = [["flavor", "all rates"] + [f"{100 * r:g}%" for r in manifest.rates]]
        for f in manifest.flavors:
            per = [grid[(f, r)][0] for r in manifest.rates]
            alphas = [a for res in per if res for a in res.alphas]
            overall = (sum(math.log10(a) for a in alphas) / len(alphas)) if alphas and min(alphas) > 0 else None
            arows.append([names[f], _fmt(overall, 2)] + [_fmt(res.mean_log10_alpha, 2) if res else "" for res in per])
        lines += _align(arows)
    return "\n".join(lines) + "\n"


def _align(rows) -> list:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return ["  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip()
            for r in rows]
