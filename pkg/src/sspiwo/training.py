"""Semi-supervised training: mixed batches, KL annealing, Adam, early
stopping on dev accuracy, alpha selection and 5-split rotation."""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import statistics
import tempfile
import time
from dataclasses import asdict, dataclass, field, replace
from functools import partial

import numpy as np
import torch
from joblib import Parallel, delayed

from .data import N_SPLITS, Dataset, supervision_subset
from .distributions import child_seed, make_rng
from .exceptions import NonFiniteWeightError, ObjectiveError, TrainingDivergedError
from .gradients import apply_gradients
from .neural import NeuralModel, TokenBatch, preset, save_checkpoint
from .objectives import EstimatorKind, Flavor, ObjectiveSpec, semi_supervised_terms


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and protocol settings.

    ``anneal_steps = 0`` disables annealing. ``reuse_labeled`` also feeds the
    labeled training inputs to the unlabeled term. ``demote`` moves
    unselected labeled examples to the unlabeled pool instead of discarding
    them. ``unlabeled_batch_size`` defaults to ``batch_size``.
    """

    batch_size: int = 32
    unlabeled_batch_size: int | None = None
    lr: float = 4e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    anneal_steps: int = 3000
    patience: int = 4
    alpha_grid: tuple = (1.0, 10.0, 100.0, 1000.0)
    k: int = 5
    max_epochs: int = 30
    seed: int = 0
    supervision_rate: float = 1.0
    reuse_labeled: bool = True
    demote: bool = False
    dev_split: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.k < 1 or self.max_epochs < 1:
            raise ValueError("batch_size, k and max_epochs must be positive")
        if self.lr <= 0 or self.adam_eps <= 0 or self.anneal_steps < 0 or self.patience < 0:
            raise ValueError("lr and adam_eps must be positive; anneal_steps and patience non-negative")
        if not self.alpha_grid or any(a < 0 for a in self.alpha_grid):
            raise ValueError("alpha grid must be non-empty and non-negative")
        if not 0 < self.supervision_rate <= 1:
            raise ValueError("supervision_rate must lie in (0, 1]")
        if not 0 <= self.dev_split < N_SPLITS:
            raise ValueError(f"dev_split must lie in [0, {N_SPLITS})")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


def anneal_beta(step: int, anneal_steps: int) -> float:
    """Linear ramp from 0 at step 0 to 1 at ``anneal_steps``, then constant."""
    if anneal_steps == 0:
        return 1.0
    return min(1.0, step / anneal_steps)


def default_estimator(flavor) -> EstimatorKind:
    """STL for single-sample ELBO flavors, DReG for importance-weighted ones."""
    flavor = Flavor.parse(flavor)
    if flavor in (Flavor.VAE, Flavor.NONE):
        return EstimatorKind.STL
    return EstimatorKind.DREG


@dataclass
class RunResult:
    flavor: str
    alpha: float
    dev_split: int
    supervision_rate: float
    dev_accuracy: list
    best_dev_accuracy: float
    best_epoch: int
    test_accuracy: float
    bound_trace: list
    kl_trace: list
    final_kl_z: float | None
    steps: int
    n_labeled: int
    n_unlabeled: int
    estimator: str
    wall_clock: float = field(default=0.0, compare=False)

    def record(self) -> dict:
        """Deterministic summary (no traces, no wall-clock)."""
        keys = ("flavor", "alpha", "dev_split", "supervision_rate", "best_dev_accuracy", "best_epoch",
                "test_accuracy", "final_kl_z", "steps", "n_labeled", "n_unlabeled", "estimator")
        return {k: getattr(self, k) for k in keys} | {"dev_accuracy": self.dev_accuracy}


def make_model(vocab_size: int, n_classes: int, seed: int, preset_name: str = "desk", **overrides):
    return NeuralModel(preset(preset_name, vocab_size, n_classes, **overrides), seed=seed)


def model_factory_for(dataset: Dataset, preset_name: str = "desk", **overrides):
    """Picklable ``seed -> NeuralModel`` factory sized for ``dataset``."""
    return partial(make_model, dataset.vocab_size, dataset.n_classes, preset_name=preset_name, **overrides)


class _Cycler:
    """Endless reshuffled pass over ``n`` indices in batches of ``size``."""

    def __init__(self, n: int, size: int, rng: np.random.Generator):
        self.n, self.size, self.rng = n, min(size, n), rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self.pos + self.size > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        out = self.order[self.pos:self.pos + self.size]
        self.pos += self.size
        return out


def _accuracy(model, seqs, labels) -> float:
    if len(seqs) == 0:
        return float("nan")
    pred, _ = model.classify(TokenBatch.from_sequences(seqs))
    return float(np.mean(pred == labels))


def prepare_fold(dataset: Dataset, config: TrainConfig):
    """Apply the supervision rate and the dev split; returns the training pools and dev data."""
    ds = supervision_subset(dataset, config.supervision_rate, config.seed, demote=config.demote,
                            protect_split=config.dev_split)
    train_idx, dev_idx = ds.fold(config.dev_split)
    lab = [ds.labeled[i] for i in train_idx]
    y = ds.labels[train_idx]
    unl = list(ds.unlabeled) + (lab if config.reuse_labeled else [])
    dev = [ds.labeled[i] for i in dev_idx]
    return lab, y, unl, dev, ds.labels[dev_idx]


def train(model, dataset: Dataset, objective_spec: ObjectiveSpec, config: TrainConfig,
          estimator_kind=None, *, run_dir=None, log=None) -> RunResult:
    """Train ``model`` in place and return the run record.

    One labeled and one unlabeled batch are drawn per optimizer step. An
    epoch is ``ceil(max(n_labeled, n_unlabeled) / batch_size)`` steps for
    every flavor. Training stops once more than ``patience`` consecutive
    epochs fail to raise the dev accuracy; the best-dev parameters are then
    restored and evaluated on the test set once.
    """
    started = time.perf_counter()
    spec = objective_spec
    flavor = spec.flavor
    if flavor is Flavor.NONE and spec.alpha == 0:
        raise ObjectiveError("the supervised-only flavor with alpha = 0 has no learning signal")
    kind = EstimatorKind.parse(estimator_kind) if estimator_kind is not None else default_estimator(flavor)
    lab, y, unl, dev, dev_y = prepare_fold(dataset, config)
    if not lab:
        raise ObjectiveError("no labeled training examples")
    use_unlabeled = flavor is not Flavor.NONE and len(unl) > 0
    ub = config.unlabeled_batch_size or config.batch_size
    steps_per_epoch = math.ceil(max(len(lab), len(unl)) / config.batch_size)

    torch.manual_seed(child_seed(config.seed, 0))
    np_rng = np.random.default_rng(child_seed(config.seed, 1))
    lab_cycle = _Cycler(len(lab), config.batch_size, np_rng)
    unl_cycle = _Cycler(len(unl), ub, np_rng) if use_unlabeled else None
    rng = make_rng(child_seed(config.seed, 2))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, betas=tuple(config.adam_betas), eps=config.adam_eps)
    y_t = torch.as_tensor(y)

    dev_acc, bound_trace, kl_trace, rows = [], [], [], []
    best_acc, best_epoch, best_state, bad = -1.0, -1, None, 0
    step, last_finite = 0, None
    epoch_kl = []
    for epoch in range(config.max_epochs):
        model.train()
        epoch_bounds, epoch_kl = [], []
        for _ in range(steps_per_epoch):
            beta = anneal_beta(step, config.anneal_steps)
            li = lab_cycle.next()
            xl = TokenBatch.from_sequences([lab[i] for i in li])
            ui = unl_cycle.next() if use_unlabeled else None
            xu = TokenBatch.from_sequences([unl[i] for i in ui]) if use_unlabeled else None
            try:
                terms = semi_supervised_terms(model, (xl, y_t[li]), xu, spec.with_(beta=beta), rng, kind=kind)
            except NonFiniteWeightError as exc:
                raise TrainingDivergedError(f"non-finite importance weight at step {step}",
                                            {"step": step, "labeled_ids": li.tolist(),
                                             "unlabeled_ids": None if ui is None else ui.tolist(),
                                             "last_finite_loss": last_finite}) from exc
            value = float(terms.value.detach())
            if not math.isfinite(value):
                raise TrainingDivergedError(f"loss became {value} at step {step}",
                                            {"step": step, "labeled_ids": li.tolist(),
                                             "unlabeled_ids": None if ui is None else ui.tolist(),
                                             "last_finite_loss": last_finite})
            last_finite = -value
            opt.zero_grad(set_to_none=True)
            apply_gradients(model, terms.surrogate, terms.surrogate_phi)
            opt.step()
            step += 1
            bound_trace.append(value)
            epoch_bounds.append(value)
            if terms.kl_z is not None:
                kl = float(terms.kl_z)
                kl_trace.append(kl)
                epoch_kl.append(kl)
        acc = _accuracy(model, dev, dev_y)
        dev_acc.append(acc)
        improved = acc > best_acc
        if improved:
            best_acc, best_epoch, bad = acc, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            bad += 1
        rows.append({"epoch": epoch, "steps": step, "beta": anneal_beta(step, config.anneal_steps),
                     "mean_bound": float(np.mean(epoch_bounds)),
                     "mean_kl_z": float(np.mean(epoch_kl)) if epoch_kl else float("nan"),
                     "dev_accuracy": acc, "best": int(improved)})
        if log is not None:
            log(f"epoch {epoch}: bound {rows[-1]['mean_bound']:.3f} kl_z {rows[-1]['mean_kl_z']:.3f} "
                f"dev {acc:.4f}")
        if bad > config.patience:
            break

    model.load_state_dict(best_state)
    test_acc = _accuracy(model, dataset.test, dataset.test_labels)
    result = RunResult(
        flavor=flavor.value, alpha=float(spec.alpha), dev_split=config.dev_split,
        supervision_rate=config.supervision_rate, dev_accuracy=dev_acc, best_dev_accuracy=best_acc,
        best_epoch=best_epoch, test_accuracy=test_acc, bound_trace=bound_trace, kl_trace=kl_trace,
        final_kl_z=float(np.mean(epoch_kl)) if epoch_kl else None, steps=step, n_labeled=len(lab),
        n_unlabeled=len(unl) if use_unlabeled else 0, estimator=kind.value,
        wall_clock=time.perf_counter() - started)
    if run_dir is not None:
        write_run(run_dir, result, spec, config, rows, model)
    return result


# ------------------------------------------------------------------ sweeps

@dataclass
class SweepResult:
    best_alpha: float
    best: RunResult
    runs: dict


def alpha_sweep(model_factory, dataset: Dataset, objective_spec: ObjectiveSpec, config: TrainConfig,
                estimator_kind=None, *, trainer=None, run_root=None) -> SweepResult:
    """One full training per alpha in ``config.alpha_grid``; the best dev
    accuracy wins, ties going to the smaller alpha.

    With ``run_root`` each run writes its artifacts to ``run_root/alpha=<a>``.
    """
    trainer = trainer or train
    runs = {}
    for alpha in sorted(config.alpha_grid):
        model = model_factory(config.seed)
        kw = {"run_dir": os.path.join(run_root, f"alpha={alpha:g}")} if run_root else {}
        runs[float(alpha)] = trainer(model, dataset, objective_spec.with_(alpha=float(alpha)), config,
                                     estimator_kind, **kw)
    best_alpha = max(runs, key=lambda a: (runs[a].best_dev_accuracy, -a))
    return SweepResult(best_alpha, runs[best_alpha], runs)


@dataclass
class CrossSplitResult:
    accuracies: list
    alphas: list
    runs: list = field(repr=False)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def std(self) -> float:
        return statistics.stdev(self.accuracies) if len(self.accuracies) > 1 else 0.0

    @property
    def mean_log10_alpha(self) -> float:
        return statistics.fmean(math.log10(a) for a in self.alphas) if all(a > 0 for a in self.alphas) \
            else float("nan")

    def formatted(self) -> str:
        """Percent accuracy as ``mean(std)``."""
        return f"{100 * self.mean:.2f}({100 * self.std:.2f})"


def _split_job(split, model_factory, dataset, objective_spec, config, estimator_kind, sweep, trainer, run_root):
    cfg = config.with_(dev_split=split, seed=child_seed(config.seed, 100 + split))
    root = os.path.join(run_root, f"split={split}") if run_root else None
    if sweep:
        return alpha_sweep(model_factory, dataset, objective_spec, cfg, estimator_kind, trainer=trainer,
                           run_root=root)
    model = model_factory(cfg.seed)
    kw = {"run_dir": root} if root else {}
    run = (trainer or train)(model, dataset, objective_spec, cfg, estimator_kind, **kw)
    return SweepResult(float(objective_spec.alpha), run, {float(objective_spec.alpha): run})


def cross_split_evaluate(model_factory, dataset: Dataset, objective_spec: ObjectiveSpec, config: TrainConfig,
                         estimator_kind=None, *, sweep: bool = True, trainer=None, jobs: int = 1,
                         run_root=None) -> CrossSplitResult:
    """Train once per dev-split choice (5 runs) and summarize test accuracy.

    With ``sweep`` the alpha grid is searched inside every rotation; the
    test accuracy of the selected run is reported. Runs are independent and
    may execute in ``jobs`` worker processes.
    """
    args = (model_factory, dataset, objective_spec, config, estimator_kind, sweep, trainer, run_root)
    if jobs > 1:
        results = Parallel(n_jobs=jobs)(delayed(_split_job)(s, *args) for s in range(N_SPLITS))
    else:
        results = [_split_job(s, *args) for s in range(N_SPLITS)]
    return CrossSplitResult([r.best.test_accuracy for r in results], [r.best_alpha for r in results], results)


# --------------------------------------------------------------- artifacts

METRIC_COLUMNS = ("epoch", "steps", "beta", "mean_bound", "mean_kl_z", "dev_accuracy", "best")


def atomic_write(path, data) -> None:
    """Write text or bytes to ``path`` through a temporary file and rename."""
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    with os.fdopen(fd, "wb") as f:
        f.write(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def write_run(run_dir, result: RunResult, spec: ObjectiveSpec, config: TrainConfig, rows, model) -> None:
    """Run artifacts: ``config.json``, ``metrics.csv``, ``result.json`` and ``checkpoint.npz``."""
    os.makedirs(run_dir, exist_ok=True)
    cfg = {"objective": {"flavor": spec.flavor.value, "k": spec.k, "alpha": spec.alpha},
           "train": asdict(config)}
    atomic_write(os.path.join(run_dir, "config.json"), json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=METRIC_COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    atomic_write(os.path.join(run_dir, "metrics.csv"), buf.getvalue())
    atomic_write(os.path.join(run_dir, "result.json"), json.dumps(result.record(), indent=2, sort_keys=True) + "\n")
    if isinstance(model, NeuralModel):
        save_checkpoint(model, os.path.join(run_dir, "checkpoint.npz"))
