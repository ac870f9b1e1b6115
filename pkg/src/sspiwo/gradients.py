"""Gradient estimators for the bounds and a finite-difference harness.

Five estimators are available through :class:`EstimatorKind`:

* ``EXACT``: autograd through an exactly enumerated expectation
  (discrete z, or Gauss-Hermite nodes for a Gaussian z);
* ``PATHWISE``: reparameterized z, autograd through the sample;
* ``SCORE_FUNCTION``: REINFORCE term for every sampled variable;
* ``STL``: pathwise with the inference parameters detached inside
  log q(z|x); only for single-sample bounds;
* ``DREG``: doubly reparameterized importance-weighted gradient for the
  inference parameters, plain importance-weighted pathwise gradient for the
  generative ones.

A categorical y is enumerated under q(y|x), so no score term is needed for
it unless the class count forces sampling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .distributions import child_seed, make_rng
from .exceptions import GradientCheckError, ObjectiveError
from .objectives import (
    EstimatorKind,
    ObjectiveSpec,
    bound_terms,
    semi_supervised_terms,
)

__all__ = ["EstimatorKind", "GradientReport", "grad", "objective_terms", "apply_gradients",
           "finite_difference_check", "gradient_statistics", "named_parameters"]


@dataclass
class GradientReport:
    """Gradient of the (maximized) objective, split into generative (theta)
    and inference (phi) blocks."""

    theta: dict
    phi: dict
    value: float
    max_rel_fd_error: float | None = None
    norms: dict = field(default_factory=dict)

    def flat(self) -> np.ndarray:
        parts = [np.ravel(v) for v in self.theta.values()] + [np.ravel(v) for v in self.phi.values()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def names(self) -> list:
        out = []
        for block, d in (("theta", self.theta), ("phi", self.phi)):
            for k, v in d.items():
                n = int(np.size(v))
                out += [f"{block}.{k}"] if n == 1 else [f"{block}.{k}[{i}]" for i in range(n)]
        return out


def named_parameters(model) -> dict:
    if hasattr(model, "named_parameters"):
        return dict(model.named_parameters())
    params = model.parameters()
    return dict(params) if isinstance(params, dict) else {str(i): p for i, p in enumerate(params)}


def _blocks(model):
    theta = dict(model.theta_parameters())
    phi = dict(model.phi_parameters())
    shared = {id(p) for p in theta.values()} & {id(p) for p in phi.values()}
    return theta, phi, shared


def objective_terms(objective: str, model, batches, spec: ObjectiveSpec, kind, rng):
    """Evaluate ``objective`` and return ``(value, surrogate, surrogate_phi)``, batch-averaged.

    ``objective`` is ``"semi"`` (``batches = (labeled, unlabeled)``), ``"sup"``
    (``batches = (x, y)``) or one of ``"elbo"``, ``"iwae"``, ``"piwo"``,
    ``"ipiwo"`` (``batches = x``).
    """
    kind = EstimatorKind.parse(kind)
    exact = kind is EstimatorKind.EXACT
    if objective == "semi":
        labeled, unlabeled = batches
        t = semi_supervised_terms(model, labeled, unlabeled, spec, rng, kind=kind, exact=exact)
        return t.value, t.surrogate, t.surrogate_phi
    if objective == "sup":
        x, y = batches
        t = bound_terms(model, x, "sup", spec, rng, y=y, kind=kind, exact=exact)
    elif objective in ("elbo", "iwae", "piwo", "ipiwo"):
        t = bound_terms(model, batches, objective, spec, rng, kind=kind, exact=exact)
    else:
        raise ObjectiveError(f"unknown objective {objective!r}")
    return t.value.mean(), t.surrogate.mean(), t.surrogate_phi.mean()


def _autograd(out, params):
    if not params:
        return []
    gs = torch.autograd.grad(out, params, allow_unused=True, retain_graph=True)
    return [torch.zeros_like(p) if g is None else g for p, g in zip(params, gs)]


def _split_grads(model, surrogate, surrogate_phi):
    theta, phi, shared = _blocks(model)
    g_theta = dict(zip(theta, _autograd(surrogate, list(theta.values()))))
    phi_own = {k: p for k, p in phi.items() if id(p) not in shared}
    g_phi = dict(zip(phi_own, _autograd(surrogate_phi, list(phi_own.values()))))
    by_id = {id(theta[k]): g for k, g in g_theta.items()}
    return theta, phi, g_theta, {k: g_phi.get(k, by_id.get(id(p))) for k, p in phi.items()}


def grad(objective: str, model, batches, spec: ObjectiveSpec, estimator_kind, rng) -> GradientReport:
    """Estimate the gradient of ``objective`` with the requested estimator.

    Parameters shared between the generative and inference blocks (tied
    embeddings) receive the plain surrogate gradient under every estimator.
    """
    value, surrogate, surrogate_phi = objective_terms(objective, model, batches, spec, estimator_kind, rng)
    _, _, g_theta, g_phi = _split_grads(model, surrogate, surrogate_phi)
    theta = {k: g.detach().cpu().numpy().astype(np.float64) for k, g in g_theta.items()}
    phi = {k: g.detach().cpu().numpy().astype(np.float64) for k, g in g_phi.items()}
    norms = {"theta": float(np.sqrt(sum(np.sum(v ** 2) for v in theta.values()))),
             "phi": float(np.sqrt(sum(np.sum(v ** 2) for v in phi.values())))}
    report = GradientReport(theta=theta, phi=phi, value=float(value.detach()), norms=norms)
    for block in (theta, phi):
        for k, v in block.items():
            if not np.all(np.isfinite(v)):
                raise FloatingPointError(f"non-finite gradient in {k}")
    return report


def apply_gradients(model, surrogate, surrogate_phi, sign: float = -1.0) -> None:
    """Write ``sign * gradient`` into ``.grad`` of every parameter (for optimizers that minimize)."""
    theta, phi, g_theta, g_phi = _split_grads(model, surrogate, surrogate_phi)
    for params, grads in ((theta, g_theta), (phi, g_phi)):
        for k, p in params.items():
            p.grad = (sign * grads[k]).detach().to(p.dtype)


def gradient_statistics(objective, model, batches, spec: ObjectiveSpec, kind, *,
                        n_samples: int, n_groups: int = 50, seed: int = 0):
    """Mean and standard error of a stochastic gradient estimator.

    The ``n_samples`` draws are split into ``n_groups`` groups; each group's
    mean gradient comes from one autograd pass, and the standard error is
    taken over group means. Returns ``(mean, std_error, names)``.
    """
    if n_samples % n_groups:
        raise ValueError("n_samples must be divisible by n_groups")
    per = spec.with_(n_draws=n_samples // n_groups)
    rows = []
    names = None
    for g in range(n_groups):
        rep = grad(objective, model, batches, per, kind, make_rng(child_seed(seed, g)))
        rows.append(rep.flat())
        names = names or rep.names()
    rows = np.asarray(rows)
    return rows.mean(0), rows.std(0, ddof=1) / np.sqrt(n_groups), names


def finite_difference_check(model, objective_closure, step: float = 1e-5, tolerance: float | None = None,
                            *, max_params: int = 1000, n_probe: int = 64, seed: int = 0,
                            floor: float = 1e-3) -> float:
    """Worst relative error between central differences and autograd.

    ``objective_closure()`` must return a scalar tensor and be deterministic
    (re-seed any sampling inside it). Every scalar parameter is probed, or
    ``n_probe`` random ones when the model has more than ``max_params``.
    The relative error of a coordinate is
    ``|fd - ad| / max(|fd|, |ad|, floor)``.
    """
    if not 1e-7 <= step <= 1e-3:
        raise ValueError("step must lie in [1e-7, 1e-3]")
    params = [p for p in named_parameters(model).values() if p.requires_grad]
    total = sum(p.numel() for p in params)
    if total == 0:
        return 0.0
    out = objective_closure()
    again = objective_closure()
    if float(out.detach()) != float(again.detach()):
        raise GradientCheckError("objective closure is not deterministic: two evaluations differ "
                                 f"({float(out.detach()):.17g} vs {float(again.detach()):.17g})")
    analytic = _autograd(out, params)
    coords = [(i, j) for i, p in enumerate(params) for j in range(p.numel())]
    if total > max_params:
        rng = np.random.default_rng(seed)
        pick = rng.choice(len(coords), size=min(n_probe, len(coords)), replace=False)
        coords = [coords[c] for c in sorted(pick)]
    worst = 0.0
    where = None
    for i, j in coords:
        flat = params[i].data.view(-1)
        orig = flat[j].item()
        with torch.no_grad():
            flat[j] = orig + step
            f_plus = float(objective_closure().detach())
            flat[j] = orig - step
            f_minus = float(objective_closure().detach())
            flat[j] = orig
        fd = (f_plus - f_minus) / (2 * step)
        ad = float(analytic[i].reshape(-1)[j])
        err = abs(fd - ad) / max(abs(fd), abs(ad), floor)
        if err > worst:
            worst, where = err, (i, j, fd, ad)
    if tolerance is not None and worst > tolerance:
        i, j, fd, ad = where
        raise GradientCheckError(
            f"finite differences disagree at parameter {i} entry {j}: fd={fd:.6g}, autograd={ad:.6g}, "
            f"relative error {worst:.3g} > {tolerance:g}")
    return worst
