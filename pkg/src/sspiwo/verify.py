"""Verification suites run by ``sspiwo verify``.

Each suite evaluates invariants on committed fixtures plus freshly drawn
random models and returns :class:`Check` records: the worst observed
violation and its tolerance.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch

from .distributions import child_seed, make_rng
from .gradients import finite_difference_check, gradient_statistics, grad, objective_terms
from .hybrid import HybridModel
from .objectives import Flavor, ObjectiveSpec, bound_terms, semi_supervised_terms
from .tabular import (
    TabularModel,
    exact_bound_expectation,
    exact_elbo_identity_check,
    exact_kl_terms,
    exact_limits,
    exact_log_px,
    single_latent_identity_residual,
    _log_joint,
)

IDENTITY_TOL = 1e-10
COLLAPSE_TOL = 1e-12
SUITES = ("identities", "bounds", "gradients")
HYBRID_OBJECTIVES = ("iwae", "piwo", "ipiwo")
HYBRID_ESTIMATORS = ("pathwise", "dreg", "score")


@dataclass
class Check:
    suite: str
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.suite}/{self.name}: {self.value:.3e} (tolerance {self.tolerance:.1e}) {self.detail}".rstrip()


def _check(suite, name, value, tol, detail="", higher_is_worse=True):
    passed = value <= tol if higher_is_worse else value >= tol
    return Check(suite, name, float(value), float(tol), bool(passed), detail)


def random_models(n: int, seed: int, sizes=(2, 3)):
    """``n`` random tabular models with |Y|, |Z|, |X| drawn from ``sizes``."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        n_y, n_z, n_x = (int(rng.choice(sizes)) for _ in range(3))
        out.append(TabularModel.random(rng, n_y=n_y, n_z=n_z, n_x=n_x))
    return out


# ----------------------------------------------------------------- identities

def identities(models, seed: int = 0) -> list:
    """ELBO gap identities, limit decompositions, KL ordering and k=1 collapse."""
    rng = np.random.default_rng(seed)
    eq4 = eq5 = app_a = limits = kl_order = collapse = 0.0
    for m in models:
        for x in range(m.n_x):
            eq5 = max(eq5, exact_elbo_identity_check(m, x))
            for y in range(m.n_y):
                eq4 = max(eq4, exact_elbo_identity_check(m, x, y))
            lj = _log_joint(m.tables(), x).ravel()
            app_a = max(app_a, single_latent_identity_residual(lj, rng.dirichlet(np.ones(lj.size))))
            lim = exact_limits(m, x)
            limits = max(limits, abs(lim["piwo"] - lim["piwo_decomposed"]),
                         abs(lim["ipiwo"] - lim["ipiwo_decomposed"]))
            kl = exact_kl_terms(m, x, 0)
            kl_order = max(kl_order, kl.KL_y - kl.KL_yz, kl.KL_z - kl.KL_yz,
                           -min(kl.KL_yz, kl.KL_y, kl.KL_z, kl.KL_z_given_xy))
        collapse = max(collapse, k1_collapse_residual(m))
    s = "identities"
    return [
        _check(s, "supervised ELBO gap (L = log p(x,y) - KL_z|xy)", eq4, IDENTITY_TOL),
        _check(s, "unsupervised ELBO gap (U = log p(x) - KL_yz)", eq5, IDENTITY_TOL),
        _check(s, "single-latent ELBO identity, non-factorized q", app_a, IDENTITY_TOL),
        _check(s, "PIWO/iPIWO limits computed two ways", limits, IDENTITY_TOL),
        _check(s, "KL ordering KL_yz >= KL_y, KL_z >= 0", kl_order, IDENTITY_TOL),
        _check(s, "k=1 collapse of all variational flavors", collapse, COLLAPSE_TOL),
    ]


def k1_collapse_residual(model, alpha: float = 1.0) -> float:
    """Spread of the exact semi-supervised objective across flavors at k = 1."""
    xs = torch.arange(model.n_x)
    ys = torch.arange(model.n_x) % model.n_y
    vals = []
    for fl in (Flavor.VAE, Flavor.PIWO, Flavor.IPIWO, Flavor.IWAE):
        t = semi_supervised_terms(model, (xs, ys), xs, ObjectiveSpec(fl, k=1, alpha=alpha), None, exact=True)
        vals.append(float(t.value.detach()))
    return max(vals) - min(vals)


# --------------------------------------------------------------------- bounds

def bound_table(model, x: int, ks=(1, 2, 3, 4)) -> dict:
    """Exact bound expectations over ``ks`` plus the oracle reference values."""
    lim = exact_limits(model, x)
    out = {"k": list(ks), "log_px": lim["log_px"], "limit_y": lim["piwo"], "limit_z": lim["ipiwo"],
           "elbo": exact_bound_expectation(model, "vae", x)}
    for name in ("iwae", "piwo", "ipiwo"):
        out[name] = [exact_bound_expectation(model, ObjectiveSpec(name, k=k), x) for k in ks]
    return out


def bounds(models, factorizing, ks=(1, 2, 3, 4)) -> list:
    """Sandwich, monotonicity, limits on factorizing posteriors, and
    agreement of the torch kernel with the numpy oracle."""
    sandwich = mono = limit = kernel = 0.0
    for m in models:
        for x in range(m.n_x):
            b = bound_table(m, x, ks)
            iw, pw, ipw = np.array(b["iwae"]), np.array(b["piwo"]), np.array(b["ipiwo"])
            sandwich = max(sandwich, b["elbo"] - iw.min(), iw.max() - b["log_px"],
                           pw.max() - b["limit_y"], ipw.max() - b["limit_z"])
            if len(ks) > 1:
                mono = max([mono] + [float(np.max(-np.diff(v))) for v in (iw, pw, ipw)])
            for name, vals in (("iwae", iw), ("piwo", pw), ("ipiwo", ipw)):
                for k, v in zip(ks, vals):
                    t = bound_terms(m, torch.tensor([x]), name, ObjectiveSpec(name, k=k), None, exact=True)
                    kernel = max(kernel, abs(float(t.value.detach()[0]) - v))
    for m in factorizing:
        for x in range(m.n_x):
            log_px = exact_log_px(m, x)
            for name in ("piwo", "ipiwo"):
                for k in ks:
                    limit = max(limit, abs(exact_bound_expectation(m, ObjectiveSpec(name, k=k), x) - log_px))
    s = "bounds"
    return [
        _check(s, "ELBO <= IWAE_k <= log p(x); PIWO_k <= log p(x) - KL_y; iPIWO_k <= log p(x) - KL_z",
               sandwich, IDENTITY_TOL),
        _check(s, "IWAE, PIWO, iPIWO non-decreasing in k", mono, IDENTITY_TOL),
        _check(s, "PIWO_k = iPIWO_k = log p(x) under a factorizing posterior", limit, IDENTITY_TOL),
        _check(s, "torch exact kernel matches numpy oracle", kernel, IDENTITY_TOL),
    ]


# ------------------------------------------------------------------ gradients

def random_hybrid(seed: int) -> HybridModel:
    r = np.random.default_rng(seed)
    return HybridModel(q_mean=r.normal(0, 0.5), q_raw_scale=r.normal(0, 0.3), q_logit=r.normal(0, 0.5),
                       prior_slope=r.normal(0, 0.8), prior_bias=r.normal(0, 0.5), emission_shift=r.normal(1, 0.5))


HYBRID_X = (0.7, -0.4)


def exact_fd_error(models, flavors=("vae", "piwo", "ipiwo", "iwae"), k: int = 3) -> float:
    worst = 0.0
    for m in models:
        xs = torch.arange(m.n_x)
        lab = (xs, xs % m.n_y)
        for fl in flavors:
            spec = ObjectiveSpec(fl, k=k, alpha=1.5, beta=0.8)
            err = finite_difference_check(
                m, lambda: objective_terms("semi", m, (lab, xs), spec, "exact", None)[0])
            worst = max(worst, err)
    return worst


def unbiasedness(n_seeds: int = 20, n_samples: int = 100_000, n_groups: int = 100, seed: int = 0,
                 objectives=HYBRID_OBJECTIVES, estimators=HYBRID_ESTIMATORS, k: int = 3) -> dict:
    """Fraction of gradient coordinates whose Monte Carlo mean lies within
    3 standard errors of the exact (quadrature) gradient, per estimator."""
    x = torch.tensor(HYBRID_X, dtype=torch.float64)
    hits = {(o, e): [] for o in objectives for e in estimators}
    for s in range(n_seeds):
        model = random_hybrid(child_seed(seed, s))
        for obj in objectives:
            spec = ObjectiveSpec(obj, k=k)
            exact = grad(obj, model, x, spec, "exact", None).flat()
            for est in estimators:
                mean, se, _ = gradient_statistics(obj, model, x, spec, est, n_samples=n_samples,
                                                  n_groups=n_groups, seed=child_seed(seed, s, 1))
                hits[(obj, est)].extend((np.abs(mean - exact) <= 3 * se).tolist())
    return {key: float(np.mean(v)) for key, v in hits.items()}


def zero_variance_spread(seed: int = 0) -> float:
    """Worst disagreement at q = posterior, where every importance weight is constant.

    STL and DReG drop the score term of q, so their inference-parameter
    gradient is exactly the (zero) exact gradient draw by draw. Pathwise
    keeps that term and is not zero-variance there, but shares the
    generative gradient with STL and DReG on the same draws.
    """
    model = HybridModel.conjugate(x_obs=0.7)
    x = torch.tensor([0.7], dtype=torch.float64)
    worst = 0.0
    for obj, kinds in (("elbo", ("stl", "dreg")), ("iwae", ("dreg",)), ("piwo", ("dreg",)),
                       ("ipiwo", ("dreg",))):
        spec = ObjectiveSpec(obj, k=3)
        exact = grad(obj, model, x, spec, "exact", None)
        path = grad(obj, model, x, spec, "pathwise", make_rng(seed))
        for kd in kinds:
            rep = grad(obj, model, x, spec, kd, make_rng(seed))
            for name, g in rep.phi.items():
                worst = max(worst, float(np.max(np.abs(g - exact.phi[name]))))
            for name, g in rep.theta.items():
                worst = max(worst, float(np.max(np.abs(g - path.theta[name]))))
    return worst


def gradients(models, *, n_seeds=20, n_samples=100_000, seed=0) -> list:
    s = "gradients"
    checks = [_check(s, "exact-enumeration gradient vs central differences (relative)",
                     exact_fd_error(models), 1e-6)]
    hyb = random_hybrid(seed)
    x = torch.tensor(HYBRID_X, dtype=torch.float64)
    spec = ObjectiveSpec("piwo", k=5)
    pinned = finite_difference_check(hyb, lambda: objective_terms("piwo", hyb, x, spec, "pathwise", make_rng(7))[0])
    checks.append(_check(s, "pinned-seed PIWO(k=5) pathwise gradient vs central differences", pinned, 1e-4))
    checks.append(_check(s, "STL/DReG exact at q = posterior, generative part shared with pathwise", zero_variance_spread(seed), 1e-12))
    cover = unbiasedness(n_seeds=n_seeds, n_samples=n_samples, seed=seed)
    for (obj, est), frac in cover.items():
        checks.append(_check(s, f"{est} on {obj}: coordinates within 3 SE of exact", frac, 0.95,
                             f"({n_seeds} seeds, {n_samples} samples)", higher_is_worse=False))
    return checks


# ---------------------------------------------------------------------- driver

def run_suite(name: str, *, fixtures=(), n_models: int = 100, seed: int = 0,
              n_seeds: int = 20, n_samples: int = 100_000) -> list:
    if name == "all":
        return [c for n in SUITES for c in run_suite(n, fixtures=fixtures, n_models=n_models, seed=seed,
                                                      n_seeds=n_seeds, n_samples=n_samples)]
    models = list(fixtures) + random_models(n_models, seed)
    if name == "identities":
        return identities(models, seed)
    if name == "bounds":
        rng = np.random.default_rng([seed, 1])
        fact = [TabularModel.factorizing(rng) for _ in range(max(1, n_models // 10))]
        return bounds(models, fact)
    if name == "gradients":
        return gradients(list(fixtures) + random_models(min(n_models, 5), seed), n_seeds=n_seeds,
                         n_samples=n_samples, seed=seed)
    raise ValueError(f"unknown suite {name!r}; choose from {SUITES + ('all',)}")


def report_json(checks) -> str:
    def clean(c):
        d = asdict(c)
        # NaN and inf are not valid JSON
        return {k: (None if isinstance(v, float) and not math.isfinite(v) else v) for k, v in d.items()}

    body = {"passed": all(c.passed for c in checks), "checks": [clean(c) for c in checks]}
    return json.dumps(body, indent=2, sort_keys=True, allow_nan=False) + "\n"
