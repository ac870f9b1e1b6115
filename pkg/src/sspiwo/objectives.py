"""Monte Carlo and exact estimators of the semi-supervised variational bounds.

Every estimator works with any model exposing the latent-model protocol:

``encode(x) -> (Categorical over y, Categorical | DiagonalGaussian over z)``
    the factorized inference network q(y|x) q(z|x), batched over x;
``log_likelihood(x, y, z)``
    log p(x | y, z) for y of shape (*S, B) and z of shape (*S, B[, D]);
``log_prior(y, z)``
    log p(z) + log p(y | z) with the same shapes;
``n_classes`` and ``factorized``.

All bounds are evaluated by one kernel, :func:`bound_terms`. It draws (or
enumerates) tuples of z samples and tuples of y values, builds the table of
importance log-weights and averages ``log mean exp`` over the tuples. The
four unsupervised bounds differ only in how many y and z values a tuple
carries:

========  =======  =======
bound     y-tuple  z-tuple
========  =======  =======
elbo      1        1
iwae      k        k
piwo      1        k
ipiwo     k        1
sup       (given)  k
========  =======  =======

The categorical y is enumerated exactly whenever the number of y-tuples is
small, which is always the case for the class counts used here.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import torch

from .distributions import Categorical, DiagonalGaussian, kl_gaussian_standard
from .exceptions import (
    EnumerationBudgetError,
    EstimatorMismatchError,
    NonFiniteWeightError,
    ObjectiveError,
)


class Flavor(str, Enum):
    """Which semi-supervised composition to train with."""

    NONE = "none"
    VAE = "vae"
    PIWO = "piwo"
    IPIWO = "ipiwo"
    IWAE = "iwae"

    @classmethod
    def parse(cls, value) -> "Flavor":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {
            "none": cls.NONE, "supervised": cls.NONE, "supervisedonly": cls.NONE,
            "vae": cls.VAE, "ssvae": cls.VAE, "elbo": cls.VAE,
            "piwo": cls.PIWO, "sspiwo": cls.PIWO,
            "ipiwo": cls.IPIWO, "sipiwo": cls.IPIWO, "ssipiwo": cls.IPIWO,
            "iwae": cls.IWAE, "ssiwae": cls.IWAE,
        }
        if key not in aliases:
            raise ObjectiveError(f"unknown objective flavor {value!r}")
        return aliases[key]


class EstimatorKind(str, Enum):
    """How gradients of a bound are estimated."""

    EXACT = "exact"
    PATHWISE = "pathwise"
    SCORE_FUNCTION = "score"
    STL = "stl"
    DREG = "dreg"

    @classmethod
    def parse(cls, value) -> "EstimatorKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("-", "").replace("_", "")
        aliases = {"exact": cls.EXACT, "exactenumeration": cls.EXACT, "enumeration": cls.EXACT,
                   "pathwise": cls.PATHWISE, "reparam": cls.PATHWISE,
                   "score": cls.SCORE_FUNCTION, "scorefunction": cls.SCORE_FUNCTION,
                   "reinforce": cls.SCORE_FUNCTION, "stl": cls.STL, "dreg": cls.DREG}
        if key not in aliases:
            raise ObjectiveError(f"unknown gradient estimator {value!r}")
        return aliases[key]


@dataclass(frozen=True)
class ObjectiveSpec:
    """Bound selection and its numerical knobs.

    ``beta`` is the current KL-annealing coefficient: the prior and
    inference log-densities inside every importance log-weight are scaled
    by it, which is the usual beta-weighted KL at ``k = 1``. With the VAE
    flavor, ``k > 1`` averages k independent single-sample ELBOs.
    """

    flavor: Flavor = Flavor.VAE
    k: int = 1
    alpha: float = 1.0
    beta: float = 1.0
    n_draws: int = 1
    enum_threshold: int = 16
    y_tuple_budget: int = 4096
    tuple_budget: int = 10**6
    quadrature_nodes: int = 40

    def __post_init__(self):
        object.__setattr__(self, "flavor", Flavor.parse(self.flavor))
        if int(self.k) != self.k or self.k < 1:
            raise ObjectiveError(f"k must be a positive integer, got {self.k}")
        if self.alpha < 0:
            raise ObjectiveError(f"alpha must be non-negative, got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ObjectiveError(f"beta must lie in [0, 1], got {self.beta}")
        if self.n_draws < 1:
            raise ObjectiveError("n_draws must be >= 1")

    def with_(self, **kw) -> "ObjectiveSpec":
        return replace(self, **kw)


@dataclass(frozen=True)
class BoundEstimate:
    """A bound value in nats with its Monte Carlo standard error."""

    value: float
    std_error: float
    n_samples: int

    def __post_init__(self):
        if self.std_error < 0 or self.n_samples < 1:
            raise ValueError("std_error must be >= 0 and n_samples >= 1")

    def __float__(self):
        return self.value


@dataclass
class BoundTerms:
    """Per-datum output of :func:`bound_terms`.

    ``value`` is the estimate itself and is differentiable for the exact,
    pathwise and score-function estimators alike. ``surrogate`` has the same
    value and its gradient is the chosen estimator for the generative
    parameters (and the inference parameters too, except under DReG where
    ``surrogate_phi`` must be used for them). ``draws`` holds the per-draw
    values, detached, for standard errors.
    """

    value: torch.Tensor
    surrogate: torch.Tensor
    surrogate_phi: torch.Tensor
    draws: torch.Tensor
    log_qy: torch.Tensor
    qz: object = field(repr=False)


_TUPLE_SHAPE = {  # bound -> (y-tuple length, z-tuple length) as a function of k
    "sup": lambda k: (1, k),
    "elbo": lambda k: (1, 1),
    "iwae": lambda k: (k, k),
    "piwo": lambda k: (1, k),
    "ipiwo": lambda k: (k, 1),
}


def _batch_len(x) -> int:
    if x is None:
        return 0
    return len(x)


def _cartesian(n: int, m: int) -> torch.Tensor:
    return torch.tensor(list(itertools.product(range(n), repeat=m)), dtype=torch.long).reshape(-1, m)


def _hermite_grid(n_nodes: int, dims: int, dtype):
    nodes, weights = np.polynomial.hermite_e.hermegauss(n_nodes)
    log_w = np.log(weights) - 0.5 * math.log(2 * math.pi)
    idx = _cartesian(n_nodes, dims)
    eps = torch.as_tensor(nodes, dtype=dtype)[idx]
    return eps, torch.as_tensor(log_w, dtype=dtype)[idx].sum(-1)


def bound_terms(model, x, bound: str, spec: ObjectiveSpec, rng: torch.Generator | None,
                *, y=None, kind=None, exact: bool = False, encoded=None) -> BoundTerms:
    """Estimate one bound for a batch of observations.

    Parameters
    ----------
    bound : {"elbo", "iwae", "piwo", "ipiwo", "sup"}
        ``"sup"`` is the labeled bound with ``y`` observed; with ``k = 1``
        it is the supervised ELBO.
    exact : bool
        Replace sampling by enumeration of every z-tuple (Gauss-Hermite
        nodes for Gaussian z) weighted by its probability.
    encoded : tuple, optional
        A precomputed ``model.encode(x)`` result.
    """
    if bound not in _TUPLE_SHAPE:
        raise ObjectiveError(f"unknown bound {bound!r}")
    if not getattr(model, "factorized", True):
        raise ObjectiveError("these bounds require a factorized posterior q(y,z|x) = q(y|x) q(z|x)")
    kind = EstimatorKind.parse(kind) if kind is not None else None
    if kind is EstimatorKind.EXACT:
        exact = True
    elif exact:
        kind = EstimatorKind.EXACT
    k = spec.k
    if bound == "elbo":
        k = 1
    m_y, m_z = _TUPLE_SHAPE[bound](k)
    qy, qz = encoded if encoded is not None else model.encode(x)
    discrete_z = isinstance(qz, Categorical)
    if kind is None:
        kind = EstimatorKind.SCORE_FUNCTION if discrete_z else EstimatorKind.PATHWISE
    if kind is EstimatorKind.STL and k > 1:
        raise EstimatorMismatchError("STL applies only to single-sample ELBO objectives (k = 1)")
    if not exact and discrete_z and kind in (EstimatorKind.PATHWISE, EstimatorKind.STL, EstimatorKind.DREG):
        raise EstimatorMismatchError(f"{kind.value} needs a reparameterizable z; this model's z is discrete")
    if rng is None and not exact:
        raise ObjectiveError("a torch.Generator is required for Monte Carlo estimates")
    beta = spec.beta
    B = qy.logits.shape[0]
    dtype = qy.logits.dtype
    qz_w = qz.detach() if kind in (EstimatorKind.STL, EstimatorKind.DREG) else qz

    # ---- z tuples: values (Tz, m_z, B[, D]), log tuple weights (Tz, B) ----
    score = 0.0
    if exact:
        if discrete_z:
            n_tuples = qz.n_categories ** m_z
            _check_budget(n_tuples, spec.tuple_budget)
            z = _cartesian(qz.n_categories, m_z)[:, :, None].expand(-1, -1, B)
            log_wz = qz.log_prob(z).sum(1)
        else:
            D = qz.dim
            _check_budget(spec.quadrature_nodes ** (m_z * D), spec.tuple_budget)
            eps, log_wz = _hermite_grid(spec.quadrature_nodes, m_z * D, dtype)
            eps = eps.reshape(-1, m_z, 1, D)
            z = qz.mean + qz.stddev * eps
            log_wz = log_wz[:, None].expand(-1, B)
    else:
        S = spec.n_draws
        if discrete_z or kind is EstimatorKind.SCORE_FUNCTION:
            z = qz.sample(rng, (S, m_z))
            score = qz.log_prob(z).sum(1).unsqueeze(1)
        else:
            z = qz.rsample(rng, (S, m_z))
            if kind in (EstimatorKind.STL, EstimatorKind.DREG):
                pass  # score term of q(z) is dropped; log q uses detached parameters
        log_wz = torch.full((S, B), -math.log(S), dtype=dtype)
    Tz = z.shape[0]
    zdims = z.shape[3:]

    # ---- table of y-dependent log-weights a[tz, j, yv, b] ----
    if bound == "sup":
        yv = torch.as_tensor(y, dtype=torch.long).reshape(1, 1, 1, B)
    else:
        yv = torch.arange(qy.n_categories).reshape(1, 1, -1, 1).expand(1, 1, -1, B)
    Yv = yv.shape[2]
    y_full = yv.expand(Tz, m_z, Yv, B)
    z_full = z.unsqueeze(2).expand(Tz, m_z, Yv, B, *zdims)
    lqz = qz_w.log_prob(z).unsqueeze(2)
    a = model.log_likelihood(x, y_full, z_full) + beta * (model.log_prior(y_full, z_full) - lqz)

    # ---- y tuples: indices (Tz|1, Ty, m_y, B), log weights (Tz|1, Ty, B) ----
    log_qy = qy.log_probs
    if bound == "sup":
        y_idx = torch.zeros(1, 1, 1, B, dtype=torch.long)
        log_wy = torch.zeros(1, 1, B, dtype=dtype)
    else:
        n_y = qy.n_categories
        enumerate_y = exact or (n_y <= spec.enum_threshold and n_y ** m_y <= spec.y_tuple_budget)
        if enumerate_y:
            if exact:
                _check_budget(Tz * n_y ** m_y, spec.tuple_budget)
            ty = _cartesian(n_y, m_y)
            y_idx = ty[None, :, :, None].expand(1, -1, -1, B)
            log_wy = torch.stack([log_qy[:, ty[:, i]] for i in range(m_y)], 0).sum(0).T.unsqueeze(0)
        else:
            ys = qy.sample(rng, (Tz, m_y))
            y_idx = ys.unsqueeze(1)
            log_wy = torch.zeros(1, 1, B, dtype=dtype)
            score = score + qy.log_prob(ys).sum(1).unsqueeze(1)

    jz = torch.arange(k) if m_z == k else torch.zeros(k, dtype=torch.long)
    jy = torch.arange(k) if m_y == k else torch.zeros(k, dtype=torch.long)
    A = a[:, jz].unsqueeze(1)                                   # (Tz, 1, k, Yv, B)
    Yi = y_idx[:, :, jy].unsqueeze(3)                           # (Tz|1, Ty, k, 1, B)
    aw = torch.take_along_dim(A, Yi, dim=3).squeeze(3)          # (Tz, Ty, k, B)
    if bound == "sup":
        c = torch.zeros((), dtype=dtype)
    else:
        c = -beta * torch.take_along_dim(log_qy.T.reshape(1, 1, 1, -1, B), Yi, dim=3).squeeze(3)
    log_w = log_wz.unsqueeze(1) + log_wy                        # (Tz, Ty, B)
    # tuples with zero mass under q are dropped; their log-weights may be +-inf
    live = (log_w > -math.inf).unsqueeze(2).expand_as(aw)
    aw = torch.where(live, aw, torch.zeros((), dtype=dtype))
    if torch.is_tensor(c) and c.dim():
        c = torch.where(live, c, torch.zeros((), dtype=dtype))
    logw = aw + c
    bad = torch.isnan(logw) | (logw == math.inf)
    if bool(bad.any()):
        raise NonFiniteWeightError("non-finite importance log-weight", sample=z.detach())
    f = torch.logsumexp(logw, dim=2) - math.log(k)              # (Tz, Ty, B)
    w = log_w.exp()
    value = (w * f).sum((0, 1))
    if exact:
        draws = value.detach().unsqueeze(0)
    else:
        draws = (log_wy.exp() * f).sum(1).detach()              # (S, B)
    if torch.is_tensor(score):
        score = score.reshape(Tz, -1, B)
        surrogate = value + (w.detach() * f.detach() * (score - score.detach())).sum((0, 1))
    else:
        surrogate = value

    if kind is EstimatorKind.DREG and m_z == k and k > 1:
        wn = torch.softmax(logw, dim=2).detach()
        coef = wn * (1.0 - beta + beta * wn)
        inner = (coef * aw).sum(2) + (wn * c).sum(2)
        surrogate_phi = (w * f.detach()).sum((0, 1)) + (w.detach() * inner).sum((0, 1))
        if torch.is_tensor(score):
            surrogate_phi = surrogate_phi + (w.detach() * f.detach() * (score - score.detach())).sum((0, 1))
    else:
        surrogate_phi = surrogate
    return BoundTerms(value=value, surrogate=surrogate, surrogate_phi=surrogate_phi,
                      draws=draws, log_qy=log_qy, qz=qz)


def _check_budget(n, budget):
    if n > budget:
        raise EnumerationBudgetError(
            f"exact enumeration needs {n} tuples, above the budget of {budget}; "
            "use a Monte Carlo estimate instead")


def _estimate(draws: torch.Tensor, extra=None) -> BoundEstimate:
    """Mean and standard error over every (draw, datum) value."""
    vals = draws.detach().to(torch.float64)
    if extra is not None:
        vals = vals + extra.detach().to(torch.float64)
    vals = vals.reshape(-1)
    n = vals.numel()
    se = float(vals.std(unbiased=True) / math.sqrt(n)) if n > 1 else 0.0
    if not math.isfinite(se):
        se = 0.0
    return BoundEstimate(value=float(vals.mean()), std_error=se, n_samples=n)


# ---- single-bound estimators -------------------------------------------


def elbo_supervised(model, x, y, rng, k: int = 1, *, spec=None, exact=False, kind=None) -> BoundEstimate:
    """ELBO of log p(x, y) with z ~ q(z|x); ``k`` independent draws are averaged."""
    spec = (spec or ObjectiveSpec()).with_(k=1, n_draws=k)
    t = bound_terms(model, x, "sup", spec, rng, y=y, exact=exact, kind=kind)
    return _estimate(t.draws)


def elbo_unsupervised(model, x, rng, *, spec=None, exact=False, kind=None) -> BoundEstimate:
    """ELBO of log p(x) with y summed out under q(y|x) and z sampled."""
    spec = (spec or ObjectiveSpec()).with_(k=1)
    t = bound_terms(model, x, "elbo", spec, rng, exact=exact, kind=kind)
    return _estimate(t.draws)


def iwae(model, x, spec: ObjectiveSpec, rng, y=None, *, exact=False, kind=None) -> BoundEstimate:
    """k-sample importance weighted bound; supervised when ``y`` is given."""
    bound = "sup" if y is not None else "iwae"
    t = bound_terms(model, x, bound, spec, rng, y=y, exact=exact, kind=kind)
    return _estimate(t.draws)


def piwo(model, x, spec: ObjectiveSpec, rng, *, exact=False, kind=None) -> BoundEstimate:
    """Importance weighting over z only, with y averaged outside under q(y|x)."""
    t = bound_terms(model, x, "piwo", spec, rng, exact=exact, kind=kind)
    return _estimate(t.draws)


def ipiwo(model, x, spec: ObjectiveSpec, rng, *, exact=False, kind=None) -> BoundEstimate:
    """Importance weighting over y only, with a single z drawn outside."""
    t = bound_terms(model, x, "ipiwo", spec, rng, exact=exact, kind=kind)
    return _estimate(t.draws)


# ---- semi-supervised compositions --------------------------------------


@dataclass
class SemiSupervisedTerms:
    """Batch-level objective (to be maximized) and its gradient surrogates."""

    value: torch.Tensor
    surrogate: torch.Tensor
    surrogate_phi: torch.Tensor
    estimate: BoundEstimate
    labeled_bound: torch.Tensor | None = None
    classification: torch.Tensor | None = None
    unlabeled_bound: torch.Tensor | None = None
    kl_z: torch.Tensor | None = None


_LABELED_BOUND = {Flavor.VAE: "sup_elbo", Flavor.IPIWO: "sup_elbo",
                  Flavor.PIWO: "sup", Flavor.IWAE: "sup"}
_UNLABELED_BOUND = {Flavor.VAE: "elbo", Flavor.PIWO: "piwo",
                    Flavor.IPIWO: "ipiwo", Flavor.IWAE: "iwae"}


def _split_labeled(labeled):
    if labeled is None:
        return None, None
    x, y = labeled
    if _batch_len(x) == 0:
        return None, None
    return x, torch.as_tensor(y, dtype=torch.long)


def semi_supervised_terms(model, labeled, unlabeled, spec: ObjectiveSpec, rng, *,
                          kind=None, exact=False) -> SemiSupervisedTerms:
    """Compose the labeled and unlabeled bounds of ``spec.flavor``.

    Returns batch means: ``mean_l[bound(x, y) + alpha log q(y|x)] + mean_u[bound(x)]``.
    The labeled batch is consumed from ``rng`` before the unlabeled one.
    """
    flavor = spec.flavor
    xl, yl = _split_labeled(labeled)
    n_u = _batch_len(unlabeled)
    if xl is None and spec.alpha > 0 and flavor is not Flavor.NONE:
        raise ObjectiveError("empty labeled batch with alpha > 0")
    if flavor is Flavor.NONE:
        if xl is None:
            raise ObjectiveError("the supervised-only flavor needs a labeled batch")
        if spec.alpha == 0:
            raise ObjectiveError("the supervised-only flavor with alpha = 0 has no learning signal")
    dtype = torch.float64
    value = surrogate = surrogate_phi = torch.zeros((), dtype=dtype)
    parts = {}
    se2 = 0.0
    n_total = 0
    kl_terms = []

    if xl is not None:
        qy, qz = model.encode(xl)
        log_q_true = qy.log_prob(yl)
        cls_term = spec.alpha * log_q_true
        parts["classification"] = log_q_true.mean()
        if flavor is Flavor.NONE:
            lab = cls_term
            lab_surr = lab_surr_phi = cls_term
            est = _estimate(cls_term.unsqueeze(0))
        else:
            bound = _LABELED_BOUND[flavor]
            if bound == "sup_elbo":
                draws = spec.n_draws * (spec.k if flavor is Flavor.VAE else 1)
                lspec = spec.with_(k=1, n_draws=draws)
            else:
                lspec = spec
            t = bound_terms(model, xl, "sup", lspec, rng, y=yl, kind=kind, exact=exact,
                            encoded=(qy, qz))
            lab = t.value + cls_term
            lab_surr = t.surrogate + cls_term
            lab_surr_phi = t.surrogate_phi + cls_term
            parts["labeled_bound"] = t.value.mean()
            est = _estimate(t.draws, extra=cls_term)
            if isinstance(qz, DiagonalGaussian):
                kl_terms.append(_kl_standard(qz))
        value = value + lab.mean()
        surrogate = surrogate + lab_surr.mean()
        surrogate_phi = surrogate_phi + lab_surr_phi.mean()
        se2 += est.std_error ** 2
        n_total += est.n_samples

    if n_u and flavor is not Flavor.NONE:
        bound = _UNLABELED_BOUND[flavor]
        uspec = spec.with_(k=1, n_draws=spec.n_draws * spec.k) if flavor is Flavor.VAE else spec
        t = bound_terms(model, unlabeled, bound, uspec, rng, kind=kind, exact=exact)
        value = value + t.value.mean()
        surrogate = surrogate + t.surrogate.mean()
        surrogate_phi = surrogate_phi + t.surrogate_phi.mean()
        parts["unlabeled_bound"] = t.value.mean()
        est = _estimate(t.draws)
        se2 += est.std_error ** 2
        n_total += est.n_samples
        if isinstance(t.qz, DiagonalGaussian):
            kl_terms.append(_kl_standard(t.qz))

    if n_total == 0:
        raise ObjectiveError("both batches are empty")
    kl_z = torch.cat(kl_terms).mean().detach() if kl_terms else None
    estimate = BoundEstimate(value=float(value.detach()), std_error=math.sqrt(se2), n_samples=n_total)
    return SemiSupervisedTerms(value=value, surrogate=surrogate, surrogate_phi=surrogate_phi,
                               estimate=estimate, kl_z=kl_z, **parts)


def _kl_standard(qz):
    return kl_gaussian_standard(qz).detach()


def j_alpha(model, labeled_batch, unlabeled_batch, spec: ObjectiveSpec, rng, *, exact=False) -> BoundEstimate:
    """The classic M2 objective -J^alpha: supervised ELBO, alpha-weighted
    classification log-likelihood and unsupervised ELBO, each batch-averaged."""
    spec = spec.with_(flavor=Flavor.VAE)
    return semi_supervised_terms(model, labeled_batch, unlabeled_batch, spec, rng, exact=exact).estimate


def semi_supervised_objective(model, labeled_batch, unlabeled_batch, spec: ObjectiveSpec, rng,
                              *, exact=False) -> BoundEstimate:
    """Objective of ``spec.flavor`` on one labeled and one unlabeled batch.

    ``vae``: -J^alpha. ``piwo``: supervised IWAE + PIWO. ``ipiwo``: supervised
    ELBO + iPIWO. ``iwae``: IWAE on both sides. ``none``: alpha log q(y|x)
    only. All four variational flavors coincide at ``k = 1``.
    """
    return semi_supervised_terms(model, labeled_batch, unlabeled_batch, spec, rng, exact=exact).estimate
