"""Fully enumerable finite latent-variable models and their exact oracle.

A :class:`TabularModel` holds five conditional probability tables over
finite ``x``, ``y`` and ``z``. The generative side factorizes as
``p(z) p(y|z) p(x|y,z)`` and the inference side as ``q(y|x) q(z|x)``.
Tables are stored as unconstrained raw arrays mapped through a softmax over
their last axis, so the same object can be trained by gradient descent.

The ``exact_*`` functions below compute every quantity by brute-force
summation in numpy, independently of the torch estimators in
:mod:`sspiwo.objectives`. They are the reference the rest of the package is
checked against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.special import logsumexp

from .distributions import Categorical
from .exceptions import EnumerationBudgetError, FixtureError, ZeroEvidenceError

THETA_TABLES = ("prior_z", "gen_y_given_z", "gen_x_given_yz")
PHI_TABLES = ("inf_y_given_x", "inf_z_given_x")
TABLES = THETA_TABLES + PHI_TABLES

FORMAT_TAG = "sspiwo-tabular"
FORMAT_VERSION = 1
ROW_SUM_TOL = 1e-12
DEFAULT_BUDGET = 10**6


def _log(p):
    with np.errstate(divide="ignore"):
        return np.log(p)


class TabularModel:
    """Enumerable generative and inference model over finite supports.

    Parameters are raw float64 tensors; ``requires_grad`` is switched on so
    the objectives can be differentiated directly.
    """

    factorized = True

    def __init__(self, prior_z, gen_y_given_z, gen_x_given_yz, inf_y_given_x, inf_z_given_x):
        raw = dict(
            prior_z=prior_z,
            gen_y_given_z=gen_y_given_z,
            gen_x_given_yz=gen_x_given_yz,
            inf_y_given_x=inf_y_given_x,
            inf_z_given_x=inf_z_given_x,
        )
        self.params = {
            k: torch.as_tensor(np.asarray(v, dtype=np.float64)).clone().requires_grad_(True)
            for k, v in raw.items()
        }
        n_z, n_y, n_x = self.n_z, self.n_y, self.n_x
        expected = dict(
            prior_z=(n_z,),
            gen_y_given_z=(n_z, n_y),
            gen_x_given_yz=(n_y, n_z, n_x),
            inf_y_given_x=(n_x, n_y),
            inf_z_given_x=(n_x, n_z),
        )
        for name, shape in expected.items():
            if tuple(self.params[name].shape) != shape:
                raise FixtureError(
                    f"table {name} has shape {tuple(self.params[name].shape)}, expected {shape}",
                    invariant="shape",
                )

    # ---- construction -------------------------------------------------

    @classmethod
    def from_probabilities(cls, prior_z, gen_y_given_z, gen_x_given_yz, inf_y_given_x, inf_z_given_x):
        tables = [np.asarray(t, dtype=np.float64) for t in
                  (prior_z, gen_y_given_z, gen_x_given_yz, inf_y_given_x, inf_z_given_x)]
        for name, t in zip(TABLES, tables):
            check_table(name, t)
        return cls(*[_log(t) for t in tables])

    @classmethod
    def random(cls, rng: np.random.Generator, n_y=2, n_z=2, n_x=3, scale=1.5):
        """Draw raw logits i.i.d. from N(0, scale^2)."""
        return cls(
            rng.normal(0, scale, n_z),
            rng.normal(0, scale, (n_z, n_y)),
            rng.normal(0, scale, (n_y, n_z, n_x)),
            rng.normal(0, scale, (n_x, n_y)),
            rng.normal(0, scale, (n_x, n_z)),
        )

    @classmethod
    def uniform(cls, n_y=2, n_z=2, n_x=2):
        return cls(np.zeros(n_z), np.zeros((n_z, n_y)), np.zeros((n_y, n_z, n_x)),
                   np.zeros((n_x, n_y)), np.zeros((n_x, n_z)))

    @classmethod
    def factorizing(cls, rng: np.random.Generator, n_y=2, n_z=2, n_x1=2, n_x2=2, scale=1.5):
        """Model whose true posterior factorizes, with q set to it.

        ``x`` is the pair ``(x1, x2)`` flattened as ``x1 * n_x2 + x2``, with
        ``x1`` emitted from ``y`` alone and ``x2`` from ``z`` alone, and
        ``p(y|z)`` constant in ``z``.
        """
        py = _softmax(rng.normal(0, scale, n_y))
        pz = _softmax(rng.normal(0, scale, n_z))
        px1 = _softmax(rng.normal(0, scale, (n_y, n_x1)))
        px2 = _softmax(rng.normal(0, scale, (n_z, n_x2)))
        px = np.einsum("ya,zb->yzab", px1, px2).reshape(n_y, n_z, n_x1 * n_x2)
        n_x = n_x1 * n_x2
        model = cls.from_probabilities(
            pz, np.tile(py, (n_z, 1)), px, np.full((n_x, n_y), 1.0 / n_y), np.full((n_x, n_z), 1.0 / n_z)
        )
        return model.with_posterior_q()

    def with_posterior_q(self) -> "TabularModel":
        """Copy of the model with q(y|x), q(z|x) set to the exact posterior marginals."""
        t = self.tables()
        qy = np.empty((self.n_x, self.n_y))
        qz = np.empty((self.n_x, self.n_z))
        for x in range(self.n_x):
            post = exact_posterior(self, x)
            qy[x], qz[x] = post.y, post.z
        return TabularModel.from_probabilities(
            t["prior_z"], t["gen_y_given_z"], t["gen_x_given_yz"], qy, qz)

    def copy(self) -> "TabularModel":
        return TabularModel(*[self.params[k].detach().numpy().copy() for k in TABLES])

    # ---- shapes and tables --------------------------------------------

    @property
    def n_z(self) -> int:
        return self.params["prior_z"].shape[0]

    @property
    def n_y(self) -> int:
        return self.params["gen_y_given_z"].shape[1]

    @property
    def n_x(self) -> int:
        return self.params["gen_x_given_yz"].shape[2]

    n_classes = n_y

    def tables(self) -> dict:
        """Normalized probability tables as float64 numpy arrays."""
        out = {}
        for k, v in self.params.items():
            raw = v.detach().numpy()
            out[k] = _softmax(raw)
        return out

    def theta_parameters(self) -> dict:
        return {k: self.params[k] for k in THETA_TABLES}

    def phi_parameters(self) -> dict:
        return {k: self.params[k] for k in PHI_TABLES}

    def parameters(self) -> dict:
        return dict(self.params)

    # ---- the latent-model protocol used by the objectives ---------------

    def encode(self, x):
        x = torch.as_tensor(x, dtype=torch.long)
        return (Categorical(self.params["inf_y_given_x"][x]),
                Categorical(self.params["inf_z_given_x"][x]))

    def log_likelihood(self, x, y, z):
        """log p(x | y, z) with y, z of shape (..., B) and x of shape (B,)."""
        x = torch.as_tensor(x, dtype=torch.long)
        table = torch.log_softmax(self.params["gen_x_given_yz"], -1)
        return table[y, z, x.expand(torch.broadcast_shapes(y.shape, z.shape))]

    def log_prior(self, y, z):
        """log p(z) + log p(y | z)."""
        lpz = torch.log_softmax(self.params["prior_z"], -1)
        lpyz = torch.log_softmax(self.params["gen_y_given_z"], -1)
        return lpz[z] + lpyz[z, y]

    def kl_z(self, x) -> torch.Tensor:
        """KL[q(z|x) || p(z)] per datum, the discrete analogue of the Gaussian KL."""
        _, qz = self.encode(x)
        lpz = torch.log_softmax(self.params["prior_z"], -1)
        p = qz.probs
        return torch.where(p > 0, p * (qz.log_probs - lpz), torch.zeros_like(p)).sum(-1)

    def __repr__(self):
        return f"TabularModel(n_y={self.n_y}, n_z={self.n_z}, n_x={self.n_x})"


def _softmax(a):
    a = np.asarray(a, dtype=np.float64)
    m = np.max(a, axis=-1, keepdims=True)
    e = np.exp(a - m)
    return e / e.sum(-1, keepdims=True)


def check_table(name, table):
    table = np.asarray(table, dtype=np.float64)
    if not np.all(np.isfinite(table)) or np.any(table < 0):
        raise FixtureError(f"table {name} has negative or non-finite entries", invariant="non-negative")
    sums = np.atleast_1d(table.sum(-1))
    bad = np.argwhere(np.abs(sums - 1.0) > ROW_SUM_TOL)
    if bad.size:
        row = tuple(int(i) for i in bad[0])
        raise FixtureError(
            f"row-sum invariant violated: table {name} row {row} sums to "
            f"{float(sums[tuple(bad[0])]):.17g}",
            invariant="row-sum",
        )


# ---- plain-text fixture format ----------------------------------------
#
#   format sspiwo-tabular 1
#   dims <n_y> <n_z> <n_x>
#   table <name> <shape...>
#   <one line per row of the last axis, row-major, 17 significant digits>
#
# Lines starting with '#' are comments.


def save_model(model: TabularModel, path) -> None:
    lines = [f"# tabular latent-variable model; rows are distributions over the last axis",
             f"format {FORMAT_TAG} {FORMAT_VERSION}",
             f"dims {model.n_y} {model.n_z} {model.n_x}"]
    for name, table in model.tables().items():
        lines.append(f"table {name} " + " ".join(str(s) for s in table.shape))
        for row in table.reshape(-1, table.shape[-1]):
            lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path) -> TabularModel:
    text = Path(path).read_text(encoding="utf-8")
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not rows or rows[0][:2] != ["format", FORMAT_TAG]:
        raise FixtureError(f"{path}: missing '{FORMAT_TAG}' format header", invariant="schema")
    if int(rows[0][2]) != FORMAT_VERSION:
        raise FixtureError(f"{path}: unsupported version {rows[0][2]}", invariant="schema")
    if rows[1][0] != "dims" or len(rows[1]) != 4:
        raise FixtureError(f"{path}: expected 'dims n_y n_z n_x'", invariant="schema")
    n_y, n_z, n_x = (int(v) for v in rows[1][1:])
    expected = dict(prior_z=(n_z,), gen_y_given_z=(n_z, n_y), gen_x_given_yz=(n_y, n_z, n_x),
                    inf_y_given_x=(n_x, n_y), inf_z_given_x=(n_x, n_z))
    tables = {}
    i = 2
    while i < len(rows):
        head = rows[i]
        if head[0] != "table" or head[1] not in expected:
            raise FixtureError(f"{path}: unexpected line {' '.join(head)!r}", invariant="schema")
        name, shape = head[1], tuple(int(s) for s in head[2:])
        if shape != expected[name]:
            raise FixtureError(f"{path}: table {name} shape {shape} != {expected[name]}", invariant="shape")
        n_rows = int(np.prod(shape[:-1])) if len(shape) > 1 else 1
        body = rows[i + 1:i + 1 + n_rows]
        try:
            values = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
        except ValueError as exc:
            raise FixtureError(f"{path}: table {name}: {exc}", invariant="schema") from None
        if values.shape != (n_rows, shape[-1]):
            raise FixtureError(f"{path}: table {name} has malformed rows", invariant="shape")
        tables[name] = values.reshape(shape)
        i += 1 + n_rows
    missing = set(TABLES) - set(tables)
    if missing:
        raise FixtureError(f"{path}: missing tables {sorted(missing)}", invariant="schema")
    return TabularModel.from_probabilities(*[tables[k] for k in TABLES])


def fixture_path(name: str = "fix_a") -> Path:
    return Path(__file__).parent / "fixtures" / f"{name}.txt"


def load_fixture(name: str = "fix_a") -> TabularModel:
    return load_model(fixture_path(name))


# ---- exact oracle -------------------------------------------------------


def _log_joint(t, x):
    """log p(x, y, z) as a (Y, Z) array."""
    return (_log(t["prior_z"])[None, :] + _log(t["gen_y_given_z"]).T
            + _log(t["gen_x_given_yz"][:, :, x]))


def exact_log_px(model: TabularModel, x: int) -> float:
    """log sum_{y,z} p(z) p(y|z) p(x|y,z)."""
    return float(logsumexp(_log_joint(model.tables(), x)))


def exact_log_pxy(model: TabularModel, x: int, y: int) -> float:
    return float(logsumexp(_log_joint(model.tables(), x)[y]))


@dataclass(frozen=True)
class Posterior:
    joint: np.ndarray  # (Y, Z)
    y: np.ndarray
    z: np.ndarray
    log_px: float


def exact_posterior(model: TabularModel, x: int) -> Posterior:
    lj = _log_joint(model.tables(), x)
    log_px = logsumexp(lj)
    if not np.isfinite(log_px):
        raise ZeroEvidenceError(f"p(x={x}) = 0 under the model")
    joint = np.exp(lj - log_px)
    return Posterior(joint=joint, y=joint.sum(1), z=joint.sum(0), log_px=float(log_px))


def kl_discrete(q, p) -> float:
    """KL[q || p] with 0 log 0 = 0; +inf if q puts mass where p has none."""
    q = np.asarray(q, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    mask = q > 0
    if np.any(p[mask] == 0):
        return math.inf
    return float(np.sum(q[mask] * (np.log(q[mask]) - np.log(p[mask]))))


@dataclass(frozen=True)
class KLTerms:
    """The four posterior gaps of one observation, in nats."""

    KL_yz: float
    KL_z_given_xy: float
    KL_y: float
    KL_z: float

    @property
    def infinite(self) -> tuple:
        """Names of the terms that diverged because q left the support of p."""
        return tuple(k for k in ("KL_yz", "KL_z_given_xy", "KL_y", "KL_z")
                     if math.isinf(getattr(self, k)))


def exact_kl_terms(model: TabularModel, x: int, y: int) -> KLTerms:
    t = model.tables()
    post = exact_posterior(model, x)
    qy, qz = t["inf_y_given_x"][x], t["inf_z_given_x"][x]
    q_joint = np.outer(qy, qz)
    row = post.joint[y]
    if row.sum() == 0:
        kl_zxy = math.inf if qz.sum() > 0 else 0.0
    else:
        kl_zxy = kl_discrete(qz, row / row.sum())
    return KLTerms(
        KL_yz=kl_discrete(q_joint.ravel(), post.joint.ravel()),
        KL_z_given_xy=kl_zxy,
        KL_y=kl_discrete(qy, post.y),
        KL_z=kl_discrete(qz, post.z),
    )


def _expect(q, f):
    """sum_i q_i f_i skipping q_i == 0 terms."""
    q = np.asarray(q)
    f = np.asarray(f)
    mask = q > 0
    return float(np.sum(q[mask] * f[mask]))


def exact_elbo(model: TabularModel, x: int, y: int | None = None, beta: float = 1.0) -> float:
    """Exact ELBO, supervised if ``y`` is given (z is the only latent)."""
    t = model.tables()
    lj = _log_joint(t, x)
    ll = _log(t["gen_x_given_yz"][:, :, x])
    lprior = lj - ll
    qy, qz = t["inf_y_given_x"][x], t["inf_z_given_x"][x]
    if y is None:
        lq = _log(qy)[:, None] + _log(qz)[None, :]
        q = np.outer(qy, qz)
        return _expect(q, ll + beta * (lprior - lq))
    return _expect(qz, ll[y] + beta * (lprior[y] - _log(qz)))


def single_latent_identity_residual(log_joint, q) -> float:
    """|E_q[log p(x, h) - log q(h)] - (log p(x) - KL[q || p(h|x)])| for one latent h.

    ``log_joint`` holds log p(x, h) over every state of h for a fixed x and
    ``q`` is any distribution over those states (not necessarily factorized).
    """
    log_joint = np.asarray(log_joint, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    log_px = float(logsumexp(log_joint))
    elbo = _expect(q, log_joint - _log(q))
    return abs(elbo - (log_px - kl_discrete(q, np.exp(log_joint - log_px))))


def exact_elbo_identity_check(model: TabularModel, x: int, y: int | None = None) -> float:
    """|E_q[log p - log q] - (log-evidence - KL)| with exact expectations."""
    kl = exact_kl_terms(model, x, 0 if y is None else y)
    if y is None:
        return abs(exact_elbo(model, x) - (exact_log_px(model, x) - kl.KL_yz))
    return abs(exact_elbo(model, x, y) - (exact_log_pxy(model, x, y) - kl.KL_z_given_xy))


def _bound_kind(objective, y):
    flavor = getattr(objective, "flavor", objective)
    flavor = getattr(flavor, "value", flavor)
    if flavor in ("none",):
        raise ValueError("the supervised-only flavor has no variational bound")
    if y is not None:
        return "sup_iwae" if flavor in ("iwae", "piwo") else "sup_elbo"
    return {"vae": "elbo", "iwae": "iwae", "piwo": "piwo", "ipiwo": "ipiwo"}[flavor]


def exact_bound_expectation(model: TabularModel, objective, x: int, y: int | None = None,
                            budget: int = DEFAULT_BUDGET) -> float:
    """Exact expectation of a bound by enumerating every sample tuple.

    ``objective`` is an :class:`~sspiwo.objectives.ObjectiveSpec` (its
    ``flavor``, ``k`` and ``beta`` are used) or a bare flavor string with
    ``k`` then taken as 1. With ``y`` given, the labeled-side bound of the
    flavor is returned: the supervised IWAE for IWAE/PIWO, the supervised
    ELBO for VAE/iPIWO.
    """
    kind = _bound_kind(objective, y)
    k = int(getattr(objective, "k", 1))
    beta = float(getattr(objective, "beta", 1.0))
    if kind in ("elbo", "sup_elbo"):
        return exact_elbo(model, x, y, beta=beta)

    t = model.tables()
    ll = _log(t["gen_x_given_yz"][:, :, x])                      # (Y, Z)
    lprior = _log(t["prior_z"])[None, :] + _log(t["gen_y_given_z"]).T
    lqy, lqz = _log(t["inf_y_given_x"][x]), _log(t["inf_z_given_x"][x])
    qy, qz = t["inf_y_given_x"][x], t["inf_z_given_x"][x]

    if kind == "sup_iwae":
        lw = ll[y] + beta * (lprior[y] - lqz)                   # over z
        return _tuple_expectation(qz, lw, k, budget)
    if kind == "iwae":
        with np.errstate(invalid="ignore"):  # inf - inf only on zero-mass tuples, skipped below
            lw = (ll + beta * (lprior - lqy[:, None] - lqz[None, :])).ravel()
        return _tuple_expectation(np.outer(qy, qz).ravel(), lw, k, budget)
    if kind == "piwo":
        if model.n_y * model.n_z ** k > budget:
            raise EnumerationBudgetError(_budget_msg(model.n_y * model.n_z ** k, budget))
        total = 0.0
        for yv in range(model.n_y):
            if qy[yv] == 0:
                continue
            lw = ll[yv] + beta * (lprior[yv] - lqy[yv] - lqz)
            total += qy[yv] * _tuple_expectation(qz, lw, k, budget)
        return total
    if kind == "ipiwo":
        if model.n_z * model.n_y ** k > budget:
            raise EnumerationBudgetError(_budget_msg(model.n_z * model.n_y ** k, budget))
        total = 0.0
        for zv in range(model.n_z):
            if qz[zv] == 0:
                continue
            lw = ll[:, zv] + beta * (lprior[:, zv] - lqy - lqz[zv])
            total += qz[zv] * _tuple_expectation(qy, lw, k, budget)
        return total
    raise AssertionError(kind)


def _budget_msg(n, budget):
    return (f"exact enumeration needs {n} tuples, above the budget of {budget}; "
            "use a Monte Carlo estimate instead")


def _tuple_expectation(probs, logw, k, budget):
    """E over i.i.d. k-tuples of log mean exp of the per-element log-weights."""
    n = len(probs)
    if n ** k > budget:
        raise EnumerationBudgetError(_budget_msg(n ** k, budget))
    support = np.flatnonzero(np.asarray(probs) > 0)
    tuples = np.array(list(itertools.product(support, repeat=k)), dtype=np.int64).reshape(-1, k)
    p = np.prod(np.asarray(probs)[tuples], axis=1)
    vals = logsumexp(np.asarray(logw)[tuples], axis=1) - math.log(k)
    return float(np.sum(p * vals))


def exact_limits(model: TabularModel, x: int) -> dict:
    """Large-k targets of the partially weighted bounds, each computed two ways.

    ``piwo`` is ``log p(x) - KL[q(y|x)||p(y|x)]`` and ``piwo_decomposed`` the
    same quantity as ``E_q(y|x)[log p(x|y)] - KL[q(y|x)||p(y)]``; likewise for
    ``ipiwo`` with the roles of y and z swapped.
    """
    t = model.tables()
    post = exact_posterior(model, x)
    kl = exact_kl_terms(model, x, 0)
    qy, qz = t["inf_y_given_x"][x], t["inf_z_given_x"][x]
    pz, pyz, px = t["prior_z"], t["gen_y_given_z"], t["gen_x_given_yz"][:, :, x]

    p_y = pz @ pyz                                   # p(y)
    p_zy = (pz[:, None] * pyz) / p_y[None, :]        # p(z|y), (Z, Y)
    p_x_given_y = np.einsum("zy,yz->y", p_zy, px)
    p_x_given_z = np.einsum("zy,yz->z", pyz, px)
    return dict(
        log_px=post.log_px,
        piwo=post.log_px - kl.KL_y,
        piwo_decomposed=_expect(qy, _log(p_x_given_y)) - kl_discrete(qy, p_y),
        ipiwo=post.log_px - kl.KL_z,
        ipiwo_decomposed=_expect(qz, _log(p_x_given_z)) - kl_discrete(qz, pz),
    )
