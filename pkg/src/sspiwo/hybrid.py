"""A six-parameter model with a Gaussian z and a binary y.

Small enough that exact expectations are available by Gauss-Hermite
quadrature over z and enumeration over y, yet continuous in z so that
pathwise, STL and DReG gradients apply. Used to check gradient estimators
for bias.

Generative side::

    z ~ N(0, 1)
    y | z ~ Categorical(softmax([0, prior_slope * z + prior_bias]))
    x | y, z ~ N(z + emission_shift * y, 1)

Inference side, shared by every observation::

    q(y) = Categorical(softmax([0, q_logit]))
    q(z) = N(q_mean, softplus(q_raw_scale))
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .distributions import Categorical, DiagonalGaussian, LOG_2PI, standard_normal_log_prob

THETA = ("prior_slope", "prior_bias", "emission_shift")
PHI = ("q_mean", "q_raw_scale", "q_logit")


class HybridModel:
    factorized = True
    n_classes = 2

    def __init__(self, q_mean=0.2, q_raw_scale=0.0, q_logit=0.3,
                 prior_slope=0.8, prior_bias=-0.2, emission_shift=1.0):
        values = dict(q_mean=q_mean, q_raw_scale=q_raw_scale, q_logit=q_logit,
                      prior_slope=prior_slope, prior_bias=prior_bias, emission_shift=emission_shift)
        self.params = {k: torch.tensor(float(v), dtype=torch.float64, requires_grad=True)
                       for k, v in values.items()}

    @classmethod
    def conjugate(cls, x_obs: float, q_logit: float = 0.3):
        """Configuration whose posterior factorizes and equals q exactly.

        With ``prior_slope = emission_shift = 0``, y is independent of (x, z)
        and z | x ~ N(x/2, 1/2); q is set to those.
        """
        scale = math.sqrt(0.5)
        raw = math.log(math.expm1(scale))
        return cls(q_mean=x_obs / 2, q_raw_scale=raw, q_logit=q_logit,
                   prior_slope=0.0, prior_bias=q_logit, emission_shift=0.0)

    def theta_parameters(self):
        return {k: self.params[k] for k in THETA}

    def phi_parameters(self):
        return {k: self.params[k] for k in PHI}

    def parameters(self):
        return dict(self.params)

    def encode(self, x):
        x = torch.as_tensor(x, dtype=torch.float64)
        B = x.shape[0]
        p = self.params
        logits = torch.stack([torch.zeros((), dtype=torch.float64), p["q_logit"]])
        qy = Categorical(logits.expand(B, 2))
        mean = p["q_mean"].reshape(1, 1).expand(B, 1)
        std = F.softplus(p["q_raw_scale"]).reshape(1, 1).expand(B, 1)
        return qy, DiagonalGaussian(mean, std)

    def log_likelihood(self, x, y, z):
        x = torch.as_tensor(x, dtype=torch.float64)
        mean = z[..., 0] + self.params["emission_shift"] * y.to(torch.float64)
        return -0.5 * (x - mean).pow(2) - 0.5 * LOG_2PI

    def log_prior(self, y, z):
        p = self.params
        z0 = z[..., 0]
        logit1 = p["prior_slope"] * z0 + p["prior_bias"]
        logits = torch.stack([torch.zeros_like(logit1), logit1], -1)
        log_py = torch.log_softmax(logits, -1).gather(-1, y.unsqueeze(-1)).squeeze(-1)
        return standard_normal_log_prob(z) + log_py
