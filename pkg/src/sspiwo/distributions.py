"""Categorical and diagonal Gaussian distributions over torch tensors.

Both classes are immutable value objects holding batched parameters. The
last axis of ``logits`` indexes categories; the last axis of ``mean`` and
``stddev`` indexes latent dimensions. Sampling always goes through an
explicit :class:`torch.Generator` so that streams are reproducible.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import DistributionError

LOG_2PI = math.log(2.0 * math.pi)


class Categorical:
    """Categorical distribution parameterized by unnormalized logits.

    Parameters
    ----------
    logits : torch.Tensor, shape (..., n)
        Unnormalized log-probabilities in nats. Entries may be ``-inf``
        for categories with zero mass, as long as each row keeps at least
        one finite entry.
    """

    def __init__(self, logits: torch.Tensor):
        logits = torch.as_tensor(logits)
        if not torch.is_floating_point(logits):
            logits = logits.to(torch.get_default_dtype())
        if logits.dim() == 0:
            raise DistributionError("Categorical logits need at least one axis")
        self.logits = logits
        self.log_probs = logits - torch.logsumexp(logits, dim=-1, keepdim=True)

    @property
    def n_categories(self) -> int:
        return self.logits.shape[-1]

    @property
    def batch_shape(self) -> torch.Size:
        return self.logits.shape[:-1]

    @property
    def probs(self) -> torch.Tensor:
        return self.log_probs.exp()

    def detach(self) -> "Categorical":
        return Categorical(self.logits.detach())

    def log_prob(self, value) -> torch.Tensor:
        value = torch.as_tensor(value, device=self.logits.device)
        if value.dtype.is_floating_point:
            raise DistributionError("Categorical values must be integer indices")
        if value.numel() and (value.min() < 0 or value.max() >= self.n_categories):
            raise DistributionError(
                f"index out of range for {self.n_categories} categories: "
                f"min={int(value.min())}, max={int(value.max())}"
            )
        shape = torch.broadcast_shapes(value.shape, self.batch_shape)
        table = self.log_probs.expand(*shape, self.n_categories)
        return torch.gather(table, -1, value.expand(shape).unsqueeze(-1)).squeeze(-1)

    def entropy(self) -> torch.Tensor:
        p = self.probs
        plogp = torch.where(p > 0, p * self.log_probs, torch.zeros_like(p))
        return -plogp.sum(-1)

    def sample(self, rng: torch.Generator, sample_shape=()) -> torch.Tensor:
        """Draw indices by inverting the CDF of the probability vector."""
        shape = torch.Size(sample_shape) + self.batch_shape
        u = torch.rand(shape, generator=rng, dtype=self.logits.dtype)
        cdf = self.probs.detach().cumsum(-1).expand(*shape, self.n_categories)
        idx = torch.searchsorted(cdf.contiguous(), u.unsqueeze(-1)).squeeze(-1)
        # guards against cdf[-1] < u from rounding
        return idx.clamp_(max=self.n_categories - 1)

    def __repr__(self):
        return f"Categorical(batch_shape={tuple(self.batch_shape)}, n={self.n_categories})"


class DiagonalGaussian:
    """Gaussian with diagonal covariance.

    ``stddev`` must be strictly positive; use :meth:`from_raw` to build one
    from an unconstrained scale through softplus.
    """

    def __init__(self, mean: torch.Tensor, stddev: torch.Tensor):
        mean = torch.as_tensor(mean)
        stddev = torch.as_tensor(stddev, dtype=mean.dtype)
        if mean.shape != stddev.shape:
            raise DistributionError(
                f"mean shape {tuple(mean.shape)} != stddev shape {tuple(stddev.shape)}"
            )
        if mean.dim() == 0:
            raise DistributionError("DiagonalGaussian needs at least one axis")
        if not bool((stddev > 0).all()):
            raise DistributionError("stddev must be strictly positive")
        self.mean = mean
        self.stddev = stddev

    @classmethod
    def from_raw(cls, mean, raw_scale, floor: float = 0.0) -> "DiagonalGaussian":
        return cls(mean, F.softplus(raw_scale) + floor)

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def batch_shape(self) -> torch.Size:
        return self.mean.shape[:-1]

    def detach(self) -> "DiagonalGaussian":
        return DiagonalGaussian(self.mean.detach(), self.stddev.detach())

    def log_prob(self, value) -> torch.Tensor:
        value = torch.as_tensor(value, dtype=self.mean.dtype)
        if value.dim() == 0 or value.shape[-1] != self.dim:
            raise DistributionError(
                f"value has trailing dimension {tuple(value.shape)[-1:] or '()'}, "
                f"expected {self.dim}"
            )
        z = (value - self.mean) / self.stddev
        return (-0.5 * z.pow(2) - self.stddev.log() - 0.5 * LOG_2PI).sum(-1)

    def entropy(self) -> torch.Tensor:
        return (0.5 + 0.5 * LOG_2PI + self.stddev.log()).sum(-1)

    def rsample(self, rng: torch.Generator, sample_shape=()) -> torch.Tensor:
        """Reparameterized draw ``mean + stddev * eps`` with ``eps ~ N(0, I)``."""
        shape = torch.Size(sample_shape) + self.mean.shape
        eps = torch.randn(shape, generator=rng, dtype=self.mean.dtype)
        return self.mean + self.stddev * eps

    def sample(self, rng: torch.Generator, sample_shape=()) -> torch.Tensor:
        return self.rsample(rng, sample_shape).detach()

    def __repr__(self):
        return f"DiagonalGaussian(batch_shape={tuple(self.batch_shape)}, dim={self.dim})"


def standard_normal_log_prob(value: torch.Tensor) -> torch.Tensor:
    return (-0.5 * value.pow(2) - 0.5 * LOG_2PI).sum(-1)


def kl_gaussian_standard(q: DiagonalGaussian) -> torch.Tensor:
    """Closed-form KL[q || N(0, I)] in nats, summed over the last axis."""
    var = q.stddev.pow(2)
    return 0.5 * (var + q.mean.pow(2) - 1.0 - 2.0 * q.stddev.log()).sum(-1)


def make_rng(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def child_seed(seed: int, *path: int) -> int:
    """Derive a deterministic child seed from a parent seed and an index path."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *[int(p) for p in path]])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
