import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import logsumexp

from sspiwo.distributions import (
    LOG_2PI,
    Categorical,
    DiagonalGaussian,
    child_seed,
    kl_gaussian_standard,
    make_rng,
    standard_normal_log_prob,
)
from sspiwo.exceptions import DistributionError


def test_categorical_symmetric_log_prob():
    d = Categorical(torch.zeros(2, dtype=torch.float64))
    assert float(d.log_prob(0)) == pytest.approx(math.log(0.5), abs=1e-15)


def test_categorical_log_prob_against_reference():
    d = Categorical(torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    assert float(d.log_prob(2)) == pytest.approx(3.0 - logsumexp([1.0, 2.0, 3.0]), abs=1e-14)


def test_standard_normal_mode():
    d = DiagonalGaussian(torch.zeros(3, dtype=torch.float64), torch.ones(3, dtype=torch.float64))
    assert float(d.log_prob(torch.zeros(3, dtype=torch.float64))) == pytest.approx(-1.5 * LOG_2PI, abs=1e-14)
    assert float(standard_normal_log_prob(torch.zeros(3, dtype=torch.float64))) == pytest.approx(-1.5 * LOG_2PI)


def test_gaussian_log_prob_matches_torch():
    m = torch.tensor([0.3, -1.2], dtype=torch.float64)
    s = torch.tensor([0.7, 2.0], dtype=torch.float64)
    v = torch.tensor([1.0, 0.5], dtype=torch.float64)
    ref = torch.distributions.Normal(m, s).log_prob(v).sum()
    assert float(DiagonalGaussian(m, s).log_prob(v)) == pytest.approx(float(ref), abs=1e-13)


def test_categorical_zero_mass_category():
    d = Categorical(torch.tensor([0.0, -math.inf], dtype=torch.float64))
    assert float(d.log_prob(0)) == 0.0
    assert float(d.log_prob(1)) == -math.inf
    assert float(d.entropy()) == 0.0


def test_categorical_rejects_bad_values():
    d = Categorical(torch.zeros(3))
    with pytest.raises(DistributionError):
        d.log_prob(3)
    with pytest.raises(DistributionError):
        d.log_prob(torch.tensor(0.5))
    with pytest.raises(DistributionError):
        Categorical(torch.tensor(1.0))


def test_gaussian_rejects_bad_parameters():
    with pytest.raises(DistributionError):
        DiagonalGaussian(torch.zeros(2), torch.tensor([1.0, 0.0]))
    with pytest.raises(DistributionError):
        DiagonalGaussian(torch.zeros(2), torch.ones(3))
    with pytest.raises(DistributionError):
        DiagonalGaussian(torch.zeros(2), torch.ones(2)).log_prob(torch.zeros(3))


def test_degenerate_gaussian_sample_is_mean():
    m = torch.tensor([0.25, -3.0], dtype=torch.float64)
    d = DiagonalGaussian(m, torch.full((2,), 1e-12, dtype=torch.float64))
    assert torch.allclose(d.rsample(make_rng(3)), m, atol=1e-10)


def test_near_deterministic_categorical_frequency():
    d = Categorical(torch.tensor([30.0, 0.0], dtype=torch.float64))
    draws = d.sample(make_rng(0), (10_000,))
    assert float((draws == 0).double().mean()) >= 0.999


def test_categorical_sample_frequencies():
    p = torch.tensor([0.1, 0.6, 0.3], dtype=torch.float64)
    draws = Categorical(p.log()).sample(make_rng(1), (100_000,))
    freq = torch.bincount(draws, minlength=3).double() / draws.numel()
    se = (p * (1 - p) / draws.numel()).sqrt()
    assert bool(((freq - p).abs() < 4 * se).all())


def test_sampling_is_deterministic_per_seed():
    c = Categorical(torch.zeros(4))
    g = DiagonalGaussian(torch.zeros(2), torch.ones(2))
    assert torch.equal(c.sample(make_rng(5), (20,)), c.sample(make_rng(5), (20,)))
    assert torch.equal(g.rsample(make_rng(5), (20,)), g.rsample(make_rng(5), (20,)))
    assert not torch.equal(g.rsample(make_rng(5), (20,)), g.rsample(make_rng(6), (20,)))


def test_rsample_carries_gradient():
    m = torch.zeros(2, dtype=torch.float64, requires_grad=True)
    s = torch.ones(2, dtype=torch.float64, requires_grad=True)
    DiagonalGaussian(m, s).rsample(make_rng(0)).sum().backward()
    assert torch.equal(m.grad, torch.ones(2, dtype=torch.float64))
    assert s.grad is not None


def test_kl_standard_closed_forms():
    one = torch.ones(1, dtype=torch.float64)
    assert float(kl_gaussian_standard(DiagonalGaussian(0 * one, one))) == 0.0
    assert float(kl_gaussian_standard(DiagonalGaussian(one, one))) == pytest.approx(0.5, abs=1e-15)


def test_kl_standard_matches_monte_carlo():
    q = DiagonalGaussian(torch.tensor([0.3], dtype=torch.float64), torch.tensor([0.7], dtype=torch.float64))
    z = q.rsample(make_rng(11), (1_000_000,))
    vals = q.log_prob(z) - standard_normal_log_prob(z)
    se = float(vals.std() / math.sqrt(vals.numel()))
    assert abs(float(vals.mean()) - float(kl_gaussian_standard(q))) < 3 * se


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6))
def test_categorical_normalizes(logits):
    d = Categorical(torch.tensor(logits, dtype=torch.float64))
    assert float(d.probs.sum()) == pytest.approx(1.0, abs=1e-12)
    assert float(d.entropy()) >= -1e-12


@settings(max_examples=50, deadline=None)
@given(st.floats(-3, 3), st.floats(0.05, 5))
def test_kl_standard_is_non_negative(mu, sigma):
    q = DiagonalGaussian(torch.tensor([mu], dtype=torch.float64), torch.tensor([sigma], dtype=torch.float64))
    assert float(kl_gaussian_standard(q)) >= -1e-12


def test_child_seed_is_stable_and_distinct():
    assert child_seed(0, 1) == child_seed(0, 1)
    assert len({child_seed(0, i) for i in range(100)}) == 100
    assert 0 <= child_seed(2**64 - 1, 3) < 2**63
    assert isinstance(child_seed(1), int)
    assert np.int64(child_seed(9, 9)) >= 0
