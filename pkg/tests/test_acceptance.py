"""Acceptance criteria 1-8. Each test records one PASS/FAIL line, shown in
the terminal summary. Criteria 6-8 train on SYN-A and take tens of minutes."""

import contextlib
import math
import time
import warnings

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES
from sspiwo.data import SYN_A, generate_synthetic
from sspiwo.distributions import make_rng
from sspiwo.neural import NeuralConfig, NeuralModel, TokenBatch
from sspiwo.objectives import ObjectiveSpec, semi_supervised_terms
from sspiwo.tabular import TabularModel, exact_bound_expectation, exact_log_px, load_fixture
from sspiwo.training import TrainConfig, cross_split_evaluate, model_factory_for
from sspiwo.verify import k1_collapse_residual, random_models, run_suite

# published reference values (IMDB), for the report only
REF_LOW_RATE = {"none": 54.69, "vae": 57.58}          # 1% labels
REF_FULL_RATE = {"vae": 86.43, "piwo": 87.05}         # 100% labels
REF_LOG10_ALPHA = {"vae": 1.86, "piwo": 1.14, "iwae": 1.29}

DESK = TrainConfig(anneal_steps=300, batch_size=32, k=5, patience=4, max_epochs=30)
ALPHA = 10.0
SWEEP_RATE = 0.1


@contextlib.contextmanager
def criterion(n, text):
    info = {}
    try:
        yield info
    except BaseException:
        ACCEPTANCE_LINES.append(f"criterion {n}: FAIL  {text} {info.get('detail', '')}".rstrip())
        raise
    status = info.get("status", "PASS")
    ACCEPTANCE_LINES.append(f"criterion {n}: {status}  {text} {info.get('detail', '')}".rstrip())
    print(ACCEPTANCE_LINES[-1])


def _all_pass(checks):
    failing = [c.line() for c in checks if not c.passed]
    assert not failing, failing


@pytest.fixture(scope="module")
def models():
    return [load_fixture()] + random_models(100, 0)


def test_criterion_1_identities(models):
    with criterion(1, "ELBO gap identities on 100 random models, residual < 1e-10, < 30 s") as info:
        start = time.perf_counter()
        checks = run_suite("identities", fixtures=[load_fixture()], n_models=100)
        elapsed = time.perf_counter() - start
        worst = max(c.value for c in checks[:3])
        info["detail"] = f"(worst {worst:.1e}, {elapsed:.1f} s)"
        _all_pass(checks)
        assert elapsed < 30


def test_criterion_2_k1_collapse(models):
    with criterion(2, "all flavors agree at k=1 within 1e-12, < 10 s") as info:
        start = time.perf_counter()
        exact = max(k1_collapse_residual(m, alpha=a) for m in models for a in (0.5, 3.0))
        torch.manual_seed(0)
        net = NeuralModel(NeuralConfig(vocab_size=12, n_classes=3, d_emb=4, hidden=5, d_z=3, d_y=2,
                                       dropout=0.0), seed=0).double()
        net.eval()
        xl = TokenBatch.from_sequences([[4, 5, 6], [7, 8], [9]])
        xu = TokenBatch.from_sequences([[10, 11, 4, 5], [6]])
        yl = torch.tensor([0, 2, 1])
        spread = 0.0
        for seed in range(5):
            vals = [float(semi_supervised_terms(net, (xl, yl), xu, ObjectiveSpec(f, k=1, alpha=2.0),
                                                make_rng(seed)).value.detach())
                    for f in ("vae", "piwo", "ipiwo", "iwae")]
            spread = max(spread, max(vals) - min(vals))
        elapsed = time.perf_counter() - start
        info["detail"] = f"(exact {exact:.1e}, sampled {spread:.1e}, {elapsed:.1f} s)"
        assert exact <= 1e-12 and spread <= 1e-12
        assert elapsed < 10


def test_criterion_3_bound_sandwich(models):
    with criterion(3, "sandwich and monotonicity for k <= 4 on 100 models, exact to 1e-10, < 5 min") as info:
        start = time.perf_counter()
        checks = run_suite("bounds", fixtures=[load_fixture()], n_models=100)
        elapsed = time.perf_counter() - start
        info["detail"] = f"(worst {max(c.value for c in checks[:2]):.1e}, {elapsed:.0f} s)"
        _all_pass(checks)
        assert elapsed < 300


def test_criterion_4_limits_at_factorizing_posterior():
    with criterion(4, "PIWO_k = iPIWO_k = log p(x) when q is a factorizing posterior, within 1e-10") as info:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(20):
            m = TabularModel.factorizing(rng)
            for x in range(m.n_x):
                lp = exact_log_px(m, x)
                for k in (1, 2, 3, 4):
                    for name in ("piwo", "ipiwo"):
                        worst = max(worst, abs(exact_bound_expectation(m, ObjectiveSpec(name, k=k), x) - lp))
        info["detail"] = f"(worst {worst:.1e})"
        assert worst < 1e-10


def test_criterion_5_gradients():
    with criterion(5, "exact gradients vs FD < 1e-6; estimators within 3 SE on >= 95% of coordinates, "
                      "20 seeds x 1e5 draws, < 10 min") as info:
        start = time.perf_counter()
        checks = run_suite("gradients", fixtures=[load_fixture()], n_models=5, n_seeds=20, n_samples=100_000)
        elapsed = time.perf_counter() - start
        cover = min(c.value for c in checks[3:])
        info["detail"] = f"(FD {checks[0].value:.1e}, min coverage {cover:.3f}, {elapsed:.0f} s)"
        _all_pass(checks)
        assert elapsed < 600


# ------------------------------------------------------------ desk-scale runs

@pytest.fixture(scope="module")
def syn_a():
    return generate_synthetic(SYN_A)


CRITERION_6_CELLS = (("none", 0.005), ("vae", 0.005), ("vae", 1.0), ("piwo", 1.0))
FULL_RATE_CELLS = (("none", 1.0), ("ipiwo", 1.0), ("iwae", 1.0))


@pytest.fixture(scope="module")
def directional(syn_a):
    cells, seconds = {}, {}
    for flavor, rate in CRITERION_6_CELLS + FULL_RATE_CELLS:
        start = time.perf_counter()
        cells[(flavor, rate)] = cross_split_evaluate(model_factory_for(syn_a), syn_a,
                                                     ObjectiveSpec(flavor, k=DESK.k, alpha=ALPHA),
                                                     DESK.with_(supervision_rate=rate), sweep=False)
        seconds[(flavor, rate)] = time.perf_counter() - start
    return cells, seconds


@pytest.mark.slow
def test_criterion_6_directional_semi_supervision(directional, syn_a):
    cells, seconds = directional
    elapsed = sum(seconds[c] for c in CRITERION_6_CELLS)
    none_low, vae_low = cells[("none", 0.005)], cells[("vae", 0.005)]
    vae_full, piwo_full = cells[("vae", 1.0)], cells[("piwo", 1.0)]
    with criterion(6, "SYN-A: VAE >= None at 0.5%; PIWO >= VAE - 1 std at 100%; < 60 min") as info:
        info["detail"] = (f"(0.5%: VAE {vae_low.formatted()} vs None {none_low.formatted()}, ref "
                          f"{REF_LOW_RATE['vae']} vs {REF_LOW_RATE['none']}; 100%: PIWO {piwo_full.formatted()} "
                          f"vs VAE {vae_full.formatted()}, ref {REF_FULL_RATE['piwo']} vs {REF_FULL_RATE['vae']}; "
                          f"Bayes {100 * syn_a.bayes_accuracy:.2f}; {elapsed / 60:.1f} min)")
        assert vae_low.mean >= none_low.mean
        assert piwo_full.mean >= vae_full.mean - vae_full.std
        assert elapsed < 3600


@pytest.mark.slow
def test_criterion_7_alpha_probe(syn_a):
    start = time.perf_counter()
    alphas = {}
    for flavor in ("vae", "iwae"):
        res = cross_split_evaluate(model_factory_for(syn_a), syn_a, ObjectiveSpec(flavor, k=DESK.k),
                                   DESK.with_(supervision_rate=SWEEP_RATE), sweep=True)
        alphas[flavor] = res.mean_log10_alpha
    elapsed = time.perf_counter() - start
    ok = alphas["iwae"] <= alphas["vae"]
    with criterion(7, "mean log10(alpha) IWAE <= VAE (soft)") as info:
        info["status"] = "PASS" if ok else "FAIL (soft, warning only)"
        info["detail"] = (f"(IWAE {alphas['iwae']:.2f} vs VAE {alphas['vae']:.2f} at {100 * SWEEP_RATE:g}% labels, "
                          f"ref {REF_LOG10_ALPHA['iwae']} vs {REF_LOG10_ALPHA['vae']}; {elapsed / 60:.1f} min)")
        if not ok:
            warnings.warn(f"soft criterion 7 not met: {info['detail']}", stacklevel=1)


@pytest.mark.slow
def test_criterion_8_no_posterior_collapse(directional):
    cells, _ = directional
    kls = [r.best.final_kl_z for key, cell in cells.items() if key[0] == "vae" for r in cell.runs]
    with criterion(8, "end-of-training batch-mean KL_z > 0.01 nats on SYN-A with annealing") as info:
        info["detail"] = f"(min {min(kls):.3f}, max {max(kls):.3f} over {len(kls)} VAE runs)"
        assert all(k is not None and math.isfinite(k) for k in kls)
        assert min(kls) > 0.01


@pytest.mark.slow
def test_full_rate_flavors_near_supervised(directional):
    """At 100% labels every semi-supervised flavor is within 3 std of the classifier alone, or better."""
    cells, _ = directional
    base = cells[("none", 1.0)]
    for flavor in ("vae", "piwo", "ipiwo", "iwae"):
        res = cells[(flavor, 1.0)]
        assert res.mean >= base.mean - 3 * max(res.std, base.std), (flavor, res.formatted(), base.formatted())
