import csv
import json
import math

import numpy as np
import pytest
import torch

from sspiwo.data import SYN_A, SyntheticSpec, generate_synthetic
from sspiwo.exceptions import ObjectiveError, TrainingDivergedError
from sspiwo.objectives import EstimatorKind, ObjectiveSpec
from sspiwo.training import (
    METRIC_COLUMNS,
    RunResult,
    TrainConfig,
    alpha_sweep,
    anneal_beta,
    cross_split_evaluate,
    default_estimator,
    model_factory_for,
    prepare_fold,
    train,
)

SMALL = SyntheticSpec(vocab_size=24, topic_size=4, min_len=3, max_len=6, n_labeled=40, n_unlabeled=40,
                      n_test=20, n_bayes=50)
FAST = TrainConfig(batch_size=8, anneal_steps=5, max_epochs=2, k=2, patience=1)


@pytest.fixture(scope="module")
def small():
    return generate_synthetic(SMALL)


def _factory(ds):
    return model_factory_for(ds, "desk", d_emb=4, hidden=4, d_z=2, d_y=2)


def _stub(acc_by_alpha=None, acc=0.5):
    def trainer(model, dataset, spec, config, kind=None, **_):
        a = (acc_by_alpha or {}).get(spec.alpha, acc)
        return RunResult(spec.flavor.value, spec.alpha, config.dev_split, config.supervision_rate, [a], a, 0, a,
                         [], [], None, 0, 0, 0, "stl")
    return trainer


def test_anneal_beta():
    assert anneal_beta(1500, 3000) == 0.5
    assert anneal_beta(0, 3000) == 0.0
    assert anneal_beta(9000, 3000) == 1.0
    assert anneal_beta(0, 0) == 1.0


def test_default_estimators():
    assert default_estimator("vae") is EstimatorKind.STL
    assert default_estimator("piwo") is EstimatorKind.DREG


def test_config_validation():
    for bad in ({"batch_size": 0}, {"lr": 0}, {"patience": -1}, {"alpha_grid": ()}, {"supervision_rate": 0},
                {"dev_split": 5}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_prepare_fold_keeps_dev_split_whole(small):
    cfg = FAST.with_(supervision_rate=0.25, dev_split=1)
    lab, y, unl, dev, dev_y = prepare_fold(small, cfg)
    assert len(dev) == int(np.sum(small.splits == 1))
    assert len(lab) == math.ceil(0.25 * np.sum(small.splits != 1))
    assert len(unl) == len(small.unlabeled) + len(lab)
    assert len(prepare_fold(small, cfg.with_(reuse_labeled=False))[2]) == len(small.unlabeled)


def test_constant_trainer_has_zero_std(small):
    res = cross_split_evaluate(_factory(small), small, ObjectiveSpec("vae"), FAST, sweep=False, trainer=_stub())
    assert res.accuracies == [0.5] * 5
    assert res.std == 0.0 and res.mean == 0.5
    assert res.formatted() == "50.00(0.00)"


def test_alpha_tie_goes_to_smaller(small):
    cfg = FAST.with_(alpha_grid=(100.0, 1.0, 10.0))
    sw = alpha_sweep(_factory(small), small, ObjectiveSpec("vae"), cfg, trainer=_stub({1.0: 0.7, 10.0: 0.8,
                                                                                       100.0: 0.8}))
    assert sw.best_alpha == 10.0
    assert sorted(sw.runs) == [1.0, 10.0, 100.0]


def test_singleton_grid_equals_train(small):
    cfg = FAST.with_(alpha_grid=(3.0,), max_epochs=1)
    spec = ObjectiveSpec("vae", k=2)
    sw = alpha_sweep(_factory(small), small, spec, cfg)
    direct = train(_factory(small)(cfg.seed), small, spec.with_(alpha=3.0), cfg)
    assert sw.best.record() == direct.record()


def test_none_with_zero_alpha_rejected(small):
    with pytest.raises(ObjectiveError):
        train(_factory(small)(0), small, ObjectiveSpec("none", alpha=0.0), FAST)


def test_training_is_deterministic(small):
    spec = ObjectiveSpec("piwo", k=2, alpha=10.0)
    a = train(_factory(small)(0), small, spec, FAST)
    b = train(_factory(small)(0), small, spec, FAST)
    assert a.record() == b.record()
    assert a.bound_trace == b.bound_trace


def test_epoch_length_is_flavor_independent(small):
    runs = [train(_factory(small)(0), small, ObjectiveSpec(f, k=2, alpha=10.0), FAST.with_(max_epochs=1))
            for f in ("none", "vae", "iwae")]
    assert len({r.steps for r in runs}) == 1
    assert runs[0].n_unlabeled == 0 and runs[0].final_kl_z is None


def test_patience_zero_stops_at_first_non_improvement(small):
    res = train(_factory(small)(0), small, ObjectiveSpec("none", alpha=1.0), FAST.with_(patience=0, max_epochs=8))
    acc = res.dev_accuracy
    best = -1.0
    for i, a in enumerate(acc):
        if a <= best:
            assert i == len(acc) - 1
        best = max(best, a)
    if len(acc) < 8:
        assert acc[-1] <= max(acc[:-1])
    assert res.best_dev_accuracy == max(acc)
    assert res.best_epoch == int(np.argmax(acc))


def test_nan_parameters_raise_diverged(small):
    model = _factory(small)(0)
    with torch.no_grad():
        model.head_y.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergedError) as err:
        train(model, small, ObjectiveSpec("vae", k=2), FAST)
    assert err.value.snapshot["step"] == 0
    assert len(err.value.snapshot["labeled_ids"]) == FAST.batch_size


def test_write_run_artifacts(small, tmp_path):
    res = train(_factory(small)(0), small, ObjectiveSpec("vae", k=2), FAST, run_dir=tmp_path / "run")
    files = sorted(p.name for p in (tmp_path / "run").iterdir())
    assert files == ["checkpoint.npz", "config.json", "metrics.csv", "result.json"]
    rows = list(csv.DictReader(open(tmp_path / "run" / "metrics.csv")))
    assert tuple(rows[0]) == METRIC_COLUMNS and len(rows) == len(res.dev_accuracy)
    assert json.loads((tmp_path / "run" / "result.json").read_text()) == json.loads(json.dumps(res.record()))
    cfg = json.loads((tmp_path / "run" / "config.json").read_text())
    assert cfg["objective"]["flavor"] == "vae" and cfg["train"]["k"] == 2


def test_flavors_share_trajectory_at_k1(small):
    cfg = FAST.with_(max_epochs=1, anneal_steps=1000, k=1)
    runs, states = [], []
    for flavor in ("vae", "piwo", "ipiwo", "iwae"):
        model = _factory(small)(0)
        runs.append(train(model, small, ObjectiveSpec(flavor, k=1, alpha=10.0), cfg))
        states.append(model.state_dict())
    for run, state in zip(runs[1:], states[1:]):
        np.testing.assert_allclose(run.bound_trace, runs[0].bound_trace, rtol=0, atol=1e-9)
        for name, v in state.items():
            assert torch.allclose(v, states[0][name], rtol=0, atol=1e-6), name


# ------------------------------------------------------------- slow runs

DESK = TrainConfig(anneal_steps=300, max_epochs=20, patience=4)


@pytest.mark.slow
def test_supervised_on_separable_data():
    ds = generate_synthetic(SyntheticSpec(topic_mass=1.0, n_bayes=200))
    assert ds.bayes_accuracy == pytest.approx(1.0)
    res = train(model_factory_for(ds)(0), ds, ObjectiveSpec("none", alpha=1.0), DESK)
    assert res.test_accuracy >= 0.95


@pytest.mark.slow
def test_vae_at_one_percent_within_bayes_band():
    ds = generate_synthetic(SYN_A)
    res = cross_split_evaluate(model_factory_for(ds), ds, ObjectiveSpec("vae", alpha=10.0),
                               DESK.with_(supervision_rate=0.01), sweep=False)
    assert ds.bayes_accuracy - 0.25 <= res.mean <= ds.bayes_accuracy


@pytest.mark.slow
def test_two_point_alpha_sweep():
    ds = generate_synthetic(SYN_A)
    sw = alpha_sweep(model_factory_for(ds), ds, ObjectiveSpec("vae"),
                     DESK.with_(alpha_grid=(1.0, 1000.0), supervision_rate=0.01, max_epochs=10))
    assert sw.best_alpha in (1.0, 1000.0)
    assert sw.best.best_dev_accuracy == max(r.best_dev_accuracy for r in sw.runs.values())

