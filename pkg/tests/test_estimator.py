import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from sspiwo.data import SyntheticSpec, generate_synthetic
from sspiwo.estimator import SemiSupervisedVAEClassifier, check_sequences, check_targets

SMALL = SyntheticSpec(vocab_size=24, topic_size=4, min_len=3, max_len=6, n_labeled=40, n_unlabeled=20,
                      n_test=10, n_bayes=50)
PARAMS = dict(flavor="piwo", k=2, max_epochs=2, batch_size=8, anneal_steps=5)


@pytest.fixture(scope="module")
def data():
    ds = generate_synthetic(SMALL)
    X = ds.labeled + ds.unlabeled
    y = np.concatenate([ds.labels + 3, np.full(len(ds.unlabeled), -1)])
    return X, y, ds


@pytest.fixture(scope="module")
def fitted(data):
    X, y, _ = data
    return SemiSupervisedVAEClassifier(**PARAMS).fit(X, y)


def test_get_params_and_clone():
    est = SemiSupervisedVAEClassifier(**PARAMS)
    assert est.get_params()["k"] == 2
    c = clone(est)
    assert c.get_params() == est.get_params() and c is not est
    est.set_params(alpha=3.0)
    assert est.alpha == 3.0


def test_fit_predict(fitted, data):
    _, _, ds = data
    assert fitted.classes_.tolist() == [3, 4]
    pred = fitted.predict(ds.test)
    assert set(pred) <= {3, 4} and pred.shape == (len(ds.test),)
    proba = fitted.predict_proba(ds.test)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-6)
    assert fitted.result_.n_unlabeled > 0
    assert 0.0 <= fitted.score(ds.test, ds.test_labels + 3) <= 1.0


def test_transform_shape(fitted, data):
    assert fitted.transform(data[2].test).shape == (len(data[2].test), fitted.model_.config.d_z)


def test_unknown_ids_map_to_unk(fitted):
    assert fitted.predict([[4, 999]]).shape == (1,)


def test_fit_is_deterministic(data, fitted):
    X, y, ds = data
    again = SemiSupervisedVAEClassifier(**PARAMS).fit(X, y)
    np.testing.assert_array_equal(again.predict_proba(ds.test), fitted.predict_proba(ds.test))


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SemiSupervisedVAEClassifier().predict([[4]])


def test_validation_errors():
    with pytest.raises(ValueError):
        check_sequences([[[1, 2]]])
    with pytest.raises(ValueError):
        check_sequences([[1.5]])
    with pytest.raises(ValueError):
        check_sequences([[-1]])
    with pytest.raises(ValueError):
        check_sequences([[5]], vocab_size=5)
    with pytest.raises(ValueError):
        check_sequences([])
    with pytest.raises(TypeError):
        check_sequences("abc")
    with pytest.raises(ValueError):
        check_targets([0, 1], 3)
    with pytest.raises(ValueError):
        check_targets([0.5, 1.0], 2)
    est = SemiSupervisedVAEClassifier(**PARAMS)
    with pytest.raises(ValueError, match="two labeled"):
        est.fit([[4], [5], [6]], [0, -1, -1])
    with pytest.raises(ValueError, match="two classes"):
        est.fit([[4], [5], [6]], [1, 1, -1])
