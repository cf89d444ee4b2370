import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from milforge.data import ConfigurationError
from milforge.estimator import MILClassifier
from milforge.tensor import DimensionError

FAST = dict(embed_dim=8, attn_dim=6, heads=2, accumulation=4, max_epochs=6, patience=3, lr=1e-2)


def toy(n=40, d=5, seed=0):
    rng = np.random.default_rng(seed)
    X, y = [], []
    for i in range(n):
        label = i % 2
        x = rng.standard_normal((int(rng.integers(4, 9)), d))
        if label:
            x[0, 0] += 4.0
        X.append(x)
        y.append(label)
    return X, np.array(y)


def test_params_roundtrip():
    est = MILClassifier(kind="abmil", lr=1e-3)
    params = est.get_params()
    assert params["kind"] == "abmil" and params["lr"] == 1e-3
    twin = clone(est)
    assert twin.get_params() == params


def test_not_fitted():
    with pytest.raises(NotFittedError):
        MILClassifier().predict([np.zeros((3, 2))])


def test_fit_predict_shapes():
    X, y = toy()
    est = MILClassifier(**FAST).fit(X, y)
    assert est.n_features_in_ == 5
    proba = est.predict_proba(X)
    assert proba.shape == (40, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-6)
    assert set(est.predict(X)) <= {0, 1}
    assert est.score(X, y) > 0.8
    assert len(est.history_) >= 1
    assert "val_bag_auc" in est.history_[0]


def test_string_labels():
    X, y = toy()
    names = np.array(["benign", "tumour"])[y]
    est = MILClassifier(**FAST).fit(X, names)
    assert list(est.classes_) == ["benign", "tumour"]
    assert set(est.predict(X[:6])) <= {"benign", "tumour"}


def test_instance_outputs():
    X, y = toy()
    est = MILClassifier(**FAST).fit(X, y)
    scores = est.instance_scores(X[:3])
    att = est.attention(X[:3])
    for x, s, a in zip(X, scores, att):
        assert s.shape == a.shape == (len(x), 2)
        assert ((s > 0) & (s < 1)).all()
        np.testing.assert_allclose(a.sum(axis=0), 1.0, atol=1e-6)


def test_pooling_has_no_attention():
    X, y = toy()
    est = MILClassifier(kind="meanpool", **FAST).fit(X, y)
    with pytest.raises(ValueError):
        est.attention(X[:2])


def test_feature_dim_mismatch():
    X, y = toy()
    est = MILClassifier(**FAST).fit(X, y)
    with pytest.raises(ValueError):
        est.predict([np.zeros((3, 4))])


def test_input_validation():
    with pytest.raises(DimensionError):
        MILClassifier(**FAST).fit([np.zeros((3, 2)), np.zeros((3, 4))], [0, 1])
    with pytest.raises(ConfigurationError):
        MILClassifier(**FAST).fit([np.full((3, 2), np.nan)], [0])
    with pytest.raises(ConfigurationError):
        MILClassifier(**FAST).fit([np.zeros((3, 2))] * 2, [0, 1, 1])


def test_coordinates_and_cfsd():
    X, y = toy(n=24)
    rng = np.random.default_rng(1)
    coords = [rng.uniform(0, 500, size=(len(x), 2)) for x in X]
    est = MILClassifier(kind="pathmil", pe="2d", cfsd="parallel", warmup=1, **FAST).fit(X, y, coords=coords)
    assert est.predict_proba(X, coords=coords).shape == (24, 2)
    with pytest.raises(DimensionError):
        est.predict(X[:1], coords=[np.zeros((1, 2))])


def test_seeded_fit_is_deterministic():
    X, y = toy()
    a = MILClassifier(random_state=3, **FAST).fit(X, y).predict_proba(X)
    b = MILClassifier(random_state=3, **FAST).fit(X, y).predict_proba(X)
    np.testing.assert_array_equal(a, b)
