import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fanbeats.data import DataConfigError, DomainSpec, build_datasets, superdomain_map, synth_generate
from fanbeats.estimator import FeatureAlignedNBeats, LinearForecaster


@pytest.fixture(scope="module")
def pooled():
    spec = [
        DomainSpec(f"d{k}", "s", 3, 100, (5.0 + k, 7.0 + k), (0.0, 0.01), (10.0 + 3 * k,), (0.5, 1.0), 0.1, 1.0)
        for k in range(3)
    ]
    ds = build_datasets(synth_generate(spec, seed=0), superdomain_map(spec), 120, 8, 3)
    X = np.concatenate([d.X for d in ds.values()])
    Y = np.concatenate([d.Y for d in ds.values()])
    dom = np.repeat(list(ds), 120)
    return X, Y, dom


def _small(**kw):
    params = dict(n_stacks=2, n_blocks=2, width=8, batch_size=8, iterations=4)
    params.update(kw)
    return FeatureAlignedNBeats(**params)


def test_params_roundtrip_and_clone():
    est = _small(lam=0.3)
    p = est.get_params()
    assert p["lam"] == 0.3 and p["width"] == 8
    est.set_params(divergence="mmd")
    assert clone(est).get_params()["divergence"] == "mmd"


def test_fit_predict_transform_shapes(pooled):
    X, Y, dom = pooled
    est = _small().fit(X, Y, domains=dom)
    assert est.domains_ == ["d0", "d1", "d2"]
    assert est.predict(X[:5]).shape == (5, 3)
    Z = est.transform(X[:5])
    assert Z.shape == (5, 2 * 8)
    assert np.allclose(Z[:, :8].sum(axis=1), 1.0) and np.allclose(Z[:, 8:].sum(axis=1), 1.0)
    assert len(est.history_) == 4 and est.history_.is_finite()
    assert -2.0 <= est.score(X, Y) <= 0.0


def test_fit_is_seeded(pooled):
    X, Y, dom = pooled
    a = _small().fit(X, Y, domains=dom).predict(X[:10])
    b = _small().fit(X, Y, domains=dom).predict(X[:10])
    assert np.array_equal(a, b)


def test_validation_errors(pooled):
    X, Y, dom = pooled
    with pytest.raises(NotFittedError):
        _small().predict(X)
    with pytest.raises(DataConfigError):
        _small().fit(X, Y)
    with pytest.raises(DataConfigError):
        _small().fit(X, Y, domains=np.zeros(len(X)))
    with pytest.raises(ValueError):
        _small().fit(X, Y[:-1], domains=dom)
    with pytest.raises(ValueError):
        _small().fit(np.where(X > 6, np.nan, X), Y, domains=dom)
    est = _small().fit(X, Y, domains=dom)
    with pytest.raises(ValueError, match="8"):
        est.predict(X[:, :5])


@pytest.mark.parametrize("kind", ["nlinear", "dlinear"])
def test_linear_forecaster_learns(pooled, kind):
    X, Y, dom = pooled
    untrained = LinearForecaster(kind, window=3, iterations=0).fit(X, Y)
    trained = LinearForecaster(kind, window=3, batch_size=32, iterations=150).fit(X, Y, domains=dom)
    assert trained.predict(X).shape == Y.shape
    assert trained.score(X, Y) > untrained.score(X, Y)
