import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from igolab.downstream import Generator, MeasurementModel
from igolab.estimators import CSGM, GenerativePCA, IgoScoreModel

TINY = dict(hidden=8, depth=2, time_embed_dim=4, steps=10, batch_size=16, log_interval=5)


@pytest.fixture(scope="module")
def fitted():
    X = np.random.default_rng(0).standard_normal((60, 2))
    return IgoScoreModel(**TINY, random_state=1).fit(X)


def test_params_round_trip_through_clone():
    est = IgoScoreModel(alpha=0.3, depth=4)
    params = est.get_params()
    assert params["alpha"] == 0.3 and params["depth"] == 4
    twin = clone(est)
    assert twin.get_params() == params
    assert twin.set_params(alpha=0.9).alpha == 0.9


def test_fit_attributes_and_log(fitted):
    assert fitted.n_features_in_ == 2
    assert list(fitted.log_.column("step")) == [5, 10]
    assert fitted.predict_score(np.zeros((3, 2)), 0.5).shape == (3, 2)


def test_sampling_both_methods(fitted):
    a = fitted.sample(7, n_steps=10)
    b = fitted.sample(7, n_steps=10)
    assert a.shape == (7, 2) and a.tobytes() == b.tobytes()
    ode = fitted.sample(4, method="ode", rtol=1e-3, atol=1e-3)
    assert np.isfinite(ode).all()
    inter = fitted.sample(4, pathway="intermediate", t_start=0.5, n_steps=10)
    assert inter.shape == (4, 2)
    with pytest.raises(ValueError):
        fitted.sample(2, method="heun")


def test_unfitted_estimator_raises():
    with pytest.raises(NotFittedError):
        IgoScoreModel().sample(3)


def test_dimension_mismatch_with_process():
    with pytest.raises(ValueError):
        IgoScoreModel(process="lotka_volterra", **TINY).fit(np.ones((5, 3)))


def test_fit_is_deterministic():
    X = np.random.default_rng(1).standard_normal((40, 1))
    a = IgoScoreModel(**TINY, random_state=4).fit(X)
    b = IgoScoreModel(**TINY, random_state=4).fit(X)
    assert a.log_.rows == b.log_.rows


def test_weight_divergence_and_generator(fitted):
    wd = fitted.weight_divergence()
    assert -1.0 <= wd.cos_E <= 1.0
    gen = fitted.generator("intermediate")
    assert gen.latent_dim == 8 and gen.out_dim == 2


def test_generative_pca_recovers_spike():
    rng = np.random.default_rng(2)
    direction = np.array([3.0, 4.0, 0.0]) / 5.0
    X = rng.standard_normal((2000, 1)) * 3.0 * direction + 0.3 * rng.standard_normal((2000, 3))
    pca = GenerativePCA().fit(X)
    assert abs(pca.components_[0] @ direction) > 0.99
    assert pca.explained_variance_[0] > 8.0
    assert pca.transform(X[:5]).shape == (5, 1)
    assert pca.fit_transform(X).shape == (2000, 1)


def test_generative_pca_with_restricted_range():
    gen = Generator.linear_rig(np.array([[0.0], [0.0], [1.0]]))
    X = np.random.default_rng(3).standard_normal((500, 3)) * [5.0, 1.0, 2.0]
    v = GenerativePCA(generator=gen).fit(X).components_[0]
    np.testing.assert_allclose(np.abs(v), [0.0, 0.0, 1.0], atol=1e-12)


def test_csgm_estimator():
    B = np.random.default_rng(4).standard_normal((20, 3))
    gen = Generator.linear_rig(B)
    x_true = gen(np.array([1.0, -0.5, 0.2]))
    model = MeasurementModel.gaussian(x_true, 12, seed=1)
    est = CSGM(gen).fit(model.A, model.y)
    assert np.linalg.norm(est.x_hat_ - x_true) / np.linalg.norm(x_true) < 1e-2
    np.testing.assert_allclose(est.predict(model.A), model.y, atol=1e-3)
    with pytest.raises(ValueError):
        CSGM(gen).fit(model.A, model.y[:-1])
