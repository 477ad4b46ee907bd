import numpy as np
import pytest
from numpy.testing import assert_array_equal
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from lfmsound.audio_io import AudioBuffer, EnvelopeMatrix
from lfmsound.estimator import EnvelopeExtractor, LatentForceModel, decompose
from lfmsound.synthesis import simulate

from conftest import make_params, synthetic_sound


@pytest.fixture(scope="module")
def envelopes():
    obs, _, _ = simulate(make_params(M=3, seed=1), 400, 1600.0, seed=2)
    return np.maximum(obs, 0.0).T       # frames x channels


@pytest.fixture(scope="module")
def fitted(envelopes):
    return LatentForceModel(n_forces=1, history=2, max_iter=3).fit(envelopes)


class TestDecompose:
    def test_shapes(self):
        buf = synthetic_sound(0.5, seed=0)
        env, carriers, fb, sub = decompose(buf, 3, 300.0, 3000.0)
        assert env.values.shape == (3, 800)
        assert carriers.shape == (3, 8000)
        assert env.frame_rate == 1600.0
        assert_array_equal(env.channel_freqs, fb.center_freqs)


class TestEnvelopeExtractor:
    def test_transform_shape(self):
        ext = EnvelopeExtractor(n_channels=4, f_lo=200, f_hi=3000).fit()
        out = ext.transform(np.random.default_rng(0).standard_normal(1600))
        assert out.shape == (160, 4)
        assert np.all(out >= 0)

    def test_accepts_buffer(self):
        ext = EnvelopeExtractor(n_channels=2, f_lo=200, f_hi=3000).fit()
        x = np.random.default_rng(1).standard_normal(800)
        assert_array_equal(ext.transform(AudioBuffer(x, 16000)), ext.transform(x))

    def test_not_fitted(self):
        with pytest.raises(NotFittedError):
            EnvelopeExtractor().transform(np.zeros(100))

    def test_rejects_nan(self):
        ext = EnvelopeExtractor(n_channels=2, f_lo=200, f_hi=3000).fit()
        with pytest.raises(ValueError):
            ext.transform(np.array([0.0, np.nan, 1.0]))


class TestLatentForceModel:
    def test_params_and_clone(self):
        est = LatentForceModel(n_forces=2, history=3, max_iter=7)
        twin = clone(est)
        assert twin.get_params() == est.get_params()
        twin.set_params(n_forces="auto")
        assert twin.n_forces == "auto" and est.n_forces == 2

    def test_fitted_attributes(self, fitted):
        assert fitted.n_features_in_ == 3
        assert fitted.params_.M == 3 and fitted.params_.R == 1
        assert fitted.initial_envelope_.shape == (3,)
        assert fitted.report_.final_loglik >= fitted.report_.initial_loglik

    def test_transform_and_predict_shapes(self, fitted, envelopes):
        U = fitted.transform(envelopes)
        assert U.shape == (400, 1)
        assert fitted.predict(envelopes).shape == envelopes.shape

    def test_inverse_transform_nonnegative(self, fitted):
        out = fitted.inverse_transform(np.full((50, 1), -20.0))
        assert out.shape == (50, 3) and np.all(out >= 0)

    def test_score_is_loglik(self, fitted, envelopes):
        from lfmsound.inference import marginal_loglik
        from lfmsound.training import skip_mask
        env = EnvelopeMatrix(envelopes.T, 1600.0)
        ref = marginal_loglik(env, fitted.params_, fitted.params_.layout(), skip_mask(env))
        assert fitted.score(envelopes) == ref

    def test_sample_deterministic(self, fitted):
        a = fitted.sample(200, random_state=4)
        assert a.shape == (200, 3)
        assert_array_equal(a, fitted.sample(200, random_state=4))

    def test_channel_count_checked(self, fitted, envelopes):
        with pytest.raises(ValueError):
            fitted.transform(envelopes[:, :2])

    def test_not_fitted(self, envelopes):
        with pytest.raises(NotFittedError):
            LatentForceModel().transform(envelopes)

    def test_auto_with_init_rejected(self, envelopes):
        with pytest.raises(ValueError):
            LatentForceModel(n_forces="auto").fit(envelopes, init=make_params())

    def test_fit_from_init(self, envelopes):
        init = make_params(M=3, seed=1)
        est = LatentForceModel(n_forces=1, max_iter=2).fit(envelopes, init=init)
        assert est.report_.initial_loglik == pytest.approx(
            LatentForceModel(n_forces=1, max_iter=1).fit(envelopes, init=init).report_.initial_loglik)

    def test_rejects_negative(self, envelopes):
        with pytest.raises(ValueError):
            LatentForceModel(max_iter=1).fit(-envelopes)

    def test_latent_columns_checked(self, fitted):
        with pytest.raises(ValueError):
            fitted.inverse_transform(np.zeros((10, 2)))
