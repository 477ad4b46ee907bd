"""scikit-learn style wrappers around the front end and the latent force model.

Envelope data follow the scikit-learn convention: rows are frames (samples)
and columns are channels (features).
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .audio_io import AudioBuffer, EnvelopeMatrix
from .demod import DEFAULT_DECIMATION, DEFAULT_LENGTHSCALE_MS, demodulate_subbands
from .filterbank import DEFAULT_CHANNELS, DEFAULT_F_HI, DEFAULT_F_LO, analyze, design_filterbank
from .inference import marginal_loglik
from .synthesis import (fit_modulator, generate_envelopes, run_model, sample_latents,
                        smoothed_latents)
from .training import TrainConfig, optimize, select_forces, skip_mask
from .validation import check_audio, check_envelopes, check_latents


def decompose(buffer: AudioBuffer, n_channels=DEFAULT_CHANNELS, f_lo=DEFAULT_F_LO,
              f_hi=DEFAULT_F_HI, lengthscale_ms=DEFAULT_LENGTHSCALE_MS,
              decimation=DEFAULT_DECIMATION):
    """Filterbank analysis followed by demodulation of every subband.

    Returns ``(envelopes, carriers, fb, subbands)`` where ``envelopes`` is an
    :class:`EnvelopeMatrix` at ``sample_rate / decimation`` frames per second
    and ``carriers`` is an M x N array at the audio rate.
    """
    fb = design_filterbank(f_lo, f_hi, n_channels, buffer.sample_rate)
    subbands = analyze(buffer, fb)
    env, carriers = demodulate_subbands(subbands.subbands, lengthscale_ms, buffer.sample_rate,
                                        decimation)
    envelopes = EnvelopeMatrix(env, buffer.sample_rate / decimation, fb.center_freqs)
    return envelopes, carriers, fb, subbands


class EnvelopeExtractor(TransformerMixin, BaseEstimator):
    """Waveform -> (frames x channels) subband envelopes.

    Parameters
    ----------
    n_channels : int
        Number of ERB-spaced channels.
    f_lo, f_hi : float
        Centre frequencies of the first and last channel in Hz.
    lengthscale_ms : float
        Demodulation smoothing lengthscale.
    decimation : int
        Audio samples per envelope frame.
    sample_rate : int
        Rate of the waveforms passed to ``transform``.
    """

    def __init__(self, n_channels=DEFAULT_CHANNELS, f_lo=DEFAULT_F_LO, f_hi=DEFAULT_F_HI,
                 lengthscale_ms=DEFAULT_LENGTHSCALE_MS, decimation=DEFAULT_DECIMATION,
                 sample_rate=16000):
        self.n_channels = n_channels
        self.f_lo = f_lo
        self.f_hi = f_hi
        self.lengthscale_ms = lengthscale_ms
        self.decimation = decimation
        self.sample_rate = sample_rate

    def fit(self, X=None, y=None):
        self.filterbank_ = design_filterbank(self.f_lo, self.f_hi, self.n_channels,
                                             self.sample_rate)
        self.frame_rate_ = self.sample_rate / self.decimation
        return self

    def transform(self, X):
        check_is_fitted(self, "filterbank_")
        x = check_audio(X)
        sub = analyze(AudioBuffer(x, self.sample_rate), self.filterbank_)
        env, _ = demodulate_subbands(sub.subbands, self.lengthscale_ms, self.sample_rate,
                                     self.decimation)
        return env.T


class LatentForceModel(BaseEstimator):
    """Latent force model of subband envelopes.

    Parameters
    ----------
    n_forces : int or "auto"
        Number of latent forces R. ``"auto"`` picks R in {1, 2, 3} by BIC.
    history : int
        Number of past frames P feeding back into each channel.
    frame_rate : float
        Envelope frames per second.
    max_iter : int
        Optimizer iteration cap per training stage.
    random_state : int
        Seed for initialization symmetry breaking.

    Attributes
    ----------
    params_ : LfmParams
    report_ : TrainReport
    modulator_ : ModulatorModel
        Slow envelope of the smoothed training latents, used by ``sample``.
    initial_envelope_ : ndarray of shape (n_features_in_,)
        First training frame, the starting point for generated trajectories.

    Examples
    --------
    >>> model = LatentForceModel(n_forces=1, history=2, max_iter=20)  # doctest: +SKIP
    >>> model.fit(X).transform(X).shape                                 # doctest: +SKIP
    (2000, 1)
    """

    def __init__(self, n_forces=1, history=2, active_feedback=None, active_lags=None,
                 stage1_channels=6, max_iter=200, fd_step=1e-4, skip_threshold_db=-60.0,
                 frame_rate=1600.0, random_state=0, n_jobs=None):
        self.n_forces = n_forces
        self.history = history
        self.active_feedback = active_feedback
        self.active_lags = active_lags
        self.stage1_channels = stage1_channels
        self.max_iter = max_iter
        self.fd_step = fd_step
        self.skip_threshold_db = skip_threshold_db
        self.frame_rate = frame_rate
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _config(self, R):
        return TrainConfig(R=R, P=self.history, active_feedback=self.active_feedback,
                           active_lags=self.active_lags, stage1_channels=self.stage1_channels,
                           max_iters=self.max_iter, fd_step=self.fd_step,
                           seed=self.random_state, skip_threshold_db=self.skip_threshold_db,
                           n_jobs=self.n_jobs)

    def _envelopes(self, X):
        X = check_envelopes(X)
        return EnvelopeMatrix(X.T, self.frame_rate)

    def fit(self, X, y=None, init=None):
        """Fit by staged maximum likelihood; ``init`` optionally seeds the parameters."""
        env = self._envelopes(X)
        if self.n_forces == "auto":
            if init is not None:
                raise ValueError("init cannot be combined with n_forces='auto'")
            self.report_, self.bic_ = select_forces(env, self._config(1))
        else:
            self.report_ = optimize(env, self._config(int(self.n_forces)), init=init)
        self.params_ = self.report_.params
        self.n_features_in_ = env.n_channels
        self.initial_envelope_ = env.values[:, 0].copy()
        self.skip_ = skip_mask(env, self.skip_threshold_db)
        u, _ = smoothed_latents(env, self.params_, self.skip_)
        self.modulator_ = fit_modulator(u, self.frame_rate)
        return self

    def _check_X(self, X):
        check_is_fitted(self, "params_")
        env = self._envelopes(X)
        if env.n_channels != self.n_features_in_:
            raise ValueError(f"X has {env.n_channels} channels, model expects {self.n_features_in_}")
        return env

    def transform(self, X):
        """Smoothed posterior mean of the latent GP values, frames x forces."""
        env = self._check_X(X)
        u, _ = smoothed_latents(env, self.params_, skip_mask(env, self.skip_threshold_db))
        return u.T

    def inverse_transform(self, U, x0=None):
        """Envelopes produced by driving the model with latent values ``U``."""
        check_is_fitted(self, "params_")
        U = check_latents(U, self.params_.R)
        x0 = self.initial_envelope_ if x0 is None else x0
        raw = run_model(self.params_, self.params_.layout(), U.T, self.frame_rate, x0)
        return np.maximum(raw, 0.0).T

    def predict(self, X):
        """Reconstruction of ``X`` through the smoothed latents."""
        env = self._check_X(X)
        return self.inverse_transform(self.transform(X), x0=env.values[:, 0])

    def score(self, X, y=None):
        """Marginal log likelihood of ``X`` under the fitted model."""
        env = self._check_X(X)
        return marginal_loglik(env, self.params_, self.params_.layout(),
                               skip_mask(env, self.skip_threshold_db))

    def sample(self, n_frames, random_state=None):
        """Generate new envelopes (frames x channels) from the prior over forces."""
        check_is_fitted(self, "params_")
        U = sample_latents(self.params_, self.modulator_, n_frames, random_state, self.frame_rate)
        env = generate_envelopes(self.params_, self.params_.layout(), U,
                                 frame_rate=self.frame_rate, x0=self.initial_envelope_)
        return env.values.T
