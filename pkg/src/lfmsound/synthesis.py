"""Generating new sounds from a fitted model.

New latent forces are drawn from the learned GP prior and multiplied by a
slow positive modulator path; the envelope ODE turns them into subband
envelopes, which modulate sinusoid-plus-noise carriers before the subbands
are summed.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize
from scipy.signal import sosfilt

from .audio_io import AudioBuffer, EnvelopeMatrix
from .demod import MODULATOR_LENGTHSCALE_MS, demodulate, upsample_envelope
from .filterbank import ErbFilterbank, SubbandSet, synthesize
from .gpssm import kernel_to_ssm, sample_gp
from .inference import ckf_filter, rts_smooth
from .lfm_core import LfmParams, StateLayout, make_dynamics, transition

logger = logging.getLogger(__name__)

MODULATOR_MAX_POINTS = 500
DENSE_SAMPLE_MAX_POINTS = 2000
OUTPUT_PEAK = 0.9


class GenerationError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"envelope trajectory became non-finite at step {step}; "
                         "the model parameters are unstable")
        self.step = step


@dataclass
class ModulatorModel:
    se_lengthscale: float
    se_variance: float
    mean_offset: float

    def __post_init__(self):
        if not self.se_lengthscale > 0:
            raise ValueError("modulator lengthscale must be positive")
        if self.se_variance < 0:
            raise ValueError("modulator variance must be nonnegative")

    def to_dict(self):
        return {"se_lengthscale": self.se_lengthscale, "se_variance": self.se_variance,
                "mean_offset": self.mean_offset}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["se_lengthscale"]), float(d["se_variance"]), float(d["mean_offset"]))


@dataclass
class CarrierModel:
    sinusoid_freq: np.ndarray
    sinusoid_power: np.ndarray
    noise_power: np.ndarray

    def __post_init__(self):
        self.sinusoid_freq = np.asarray(self.sinusoid_freq, dtype=float)
        self.sinusoid_power = np.asarray(self.sinusoid_power, dtype=float)
        self.noise_power = np.asarray(self.noise_power, dtype=float)
        if np.any(self.sinusoid_power < 0) or np.any(self.noise_power < 0):
            raise ValueError("carrier powers must be nonnegative")

    def to_dict(self):
        return {"sinusoid_freq": self.sinusoid_freq.tolist(),
                "sinusoid_power": self.sinusoid_power.tolist(),
                "noise_power": self.noise_power.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["sinusoid_freq"]), np.array(d["sinusoid_power"]),
                   np.array(d["noise_power"]))


def _seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


# -- envelopes from latents ---------------------------------------------------

def run_model(params: LfmParams, layout: StateLayout, latents, frame_rate: float, x0=None):
    """Raw (unclamped) M x T output trajectory driven by the given latent values."""
    latents = np.atleast_2d(np.asarray(latents, dtype=float))
    if latents.shape[0] != layout.R:
        raise ValueError(f"expected {layout.R} latent rows, got {latents.shape[0]}")
    T = latents.shape[1]
    dt = 1.0 / frame_rate
    dyn = make_dynamics(params, layout, dt)
    x0 = np.zeros(layout.M) if x0 is None else np.asarray(x0, dtype=float).ravel()
    state = np.zeros(layout.n)
    state[layout.outputs] = x0
    for p in range(1, layout.P + 1):
        state[layout.output_slot(p)] = x0
        state[layout.latent_slot(p)] = latents[:, 0]
    value_idx = [layout.latent_value_index(r) for r in range(layout.R)]
    state[value_idx] = latents[:, 0]
    out = np.empty((layout.M, T))
    out[:, 0] = x0
    for k in range(1, T):
        state = transition(state, params, layout, dt, dynamics=dyn)
        state[layout.latent] = 0.0
        state[value_idx] = latents[:, k]
        if not np.all(np.isfinite(state[layout.outputs])) or np.any(np.abs(state[layout.outputs]) > 1e12):
            raise GenerationError(k)
        out[:, k] = state[layout.outputs]
    return out


def generate_envelopes(params: LfmParams, layout: StateLayout, latents, seed=None,
                       frame_rate: float = 1600.0, x0=None, channel_freqs=None) -> EnvelopeMatrix:
    """Run the envelope model forward from the supplied latents; clamp at zero.

    The recursion is deterministic; ``seed`` is accepted for interface
    symmetry with the other generation steps.
    """
    raw = run_model(params, layout, latents, frame_rate, x0)
    return EnvelopeMatrix(np.maximum(raw, 0.0), frame_rate, channel_freqs)


def simulate(params: LfmParams, n_frames: int, frame_rate: float, seed=None, x0=None,
             noise: bool = True):
    """Sample latents and noisy envelopes from the model itself.

    Returns (observations M x T, latents R x T, clean envelopes M x T).
    """
    layout = params.layout()
    seeds = _seed_sequence(seed).spawn(params.R + 1)
    dt = 1.0 / frame_rate
    latents = np.array([sample_gp(kernel_to_ssm(k), dt, n_frames, seed=s)
                        for k, s in zip(params.kernels, seeds)])
    clean = run_model(params, layout, latents, frame_rate, x0)
    obs = clean.copy()
    if noise:
        obs += np.sqrt(params.sigma2) * np.random.default_rng(seeds[-1]).standard_normal(clean.shape)
    return obs, latents, clean


# -- reconstruction -------------------------------------------------------------

def smoothed_latents(env: EnvelopeMatrix, params: LfmParams, skip=None):
    """Posterior mean of the latent GP values under the cubature smoother (R x T)."""
    layout = params.layout()
    fr = ckf_filter(env, params, layout, skip)
    sm = rts_smooth(fr, params, layout)
    idx = [layout.latent_value_index(r) for r in range(layout.R)]
    return sm.smoothed_mean[:, idx].T, sm


def reconstruct(env: EnvelopeMatrix, params: LfmParams, skip=None) -> EnvelopeMatrix:
    """Pass the smoothed latent means through the envelope model."""
    u, _ = smoothed_latents(env, params, skip)
    return generate_envelopes(params, params.layout(), u, frame_rate=env.frame_rate,
                              x0=env.values[:, 0], channel_freqs=env.channel_freqs)


# -- high-level modulator -------------------------------------------------------

def _se_kernel(t, lengthscale, variance):
    d = t[:, None] - t[None, :]
    return variance * np.exp(-0.5 * (d / lengthscale) ** 2)


def se_neg_log_marginal(y, t, lengthscale, variance, nugget):
    K = _se_kernel(t, lengthscale, variance) + nugget * np.eye(t.size)
    L = np.linalg.cholesky(K)
    alpha = cho_solve((L, True), y)
    return 0.5 * y @ alpha + np.sum(np.log(np.diag(L))) + 0.5 * y.size * np.log(2 * np.pi)


def _modulator_data(latent_means, frame_rate):
    latent_means = np.atleast_2d(np.asarray(latent_means, dtype=float))
    if latent_means.size == 0:
        raise ValueError("latent means are empty")
    envs = [demodulate(row, MODULATOR_LENGTHSCALE_MS, frame_rate, decimation=1).envelope_full
            for row in latent_means]
    env = np.mean(envs, axis=0)
    env = env / env.mean()
    log_env = np.log(env)
    T = log_env.size
    idx = np.unique(np.linspace(0, T - 1, min(T, MODULATOR_MAX_POINTS)).round().astype(int))
    return log_env, idx / frame_rate, idx


def modulator_nugget(y):
    return 1e-4 * float(np.var(y)) + 1e-10


def fit_modulator(latent_means, frame_rate: float) -> ModulatorModel:
    """Fit a squared-exponential GP to the slow envelope of the latent forces.

    The averaged envelope is normalized to unit mean and modelled in the log
    domain, so a modulator of exp(mean_offset + path) has typical value 1.
    """
    log_env, t, idx = _modulator_data(latent_means, frame_rate)
    mean_offset = float(np.mean(log_env))
    y = log_env[idx] - mean_offset
    duration = max(log_env.size / frame_rate, 1.0 / frame_rate)
    if np.std(y) < 1e-8 or y.size < 3:
        return ModulatorModel(duration, 0.0, mean_offset)
    nugget = modulator_nugget(y)
    spacing = t[1] - t[0]
    lo, hi = np.log(2 * spacing), np.log(2 * duration)

    def nll(v):
        try:
            return se_neg_log_marginal(y, t, np.exp(v[0]), np.exp(v[1]), nugget)
        except np.linalg.LinAlgError:
            return 1e20

    # coarse grid start keeps the local optimizer away from poor basins
    grid = np.linspace(lo, hi, 25)
    var0 = np.log(np.var(y))
    start = grid[np.argmin([nll([g, var0]) for g in grid])]
    res = minimize(nll, [start, var0], method="L-BFGS-B",
                   bounds=[(lo, hi), (var0 - 10, var0 + 10)])
    return ModulatorModel(float(np.exp(res.x[0])), float(np.exp(res.x[1])), mean_offset)


def sample_modulator(mod: ModulatorModel, n_frames: int, frame_rate: float, seed=None) -> np.ndarray:
    """One positive modulator path exp(mean_offset + f), f ~ GP(0, SE)."""
    if mod.se_variance == 0:
        return np.full(n_frames, np.exp(mod.mean_offset))
    rng = np.random.default_rng(seed)
    t = np.arange(n_frames) / frame_rate
    tg = np.linspace(0.0, t[-1], min(n_frames, DENSE_SAMPLE_MAX_POINTS)) if n_frames > 1 else t
    K = _se_kernel(tg, mod.se_lengthscale, mod.se_variance)
    jitter = 1e-10 * mod.se_variance
    while True:
        try:
            L = np.linalg.cholesky(K + jitter * np.eye(tg.size))
            break
        except np.linalg.LinAlgError:
            jitter *= 10
    path = L @ rng.standard_normal(tg.size)
    if tg.size != n_frames:
        path = np.interp(t, tg, path)
    return np.exp(mod.mean_offset + path)


def sample_latents(params: LfmParams, mod: ModulatorModel, n_frames: int, seed=None,
                   frame_rate: float = 1600.0) -> np.ndarray:
    """Independent GP draws for each force times one shared modulator path."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    seeds = _seed_sequence(seed).spawn(params.R + 1)
    dt = 1.0 / frame_rate
    raw = np.array([sample_gp(kernel_to_ssm(k), dt, n_frames, seed=s)
                    for k, s in zip(params.kernels, seeds[:-1])])
    return raw * sample_modulator(mod, n_frames, frame_rate, seeds[-1])


# -- carriers -------------------------------------------------------------------

def _carrier_stats(c, fs, lo, hi, fc):
    n = c.size
    total = float(np.mean(c ** 2))
    if total == 0:
        return fc, 0.0, 0.0
    spec = np.abs(np.fft.rfft(c)) ** 2 / n ** 2
    spec[1:(n + 1) // 2] *= 2  # one-sided power, sums to mean square
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    band = (freqs >= lo) & (freqs <= hi)
    if not np.any(band):
        return fc, 0.0, total
    f_peak = freqs[band][np.argmax(spec[band])]
    window = np.abs(freqs - f_peak) <= 0.03 * f_peak
    sp = float(spec[window].sum())
    return float(f_peak), sp, max(total - sp, 0.0)


def analyze_carriers(carriers, fb: ErbFilterbank) -> CarrierModel:
    carriers = np.atleast_2d(np.asarray(carriers, dtype=float))
    if carriers.shape[0] != fb.n_channels:
        raise ValueError("carrier count does not match the filterbank")
    stats = [_carrier_stats(c, fb.sample_rate, *fb.band_edges(m), fb.center_freqs[m])
             for m, c in enumerate(carriers)]
    f, sp, npow = map(np.array, zip(*stats))
    return CarrierModel(f, sp, npow)


def fit_carriers(subbands: SubbandSet, envelopes: EnvelopeMatrix) -> CarrierModel:
    """Sinusoid-plus-noise summary of the carriers subband / envelope."""
    if subbands.subbands.shape[0] != envelopes.n_channels:
        raise ValueError("subband and envelope channel counts differ")
    N = subbands.subbands.shape[1]
    dec = max(1, int(round(subbands.fb.sample_rate / envelopes.frame_rate)))
    carriers = np.array([sb / np.maximum(upsample_envelope(e, N, dec), 1e-12)
                         for sb, e in zip(subbands.subbands, envelopes.values)])
    return analyze_carriers(carriers, subbands.fb)


def render(envelopes: EnvelopeMatrix, cm: CarrierModel, fb: ErbFilterbank, seed=None) -> AudioBuffer:
    """Modulate synthetic carriers by the envelopes and sum the subbands."""
    M, T = envelopes.values.shape
    if M != fb.n_channels or cm.sinusoid_freq.size != M:
        raise ValueError("envelopes, carrier model and filterbank disagree on channel count")
    fs = fb.sample_rate
    dec = max(1, int(round(fs / envelopes.frame_rate)))
    N = T * dec
    rng = np.random.default_rng(seed)
    t = np.arange(N) / fs
    subbands = np.zeros((M, N))
    for m in range(M):
        phase = rng.uniform(0, 2 * np.pi)
        noise = sosfilt(fb.sos(m), rng.standard_normal(N))
        total = cm.sinusoid_power[m] + cm.noise_power[m]
        if total <= 0:
            continue
        carrier = np.sqrt(2 * cm.sinusoid_power[m] / total) * np.sin(2 * np.pi * cm.sinusoid_freq[m] * t + phase)
        rms = np.sqrt(np.mean(noise ** 2))
        if rms > 0:
            carrier += np.sqrt(cm.noise_power[m] / total) * noise / rms
        carrier /= max(np.sqrt(np.mean(carrier ** 2)), 1e-12)
        subbands[m] = upsample_envelope(envelopes.values[m], N, dec) * carrier
    y = synthesize(SubbandSet(subbands, fb)).samples
    peak = np.max(np.abs(y))
    if peak > 0:
        y = y * (OUTPUT_PEAK / peak)
    return AudioBuffer(y, fs)
