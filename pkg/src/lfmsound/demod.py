"""Amplitude demodulation into a slow positive envelope and a fast carrier.

The envelope is a log-domain Gaussian smoothing of the rectified signal with
the smoothing width set by a lengthscale in milliseconds. The carrier is the
signal divided by the full-rate envelope, so envelope * carrier reproduces
the input up to round-off.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter1d

DEFAULT_LENGTHSCALE_MS = 20.0
MODULATOR_LENGTHSCALE_MS = 200.0
DEFAULT_DECIMATION = 10
MIN_LENGTHSCALE_MS = 10.0


@dataclass
class DemodResult:
    envelope: np.ndarray
    carrier: np.ndarray
    lengthscale_ms: float
    floor: float
    envelope_full: np.ndarray
    decimation: int = 1


def envelope_frame_grid(n_samples: int, decimation: int) -> int:
    """Number of envelope frames for ``n_samples`` at the given decimation."""
    if decimation < 1:
        raise ValueError("decimation must be >= 1")
    return -(-int(n_samples) // int(decimation))


def envelope_floor(x) -> float:
    return max(1e-5 * float(np.max(np.abs(x))), 1e-8)


def demodulate(subband, lengthscale_ms: float = DEFAULT_LENGTHSCALE_MS, sample_rate: float = 16000,
               decimation: int = DEFAULT_DECIMATION, min_lengthscale_ms: float = MIN_LENGTHSCALE_MS
               ) -> DemodResult:
    """Split ``subband`` into envelope and carrier.

    Parameters
    ----------
    subband : array_like
        Real signal sampled at ``sample_rate``.
    lengthscale_ms : float
        Standard deviation of the Gaussian smoother, in milliseconds.
    sample_rate : float
        Rate of ``subband`` in Hz.
    decimation : int
        The returned ``envelope`` is ``envelope_full[::decimation]``.
    min_lengthscale_ms : float
        Lower bound on ``lengthscale_ms``; envelopes faster than 10 ms are
        left to the carrier.

    Returns
    -------
    DemodResult
    """
    x = np.asarray(subband, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("cannot demodulate an empty signal")
    if not lengthscale_ms >= min_lengthscale_ms:
        raise ValueError(f"lengthscale_ms must be >= {min_lengthscale_ms}, got {lengthscale_ms}")
    if decimation < 1:
        raise ValueError("decimation must be >= 1")
    eps = envelope_floor(x)
    sigma = lengthscale_ms * 1e-3 * sample_rate
    log_env = gaussian_filter1d(np.log(np.abs(x) + eps), sigma, mode="reflect",
                                truncate=4.0)
    # Smoothing is a convex combination, so the floor holds up to rounding.
    env_full = np.maximum(np.exp(log_env), eps)
    carrier = x / env_full
    env = env_full[::decimation]
    assert env.size == envelope_frame_grid(x.size, decimation)
    return DemodResult(env, carrier, float(lengthscale_ms), eps, env_full, int(decimation))


def demodulate_subbands(subbands: np.ndarray, lengthscale_ms: float = DEFAULT_LENGTHSCALE_MS,
                        sample_rate: float = 16000, decimation: int = DEFAULT_DECIMATION):
    """Demodulate each row; returns (envelopes M x T, carriers M x N)."""
    results = [demodulate(row, lengthscale_ms, sample_rate, decimation) for row in subbands]
    return np.array([r.envelope for r in results]), np.array([r.carrier for r in results])


def upsample_envelope(env, n_samples: int, decimation: int) -> np.ndarray:
    """Linear interpolation of a decimated envelope back to ``n_samples``."""
    env = np.asarray(env, dtype=float)
    t_frames = np.arange(env.size) * decimation
    return np.interp(np.arange(n_samples), t_frames, env)


def frame_period_bound(lengthscale_ms: float, frame_rate: float) -> float:
    """Smoothness bound factor (frame period / lengthscale) * 3."""
    return 3.0 * (1.0 / frame_rate) / (lengthscale_ms * 1e-3)


__all__ = ["DemodResult", "demodulate", "demodulate_subbands", "envelope_frame_grid",
           "upsample_envelope", "envelope_floor", "frame_period_bound"]
