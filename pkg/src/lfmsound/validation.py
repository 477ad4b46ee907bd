"""Input validation helpers shared by the estimator classes."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

from .audio_io import AudioBuffer, EnvelopeMatrix


def check_envelopes(X, *, nonnegative: bool = True, min_frames: int = 1) -> np.ndarray:
    """Validate a frames x channels envelope array.

    Accepts an :class:`EnvelopeMatrix` (stored channels x frames) and returns
    a float64 array of shape (n_frames, n_channels).
    """
    if isinstance(X, EnvelopeMatrix):
        X = X.values.T
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_frames,
                    ensure_all_finite=True)
    if nonnegative and np.any(X < 0):
        raise ValueError("envelope values must be nonnegative")
    return X


def check_audio(x) -> np.ndarray:
    """Validate a mono waveform; returns a 1-D float64 array."""
    if isinstance(x, AudioBuffer):
        x = x.samples
    x = check_array(np.asarray(x, dtype=np.float64).reshape(-1, 1), ensure_all_finite=True)
    return x[:, 0]


def check_latents(U, n_forces: int) -> np.ndarray:
    """Validate a frames x forces latent array."""
    U = check_array(U, dtype=np.float64, ensure_all_finite=True)
    if U.shape[1] != n_forces:
        raise ValueError(f"expected {n_forces} latent columns, got {U.shape[1]}")
    return U
