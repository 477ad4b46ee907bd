import numpy as np
import pytest

from lfmsound.gpssm import KernelParams
from lfmsound.lfm_core import LfmParams


def make_params(M=3, R=1, P=2, seed=0, sigma2=1e-4):
    """Stable, moderately nonlinear parameters used across test modules."""
    rng = np.random.default_rng(seed)
    D = np.linspace(8.0, 25.0, M)
    gamma = np.linspace(0.95, 0.8, M)
    B = 0.3 * rng.uniform(-1, 1, size=(M, P))
    S = np.zeros((M, R, P + 1))
    S[:, :, 0] = D[:, None] * rng.uniform(1.0, 1.5, size=(M, R))
    if P >= 1:
        S[:, :, 1] = rng.uniform(0.0, 2.0, size=(M, R))
    kernels = tuple(KernelParams(0.08 * (r + 1), 4.0) for r in range(R))
    return LfmParams(D, gamma, B, S, kernels, sigma2)


@pytest.fixture
def small_params():
    return make_params()


def synthetic_sound(seconds=1.0, seed=0, M=3, f_lo=300.0, f_hi=3000.0):
    """Audio rendered from envelopes sampled from a known model."""
    from lfmsound.filterbank import design_filterbank
    from lfmsound.synthesis import CarrierModel, render, simulate
    from lfmsound.audio_io import EnvelopeMatrix

    params = make_params(M=M, R=1, P=2, seed=seed)
    _, _, clean = simulate(params, int(seconds * 1600), 1600.0, seed=seed, noise=False)
    fb = design_filterbank(f_lo, f_hi, M, 16000)
    cm = CarrierModel(fb.center_freqs.copy(), np.ones(M), np.full(M, 0.1))
    return render(EnvelopeMatrix(np.maximum(clean, 0.0), 1600.0), cm, fb, seed=seed)


def write_synthetic_sound(path, seconds=1.0, seed=0, M=3):
    from lfmsound.audio_io import write_wav
    write_wav(synthetic_sound(seconds, seed, M), path)
    return path
