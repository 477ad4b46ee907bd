import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from lfmsound.demod import (demodulate, demodulate_subbands, envelope_floor, envelope_frame_grid,
                            frame_period_bound, upsample_envelope)

FS = 16000


def am_signal(seed=0, n=32000):
    t = np.arange(n) / FS
    mod = 1.0 + 0.6 * np.sin(2 * np.pi * 1.5 * t + 0.3) + 0.2 * np.sin(2 * np.pi * 0.7 * t)
    return t, mod, mod * np.sin(2 * np.pi * 1000 * t)


def scaled_nrmse(est, ref):
    """Normalized RMS error after the best least-squares scale factor."""
    c = est @ ref / (est @ est)
    return np.sqrt(np.mean((c * est - ref) ** 2)) / np.sqrt(np.mean(ref ** 2))


class TestFrameGrid:
    @pytest.mark.parametrize("n,d,T", [(1000, 10, 100), (1001, 10, 101), (88200, 10, 8820),
                                       (1, 10, 1), (5, 1, 5)])
    def test_ceil(self, n, d, T):
        assert envelope_frame_grid(n, d) == T

    def test_bad_decimation(self):
        with pytest.raises(ValueError):
            envelope_frame_grid(10, 0)


class TestDemodulate:
    def test_constant_signal(self):
        r = demodulate(np.full(4000, 0.7), decimation=1)
        assert_allclose(r.envelope, 0.7, rtol=0.01)
        assert_allclose(np.abs(r.carrier), 1.0, rtol=0.01)

    def test_zero_signal(self):
        r = demodulate(np.zeros(1000))
        assert_allclose(r.envelope, r.floor, rtol=1e-12)
        assert r.floor == 1e-8
        assert not np.any(r.carrier)

    def test_am_recovery(self):
        t, mod, x = am_signal()
        r = demodulate(x, 20.0, FS, decimation=1)
        core = slice(4000, -4000)
        assert scaled_nrmse(r.envelope_full[core], mod[core]) < 0.05

    def test_reconstruction_identity(self):
        x = np.random.default_rng(0).standard_normal(5000)
        r = demodulate(x)
        assert np.max(np.abs(r.envelope_full * r.carrier - x)) <= 1e-12 * np.max(np.abs(x))

    def test_positivity_floor(self):
        x = np.random.default_rng(1).standard_normal(3000) * np.exp(-np.arange(3000) / 100)
        r = demodulate(x)
        assert np.min(r.envelope_full) >= r.floor
        assert r.floor == envelope_floor(x)

    def test_decimation(self):
        x = np.random.default_rng(2).standard_normal(1001)
        r = demodulate(x, decimation=10)
        assert r.envelope.size == 101
        assert np.array_equal(r.envelope, r.envelope_full[::10])

    def test_smoothness_bound(self):
        _, _, x = am_signal(n=16000)
        for ls in (10.0, 20.0, 50.0):
            r = demodulate(x, ls, FS, decimation=10)
            step = np.max(np.abs(np.diff(r.envelope)))
            assert step <= frame_period_bound(ls, FS / 10) * r.envelope.max()

    def test_lengthscale_monotone_total_variation(self):
        x = np.random.default_rng(4).standard_normal(16000)
        tv = [np.sum(np.abs(np.diff(demodulate(x, ls, FS).envelope_full)))
              for ls in (10.0, 30.0, 100.0)]
        assert tv[0] >= tv[1] >= tv[2]

    def test_short_lengthscale_rejected(self):
        with pytest.raises(ValueError, match=">= 10"):
            demodulate(np.ones(10), lengthscale_ms=5.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            demodulate(np.zeros(0))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3000), st.integers(1, 20), st.integers(0, 2 ** 31))
    def test_properties(self, n, dec, seed):
        x = np.random.default_rng(seed).standard_normal(n)
        r = demodulate(x, 20.0, FS, decimation=dec)
        assert r.envelope.size == envelope_frame_grid(n, dec)
        assert np.all(r.envelope_full >= r.floor)
        assert np.max(np.abs(r.envelope_full * r.carrier - x)) <= 1e-12 * max(np.max(np.abs(x)), 1e-300)


class TestHelpers:
    def test_demodulate_subbands_shapes(self):
        sub = np.random.default_rng(0).standard_normal((3, 1000))
        env, car = demodulate_subbands(sub, decimation=10)
        assert env.shape == (3, 100) and car.shape == (3, 1000)

    def test_upsample_linear(self):
        env = np.array([0.0, 1.0, 3.0])
        assert_allclose(upsample_envelope(env, 5, 2), [0, 0.5, 1, 2, 3])
