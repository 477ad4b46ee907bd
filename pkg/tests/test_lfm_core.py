import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from lfmsound.gpssm import KernelParams, discretize, kernel_to_ssm
from lfmsound.lfm_core import (LfmParams, build_layout, default_active_sets,
                               initial_state, measure, measurement_matrix, process_noise,
                               softplus, transition)

from conftest import make_params


def scalar_params(D=2.0, gamma=1.0, S0=0.0, P=0, B=None, lengthscale=0.1):
    S = np.zeros((1, 1, P + 1))
    S[0, 0, 0] = S0
    B = np.zeros((1, P)) if B is None else np.asarray(B, dtype=float).reshape(1, P)
    return LfmParams([D], [gamma], B, S, (KernelParams(lengthscale, 1.0),), 1e-3)


class TestLayout:
    @pytest.mark.parametrize("dims,n", [((16, 1, 10, 2), 188), ((1, 1, 0, 2), 3),
                                        ((2, 3, 1, 2), 13)])
    def test_dimension(self, dims, n):
        assert build_layout(*dims).n == n

    @given(st.integers(1, 20), st.integers(1, 4), st.integers(0, 12), st.integers(1, 3))
    def test_blocks_disjoint_and_exhaustive(self, M, R, P, d):
        lay = build_layout(M, R, P, d)
        idx = np.concatenate([np.arange(lay.n)[s] for s in
                              (lay.outputs, lay.latent, lay.output_history, lay.latent_history)])
        assert_array_equal(np.sort(idx), np.arange(lay.n))
        assert sum(lay.block_sizes().values()) == lay.n == M + R * d + M * P + R * P

    def test_invalid(self):
        with pytest.raises(ValueError):
            build_layout(0, 1, 1)

    def test_slot_bounds(self):
        with pytest.raises(IndexError):
            build_layout(2, 1, 2).output_slot(3)


class TestSoftplus:
    def test_zero(self):
        assert abs(softplus(0.0) - np.log(2.0)) < 1e-12

    def test_large_positive(self):
        assert abs(softplus(50.0) - 50.0) < 1e-12

    def test_large_negative(self):
        assert_allclose(softplus(-50.0), np.exp(-50.0), rtol=1e-15)

    def test_no_overflow(self):
        with np.errstate(over="raise"):
            assert softplus(1e4) == 1e4
            assert softplus(-1e4) == 0.0

    @given(st.floats(-700, 700))
    def test_matches_naive_and_positive(self, u):
        g = softplus(u)
        assert g >= 0
        if -30 < u < 30:
            assert_allclose(g, np.log1p(np.exp(u)), rtol=1e-12)


class TestParams:
    def test_gamma_bounds(self):
        with pytest.raises(ValueError, match="gamma"):
            scalar_params(gamma=0.4)

    def test_negative_damping(self):
        with pytest.raises(ValueError):
            scalar_params(D=-1.0)

    def test_inactive_entries_must_be_zero(self):
        P = 10
        fb, lags = default_active_sets(P)
        B = np.zeros((1, P))
        B[0, 2] = 0.1          # lag 3 is fixed at zero
        with pytest.raises(ValueError, match="inactive"):
            LfmParams([1.0], [1.0], B, np.zeros((1, 1, P + 1)), (KernelParams(0.1),), 1e-3)

    def test_default_sets_for_ten(self):
        fb, lags = default_active_sets(10)
        assert fb == (1, 2, 5, 8, 10) and lags == (0, 1, 3, 6)
        assert set(fb).isdisjoint({3, 4, 6, 7, 9})

    def test_dict_round_trip(self):
        p = make_params(M=3, R=2, P=2)
        q = LfmParams.from_dict(p.to_dict())
        assert q.to_dict() == p.to_dict()


class TestTransition:
    def test_linear_decay(self):
        p = scalar_params(D=2.0)
        x = np.array([1.0, 0.0, 0.0])
        assert transition(x, p, build_layout(1, 1, 0), 0.1)[0] == 1.0 + 0.1 * (-2.0)

    def test_softplus_drive(self):
        p = scalar_params(D=2.0, S0=1.0)
        out = transition(np.array([1.0, 0.0, 0.0]), p, build_layout(1, 1, 0), 0.1)
        assert_allclose(out[0], 0.8 + 0.1 * np.log(2.0), rtol=0, atol=1e-15)
        assert_allclose(out[0], 0.869315, atol=5e-7)

    def test_copy_down_one_step(self):
        p = make_params(M=2, R=1, P=2)
        lay = p.layout()
        x = np.random.default_rng(0).uniform(0.1, 1.0, lay.n)
        out = transition(x, p, lay, 1 / 1600)
        assert_array_equal(out[lay.output_slot(1)], x[lay.outputs])
        assert_array_equal(out[lay.output_slot(2)], x[lay.output_slot(1)])
        u_now = x[[lay.latent_value_index(0)]]
        assert_array_equal(out[lay.latent_slot(1)], u_now)
        assert_array_equal(out[lay.latent_slot(2)], x[lay.latent_slot(1)])

    def test_copy_down_chain(self):
        p = make_params(M=2, R=1, P=3)
        lay = p.layout()
        x = np.random.default_rng(1).uniform(0.1, 1.0, lay.n)
        outputs = [x[lay.outputs].copy()]
        for _ in range(6):
            x = transition(x, p, lay, 1 / 1600)
            outputs.append(x[lay.outputs].copy())
        for q in range(1, 4):
            assert_array_equal(x[lay.output_slot(q)], outputs[-1 - q])

    def test_constant_without_dynamics(self):
        P = 2
        p = LfmParams([0.0, 0.0], [1.0, 0.7], np.zeros((2, P)), np.zeros((2, 1, P + 1)),
                      (KernelParams(0.1),), 1e-3)
        lay = p.layout()
        x = np.random.default_rng(2).standard_normal(lay.n)
        x0 = x[lay.outputs].copy()
        for _ in range(50):
            x = transition(x, p, lay, 0.01)
        assert_array_equal(x[lay.outputs], x0)

    def test_geometric_decay(self):
        D, dt = 3.0, 0.01
        p = scalar_params(D=D)
        lay = p.layout()
        x = np.array([2.0, 0.5, -0.3])
        expected = 2.0
        for _ in range(20):
            x = transition(x, p, lay, dt)
            expected = expected * (1 - D * dt)
            assert_allclose(x[0], expected, rtol=1e-14)

    def test_negative_output_odd_extension(self):
        p = scalar_params(D=2.0, gamma=0.5)
        out = transition(np.array([-0.25, 0.0, 0.0]), p, build_layout(1, 1, 0), 0.1)
        assert_allclose(out[0], -0.25 + 0.1 * 2.0 * 0.5)

    @given(st.floats(-5, 5))
    @settings(max_examples=30)
    def test_latent_block_linear(self, a):
        p = make_params(M=2, R=2, P=1)
        lay = p.layout()
        z = np.zeros(lay.n)
        z[lay.latent] = np.random.default_rng(3).standard_normal(lay.R * lay.d)
        f = lambda v: transition(v, p, lay, 1 / 1600)[lay.latent]
        assert_allclose(f(a * z) - f(0 * z), a * (f(z) - f(0 * z)), atol=1e-12)

    def test_latent_block_uses_discretized_A(self):
        p = make_params(M=1, R=1, P=0)
        lay = p.layout()
        z = np.array([0.0, 0.3, -2.0])
        A = discretize(kernel_to_ssm(p.kernels[0]), 0.01).A
        assert_allclose(transition(z, p, lay, 0.01)[lay.latent], A @ z[lay.latent], rtol=1e-14)

    def test_batch_matches_single(self):
        p = make_params(M=3, R=2, P=2)
        lay = p.layout()
        X = np.random.default_rng(4).standard_normal((5, lay.n))
        batch = transition(X, p, lay, 1 / 1600)
        for i in range(5):
            assert_array_equal(batch[i], transition(X[i], p, lay, 1 / 1600))

    def test_layout_mismatch(self):
        p = make_params(M=2, R=1, P=2)
        with pytest.raises(ValueError):
            transition(np.zeros(5), p, build_layout(2, 1, 1), 0.1)


class TestNoiseAndMeasure:
    def test_latent_block_equals_gp_q(self):
        p = make_params(M=2, R=1, P=2)
        lay = p.layout()
        Q = process_noise(p, lay, 1 / 1600)
        ref = discretize(kernel_to_ssm(p.kernels[0]), 1 / 1600).Q
        assert np.max(np.abs(Q[lay.latent, lay.latent] - ref)) <= 1e-15

    def test_history_noise_zero(self):
        p = make_params(M=2, R=2, P=3)
        lay = p.layout()
        Q = process_noise(p, lay, 1 / 1600)
        hist = slice(lay.xh_off, lay.n)
        assert not np.any(Q[hist, :]) and not np.any(Q[:, hist])

    def test_psd(self):
        p = make_params(M=3, R=2, P=2)
        Q = process_noise(p, p.layout(), 1 / 1600)
        assert_array_equal(Q, Q.T)
        np.linalg.cholesky(Q + 1e-10 * np.eye(Q.shape[0]))

    def test_measure_selects_outputs(self):
        lay = build_layout(2, 1, 2)
        mean = np.arange(3.0, 3.0 + lay.n)
        assert_array_equal(measure(mean, lay), [3.0, 4.0])
        mean2 = mean.copy()
        mean2[lay.xh_off:] += 100
        assert_array_equal(measure(mean2, lay), measure(mean, lay))
        assert_array_equal(measurement_matrix(lay) @ mean, [3.0, 4.0])


class TestInitialState:
    def test_blocks(self):
        p = make_params(M=2, R=1, P=2)
        lay = p.layout()
        s = initial_state([0.4, 0.9], p, lay)
        assert_array_equal(s.mean[lay.outputs], [0.4, 0.9])
        assert_array_equal(s.mean[lay.output_slot(2)], [0.4, 0.9])
        assert_array_equal(s.cov[lay.latent, lay.latent], kernel_to_ssm(p.kernels[0]).P_inf)
        assert_allclose(np.diag(s.cov)[lay.outputs], p.sigma2)
        np.linalg.cholesky(s.cov)
