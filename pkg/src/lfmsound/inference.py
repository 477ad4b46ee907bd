"""Cubature Kalman filtering and RTS smoothing for the augmented LFM."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve
from scipy.linalg.lapack import dpstrf

from .audio_io import EnvelopeMatrix
from .lfm_core import (GaussianState, LfmParams, StateLayout, initial_state, make_dynamics,
                       measurement_matrix, softplus, transition)

logger = logging.getLogger(__name__)

JITTER_LADDER = (0.0, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
# relative rank tolerance of the pivoted factorization (n * unit roundoff * max diagonal)
UNIT_ROUNDOFF = np.finfo(float).eps / 2


class FilterDivergence(RuntimeError):
    """A covariance stayed non positive definite after the full jitter ladder."""

    def __init__(self, step: int, what: str = "covariance"):
        super().__init__(f"filter diverged at step {step}: {what} not positive definite "
                         f"after jitter up to {JITTER_LADDER[-1]:g}")
        self.step = step


@dataclass
class FilterResult:
    filtered_mean: np.ndarray     # T x n
    filtered_cov: np.ndarray      # T x n x n
    predicted_mean: np.ndarray
    predicted_cov: np.ndarray
    loglik: float
    innovations: list             # (residual, covariance) per step
    skip_mask: np.ndarray
    dt: float
    link: object = field(default=softplus, repr=False)
    H: np.ndarray | None = field(default=None, repr=False)

    @property
    def T(self) -> int:
        return self.filtered_mean.shape[0]

    @property
    def filtered(self) -> list[GaussianState]:
        return [GaussianState(m, P) for m, P in zip(self.filtered_mean, self.filtered_cov)]

    @property
    def predicted(self) -> list[GaussianState]:
        return [GaussianState(m, P) for m, P in zip(self.predicted_mean, self.predicted_cov)]


@dataclass
class SmoothResult:
    smoothed_mean: np.ndarray
    smoothed_cov: np.ndarray

    @property
    def smoothed(self) -> list[GaussianState]:
        return [GaussianState(m, P) for m, P in zip(self.smoothed_mean, self.smoothed_cov)]


def cubature_points(n: int):
    """Unit third-degree spherical-radial cubature points and weights.

    Returns (points, weights) with points of shape (2n, n): +/- sqrt(n) e_i.
    Callers map them through mean + S @ point with S S^T = cov; the filter
    uses the pivoted Cholesky factor from :func:`cubature_sqrt`.
    """
    if n < 1:
        raise ValueError("dimension must be >= 1")
    eye = np.sqrt(n) * np.eye(n)
    return np.vstack([eye, -eye]), np.full(2 * n, 1.0 / (2 * n))


def cholesky_jitter(P: np.ndarray, step: int, what: str = "covariance") -> np.ndarray:
    """Lower Cholesky factor, escalating diagonal jitter before giving up."""
    eye = np.eye(P.shape[0])
    for jitter in JITTER_LADDER:
        try:
            return np.linalg.cholesky(P + jitter * eye if jitter else P)
        except np.linalg.LinAlgError:
            continue
    raise FilterDivergence(step, what)


def pivot_tolerance(P: np.ndarray) -> float:
    return P.shape[0] * UNIT_ROUNDOFF * float(np.max(np.diag(P)))


def pivoted_sqrt(P: np.ndarray):
    """Factor S with S @ S.T = P from a diagonally pivoted Cholesky decomposition.

    Pivoting on the largest remaining diagonal entry makes the set of columns
    of S follow any relabelling of the state, so cubature point sets (and
    hence filter outputs) do not depend on the channel order. Returns None
    when P is not numerically positive definite.
    """
    n = P.shape[0]
    c, piv, rank, info = dpstrf(P, tol=pivot_tolerance(P), lower=1)
    if info != 0 or rank < n:
        return None
    S = np.empty((n, n))
    S[piv - 1] = np.tril(c)
    return S


def cubature_sqrt(P: np.ndarray, step: int, what: str = "covariance") -> np.ndarray:
    """Square-root factor for cubature points, with the jitter ladder."""
    eye = np.eye(P.shape[0])
    for jitter in JITTER_LADDER:
        S = pivoted_sqrt(P + jitter * eye if jitter else P)
        if S is not None:
            return S
    raise FilterDivergence(step, what)


def _sym(P):
    return 0.5 * (P + P.T)


def _as_observations(observations, dt):
    if isinstance(observations, EnvelopeMatrix):
        return observations.values, observations.dt if dt is None else dt
    if dt is None:
        raise ValueError("dt is required when observations are a plain array")
    return np.atleast_2d(np.asarray(observations, dtype=float)), dt


def _propagate(mean, cov, pts, w, step, params, layout, dt, link, dyn):
    L = cubature_sqrt(cov, step)
    X = mean + pts @ L.T
    Y = transition(X, params, layout, dt, link=link, dynamics=dyn)
    m = w @ Y
    dev = Y - m
    P = _sym((dev * w[:, None]).T @ dev + dyn.Q)
    return X, Y, m, P


def ckf_filter(observations, params: LfmParams, layout: StateLayout, skip_mask=None, *,
               dt: float | None = None, link=softplus, H: np.ndarray | None = None,
               initial: GaussianState | None = None) -> FilterResult:
    """Cubature Kalman filter over an M x T envelope matrix.

    The prediction propagates cubature points through :func:`transition`;
    the measurement update is the exact linear Kalman update with selector
    ``H`` (default: the output block) and noise ``params.sigma2 * I``.
    Frame 0 is updated against ``initial`` (default :func:`initial_state`
    at the first frame) without a transition. Frames flagged in
    ``skip_mask`` keep the prediction and add nothing to the likelihood.

    ``link`` and ``H`` exist so that tests can build linear configurations.
    """
    Y, dt = _as_observations(observations, dt)
    selector = H is None
    if selector:
        H = measurement_matrix(layout)
        if Y.shape[0] != layout.M:
            raise ValueError(f"observations have {Y.shape[0]} rows, layout expects {layout.M}")
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if Y.shape[0] != H.shape[0]:
        raise ValueError("observation rows do not match the measurement matrix")
    T = Y.shape[1]
    skip = np.zeros(T, dtype=bool) if skip_mask is None else np.asarray(skip_mask, dtype=bool)
    if skip.shape != (T,):
        raise ValueError(f"skip_mask must have length {T}")
    dyn = make_dynamics(params, layout, dt)
    if initial is None:
        y0 = Y[:, 0] if selector else np.zeros(layout.M)
        initial = initial_state(y0, params, layout)
    n = layout.n
    pts, w = cubature_points(n)
    R_obs = params.sigma2 * np.eye(H.shape[0])

    fm = np.empty((T, n)); fP = np.empty((T, n, n))
    pm = np.empty((T, n)); pP = np.empty((T, n, n))
    innovations = []
    loglik = 0.0
    m, P = initial.mean.astype(float), _sym(initial.cov.astype(float))
    for k in range(T):
        if k > 0:
            _, _, m, P = _propagate(fm[k - 1], fP[k - 1], pts, w, k, params, layout, dt, link, dyn)
        pm[k], pP[k] = m, P
        resid = Y[:, k] - H @ m
        S = _sym(H @ P @ H.T + R_obs)
        innovations.append((resid, S))
        if skip[k]:
            fm[k], fP[k] = m, P
            continue
        Ls = cholesky_jitter(S, k, "innovation covariance")
        PHt = P @ H.T
        K = cho_solve((Ls, True), PHt.T).T
        fm[k] = m + K @ resid
        fP[k] = _sym(P - K @ S @ K.T)
        alpha = cho_solve((Ls, True), resid)
        loglik += -0.5 * (resid @ alpha) - np.sum(np.log(np.diag(Ls))) \
            - 0.5 * resid.size * np.log(2 * np.pi)
    return FilterResult(fm, fP, pm, pP, float(loglik), innovations, skip, dt, link, H)


def rts_smooth(fr: FilterResult, params: LfmParams, layout: StateLayout) -> SmoothResult:
    """Cubature RTS smoother.

    The cross-covariance between consecutive states is formed from the same
    cubature points that produced the forward prediction.
    """
    T, n = fr.filtered_mean.shape
    dyn = make_dynamics(params, layout, fr.dt)
    pts, w = cubature_points(n)
    sm = np.empty_like(fr.filtered_mean)
    sP = np.empty_like(fr.filtered_cov)
    sm[-1], sP[-1] = fr.filtered_mean[-1], fr.filtered_cov[-1]
    for k in range(T - 2, -1, -1):
        mf, Pf = fr.filtered_mean[k], fr.filtered_cov[k]
        L = cubature_sqrt(Pf, k)
        X = mf + pts @ L.T
        Y = transition(X, params, layout, fr.dt, link=fr.link, dynamics=dyn)
        m_pred, P_pred = fr.predicted_mean[k + 1], fr.predicted_cov[k + 1]
        C = ((X - mf) * w[:, None]).T @ (Y - m_pred)
        Lp = cholesky_jitter(P_pred, k + 1, "predicted covariance")
        G = cho_solve((Lp, True), C.T).T
        sm[k] = mf + G @ (sm[k + 1] - m_pred)
        sP[k] = _sym(Pf + G @ (sP[k + 1] - P_pred) @ G.T)
    return SmoothResult(sm, sP)


def marginal_loglik(observations, params: LfmParams, layout: StateLayout, skip_mask=None, *,
                    dt: float | None = None, engine: str = "fast") -> float:
    """log p(y | theta); returns -inf if the filter diverges.

    ``engine="fast"`` uses the compiled filter, ``"reference"`` the numpy one.
    """
    Y, dt = _as_observations(observations, dt)
    try:
        if engine == "fast":
            from ._fast import fast_loglik
            return fast_loglik(Y, params, layout, dt, skip_mask)
        if engine == "reference":
            return ckf_filter(Y, params, layout, skip_mask, dt=dt).loglik
        raise ValueError(f"unknown engine {engine!r}")
    except FilterDivergence as exc:
        logger.warning("likelihood evaluation diverged at step %d", exc.step)
        return -np.inf
