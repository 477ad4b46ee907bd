"""The augmented latent force model for subband amplitude envelopes.

Each envelope x_m obeys the discrete first-order ODE

    dx_m/dt = -D_m sign(x_m)|x_m|^gamma_m + sum_p B_mp x_m[k-p]
              + sum_q sum_r S_mrq g(u_r[k-q])

stepped with Euler's method, where g is the softplus and the u_r are
Matern-3/2 Gaussian processes. The state vector stores the current outputs,
the latent SDE states, and P past copies of both the outputs and the latent
values so that feedback and lag terms can be evaluated inside a Markov filter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gpssm import KernelParams, discretize, kernel_to_ssm

OUTPUT_JITTER = 1e-10
HISTORY_JITTER = 1e-10


def softplus(u):
    """g(u) = log(1 + e^u), evaluated without overflow."""
    u = np.asarray(u, dtype=float)
    return np.maximum(u, 0.0) + np.log1p(np.exp(-np.abs(u)))


def identity_link(u):
    return np.asarray(u, dtype=float)


@dataclass(frozen=True)
class StateLayout:
    """Index map of the augmented state vector.

    Blocks, in order: outputs (M), latent SDE states (R*d), output history
    slots 1..P (M each), latent-value history slots 1..P (R each).
    """

    M: int
    R: int
    P: int
    d: int = 2

    def __post_init__(self):
        if self.M < 1 or self.R < 1 or self.P < 0 or self.d < 1:
            raise ValueError(f"invalid layout dimensions M={self.M} R={self.R} P={self.P} d={self.d}")

    @property
    def n(self) -> int:
        return self.M + self.R * self.d + self.M * self.P + self.R * self.P

    @property
    def x_off(self) -> int:
        return 0

    @property
    def z_off(self) -> int:
        return self.M

    @property
    def xh_off(self) -> int:
        return self.M + self.R * self.d

    @property
    def uh_off(self) -> int:
        return self.xh_off + self.M * self.P

    @property
    def outputs(self) -> slice:
        return slice(0, self.M)

    @property
    def latent(self) -> slice:
        return slice(self.z_off, self.xh_off)

    @property
    def output_history(self) -> slice:
        return slice(self.xh_off, self.uh_off)

    @property
    def latent_history(self) -> slice:
        return slice(self.uh_off, self.n)

    def output_slot(self, p: int) -> slice:
        """Output history slot ``p`` (1-based: values from p steps earlier)."""
        if not 1 <= p <= self.P:
            raise IndexError(p)
        start = self.xh_off + (p - 1) * self.M
        return slice(start, start + self.M)

    def latent_slot(self, q: int) -> slice:
        if not 1 <= q <= self.P:
            raise IndexError(q)
        start = self.uh_off + (q - 1) * self.R
        return slice(start, start + self.R)

    def latent_value_index(self, r: int) -> int:
        """Position of u_r (the GP value) inside the latent SDE block."""
        return self.z_off + r * self.d

    def block_sizes(self) -> dict:
        return {"outputs": self.M, "latent": self.R * self.d,
                "output_history": self.M * self.P, "latent_history": self.R * self.P}


def build_layout(M: int, R: int, P: int, d: int = 2) -> StateLayout:
    return StateLayout(M, R, P, d)


@dataclass
class GaussianState:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.asarray(self.cov, dtype=float)

    def symmetrized(self) -> "GaussianState":
        return GaussianState(self.mean, 0.5 * (self.cov + self.cov.T))


def default_active_sets(P: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Default sparsity pattern for feedback (1..P) and lag (0..P) indices.

    For P = 10 half of the feedback terms are fixed at zero; for short
    histories everything is free.
    """
    if P == 10:
        return (1, 2, 5, 8, 10), (0, 1, 3, 6)
    if P <= 4:
        return tuple(range(1, P + 1)), tuple(range(0, P + 1))
    fb = tuple(sorted({1, 2, P} | set(range(4, P, 3))))
    lags = tuple(sorted({0, 1} | set(range(3, P, 3))))
    return fb, lags


@dataclass
class LfmParams:
    """Parameters of the augmented LFM for M channels, R forces and history P."""

    D: np.ndarray
    gamma: np.ndarray
    B: np.ndarray
    S: np.ndarray
    kernels: tuple
    sigma2: float
    active_feedback: tuple | None = None
    active_lags: tuple | None = None

    def __post_init__(self):
        self.D = np.asarray(self.D, dtype=float).ravel()
        self.gamma = np.asarray(self.gamma, dtype=float).ravel()
        M = self.D.size
        self.B = np.asarray(self.B, dtype=float).reshape(M, -1)
        self.S = np.asarray(self.S, dtype=float)
        self.kernels = tuple(self.kernels)
        fb, lags = default_active_sets(self.B.shape[1])
        if self.active_feedback is None:
            self.active_feedback = fb
        if self.active_lags is None:
            self.active_lags = lags
        self.active_feedback = tuple(sorted(int(p) for p in self.active_feedback))
        self.active_lags = tuple(sorted(int(q) for q in self.active_lags))
        self.sigma2 = float(self.sigma2)
        self.validate()

    @property
    def M(self) -> int:
        return self.D.size

    @property
    def R(self) -> int:
        return len(self.kernels)

    @property
    def P(self) -> int:
        return self.B.shape[1]

    def validate(self):
        M, R, P = self.M, self.R, self.P
        if self.gamma.shape != (M,):
            raise ValueError("gamma must have one entry per channel")
        if self.S.shape != (M, R, P + 1):
            raise ValueError(f"S must have shape {(M, R, P + 1)}, got {self.S.shape}")
        if np.any(self.gamma < 0.5) or np.any(self.gamma > 1.0):
            raise ValueError("gamma must lie in [0.5, 1]")
        if np.any(self.D < 0):
            raise ValueError("damping D must be nonnegative")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        if any(not 1 <= p <= P for p in self.active_feedback):
            raise ValueError("active_feedback indices must lie in 1..P")
        if any(not 0 <= q <= P for q in self.active_lags):
            raise ValueError("active_lags indices must lie in 0..P")
        fb_off = [p for p in range(1, P + 1) if p not in self.active_feedback]
        lag_off = [q for q in range(P + 1) if q not in self.active_lags]
        if fb_off and np.any(self.B[:, np.array(fb_off) - 1] != 0):
            raise ValueError("B must be exactly zero at inactive feedback indices")
        if lag_off and np.any(self.S[:, :, lag_off] != 0):
            raise ValueError("S must be exactly zero at inactive lag indices")

    def copy(self) -> "LfmParams":
        return LfmParams(self.D.copy(), self.gamma.copy(), self.B.copy(), self.S.copy(),
                         self.kernels, self.sigma2, self.active_feedback, self.active_lags)

    def channels(self, idx) -> "LfmParams":
        """Parameters restricted to channel indices ``idx`` (shared parts kept)."""
        idx = np.asarray(idx, dtype=int)
        return LfmParams(self.D[idx], self.gamma[idx], self.B[idx], self.S[idx], self.kernels,
                         self.sigma2, self.active_feedback, self.active_lags)

    def layout(self, d: int = 2) -> StateLayout:
        return StateLayout(self.M, self.R, self.P, d)

    def to_dict(self) -> dict:
        return {
            "D": self.D.tolist(),
            "gamma": self.gamma.tolist(),
            "B": self.B.tolist(),
            "S": self.S.tolist(),
            "kernels": [{"lengthscale": k.lengthscale, "variance": k.variance} for k in self.kernels],
            "sigma2": self.sigma2,
            "active_feedback": list(self.active_feedback),
            "active_lags": list(self.active_lags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LfmParams":
        M = len(d["D"])
        R = len(d["kernels"])
        B = np.array(d["B"], dtype=float).reshape(M, -1)
        S = np.array(d["S"], dtype=float).reshape(M, R, B.shape[1] + 1)
        return cls(np.array(d["D"]), np.array(d["gamma"]), B, S,
                   tuple(KernelParams(float(k["lengthscale"]), float(k["variance"]))
                         for k in d["kernels"]),
                   float(d["sigma2"]), tuple(d["active_feedback"]), tuple(d["active_lags"]))


@dataclass
class LfmDynamics:
    """Per-step quantities that depend only on (params, layout, dt)."""

    A: np.ndarray       # R x d x d latent transitions
    Q: np.ndarray       # n x n process noise
    H_gp: np.ndarray    # d-vector extracting the GP value
    P_inf: np.ndarray   # R x d x d stationary latent covariances
    dt: float


def make_dynamics(params: LfmParams, layout: StateLayout, dt: float) -> LfmDynamics:
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check(params, layout)
    sdes = [kernel_to_ssm(k) for k in params.kernels]
    steps = [discretize(s, dt) for s in sdes]
    A = np.array([s.A for s in steps])
    Q = np.zeros((layout.n, layout.n))
    for r, s in enumerate(steps):
        i = layout.z_off + r * layout.d
        Q[i:i + layout.d, i:i + layout.d] = s.Q
    Q[np.arange(layout.M), np.arange(layout.M)] += OUTPUT_JITTER
    return LfmDynamics(A, Q, sdes[0].H_gp.copy(), np.array([s.P_inf for s in sdes]), float(dt))


def _check(params: LfmParams, layout: StateLayout):
    if (params.M, params.R, params.P) != (layout.M, layout.R, layout.P):
        raise ValueError(f"layout (M={layout.M}, R={layout.R}, P={layout.P}) does not match params "
                         f"(M={params.M}, R={params.R}, P={params.P})")


def output_drift(x, xh, U, params: LfmParams, link=softplus):
    """Right-hand side of the envelope ODE.

    x : (N, M) current outputs; xh : (N, P, M) output history;
    U : (N, P+1, R) latent values at lags 0..P.
    """
    decay = params.D * np.sign(x) * np.abs(x) ** params.gamma
    feedback = np.einsum("mp,npm->nm", params.B, xh)
    drive = np.einsum("mrq,nqr->nm", params.S, link(U))
    return -decay + feedback + drive


def transition(points, params: LfmParams, layout: StateLayout, dt: float, link=softplus,
               dynamics: LfmDynamics | None = None):
    """Deterministic part of one Euler step for a state vector or a batch of them.

    ``points`` has shape (n,) or (N, n). Returns an array of the same shape.
    """
    if dynamics is None:
        dynamics = make_dynamics(params, layout, dt)
    X = np.asarray(points, dtype=float)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    if X.shape[1] != layout.n:
        raise ValueError(f"state has {X.shape[1]} entries, layout expects {layout.n}")
    N, M, R, P, d = X.shape[0], layout.M, layout.R, layout.P, layout.d
    x = X[:, layout.outputs]
    z = X[:, layout.latent].reshape(N, R, d)
    xh = X[:, layout.output_history].reshape(N, P, M)
    uh = X[:, layout.latent_history].reshape(N, P, R)
    u_now = z @ dynamics.H_gp
    U = np.concatenate([u_now[:, None, :], uh], axis=1)

    out = np.empty_like(X)
    out[:, layout.outputs] = x + dynamics.dt * output_drift(x, xh, U, params, link)
    out[:, layout.latent] = np.einsum("rij,nrj->nri", dynamics.A, z).reshape(N, R * d)
    if P:
        out[:, layout.output_history] = np.concatenate([x[:, None, :], xh[:, :-1]], axis=1).reshape(N, P * M)
        out[:, layout.latent_history] = np.concatenate([u_now[:, None, :], uh[:, :-1]], axis=1).reshape(N, P * R)
    return out[0] if single else out


def process_noise(params: LfmParams, layout: StateLayout, dt: float) -> np.ndarray:
    """Process noise covariance: latent SDE blocks plus jitter on the outputs."""
    return make_dynamics(params, layout, dt).Q


def measure(mean, layout: StateLayout) -> np.ndarray:
    """Observation model: select the output block."""
    mean = np.asarray(mean, dtype=float)
    if mean.shape[-1] != layout.n:
        raise ValueError(f"state has {mean.shape[-1]} entries, layout expects {layout.n}")
    return mean[..., layout.outputs]


def measurement_matrix(layout: StateLayout) -> np.ndarray:
    H = np.zeros((layout.M, layout.n))
    H[np.arange(layout.M), np.arange(layout.M)] = 1.0
    return H


def initial_state(y0, params: LfmParams, layout: StateLayout) -> GaussianState:
    """Standard starting distribution.

    Outputs start at ``y0`` with variance sigma2, the latent SDE block at its
    stationary prior, and history slots at replicated initial values with
    jitter-only variance.
    """
    _check(params, layout)
    y0 = np.asarray(y0, dtype=float).ravel()
    if y0.size != layout.M:
        raise ValueError(f"initial outputs need {layout.M} values, got {y0.size}")
    mean = np.zeros(layout.n)
    cov = np.zeros((layout.n, layout.n))
    mean[layout.outputs] = y0
    cov[np.arange(layout.M), np.arange(layout.M)] = params.sigma2
    for r, k in enumerate(params.kernels):
        i = layout.z_off + r * layout.d
        cov[i:i + layout.d, i:i + layout.d] = kernel_to_ssm(k).P_inf
    for p in range(1, layout.P + 1):
        mean[layout.output_slot(p)] = y0
    hist = np.arange(layout.xh_off, layout.n)
    cov[hist, hist] = HISTORY_JITTER
    return GaussianState(mean, cov)
