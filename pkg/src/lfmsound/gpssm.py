"""Matern-3/2 Gaussian process priors as linear stochastic differential equations."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm


@dataclass(frozen=True)
class KernelParams:
    lengthscale: float
    variance: float = 1.0

    def __post_init__(self):
        if not self.lengthscale > 0:
            raise ValueError(f"kernel lengthscale must be positive, got {self.lengthscale}")
        if not self.variance > 0:
            raise ValueError(f"kernel variance must be positive, got {self.variance}")


@dataclass
class LatentSdeModel:
    F: np.ndarray
    L_noise: np.ndarray
    q_c: float
    P_inf: np.ndarray
    H_gp: np.ndarray

    @property
    def dim(self) -> int:
        return self.F.shape[0]


@dataclass
class DiscreteKernelStep:
    A: np.ndarray
    Q: np.ndarray


def matern32(tau, k: KernelParams):
    """Matern-3/2 covariance at lag ``tau`` (seconds)."""
    r = np.sqrt(3.0) * np.abs(np.asarray(tau, dtype=float)) / k.lengthscale
    return k.variance * (1.0 + r) * np.exp(-r)


def kernel_to_ssm(k: KernelParams) -> LatentSdeModel:
    """Exact state-space form of the Matern-3/2 kernel (state = [f, df/dt])."""
    lam = np.sqrt(3.0) / k.lengthscale
    F = np.array([[0.0, 1.0], [-lam ** 2, -2.0 * lam]])
    L = np.array([[0.0], [1.0]])
    q_c = 4.0 * lam ** 3 * k.variance
    P_inf = np.diag([k.variance, lam ** 2 * k.variance])
    H = np.array([1.0, 0.0])
    return LatentSdeModel(F, L, q_c, P_inf, H)


def discretize(sde: LatentSdeModel, dt: float) -> DiscreteKernelStep:
    """Transition and process noise for a step of ``dt`` seconds."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    A = expm(sde.F * dt)
    Q = sde.P_inf - A @ sde.P_inf @ A.T
    Q = 0.5 * (Q + Q.T)
    return DiscreteKernelStep(A, Q)


def psd_sqrt(Q: np.ndarray) -> np.ndarray:
    """Square root S with S S^T = Q for PSD ``Q``, tolerant of singularity."""
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    return V * np.sqrt(np.clip(w, 0.0, None))


def sample_gp(sde: LatentSdeModel, dt: float, n: int, seed=None) -> np.ndarray:
    """Draw one length-``n`` path of the GP on a grid with spacing ``dt``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    step = discretize(sde, dt)
    root_q = psd_sqrt(step.Q)
    x = psd_sqrt(sde.P_inf) @ rng.standard_normal(sde.dim)
    out = np.empty(n)
    for k in range(n):
        out[k] = sde.H_gp @ x
        x = step.A @ x + root_q @ rng.standard_normal(sde.dim)
    return out
