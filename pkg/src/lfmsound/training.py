"""Initialization, staged maximum-likelihood fitting and model-order selection."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.optimize import minimize

from .audio_io import EnvelopeMatrix
from .gpssm import KernelParams
from .inference import FilterDivergence
from .lfm_core import LfmParams, StateLayout, default_active_sets, softplus

logger = logging.getLogger(__name__)

GAMMA_LO, GAMMA_HI = 0.5, 1.0
GAMMA_MARGIN = 1e-3
D_FLOOR = 1e-6
# Envelopes carry no structure faster than the demodulation timescale (10 ms
# at the finest), so a force with a shorter lengthscale can only act as white
# process noise; left free, maximum likelihood drifts there on smooth data.
MIN_LENGTHSCALE = 0.01


class TrainingError(RuntimeError):
    """Training cannot proceed; ``step`` is the diverging frame when known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass
class TrainConfig:
    R: int = 1
    P: int = 2
    active_feedback: tuple | None = None
    active_lags: tuple | None = None
    stage1_channels: int = 6
    max_iters: int = 200
    fd_step: float = 1e-4
    seed: int = 0
    skip_threshold_db: float = -60.0
    min_lengthscale: float = MIN_LENGTHSCALE
    # The latent amplitude is carried by S. With the kernel variance free as
    # well, only the ratio variance / lengthscale**3 is pinned down by
    # one-step predictions, and prior samples drift to arbitrary amplitudes.
    learn_variance: bool = False
    n_jobs: int | None = None

    def __post_init__(self):
        if self.R < 1:
            raise ValueError("R must be >= 1")
        if self.P < 0:
            raise ValueError("P must be >= 0")
        fb, lags = default_active_sets(self.P)
        if self.active_feedback is None:
            self.active_feedback = fb
        if self.active_lags is None:
            self.active_lags = lags
        self.active_feedback = tuple(sorted(int(p) for p in self.active_feedback))
        self.active_lags = tuple(sorted(int(q) for q in self.active_lags))
        if any(not 1 <= p <= self.P for p in self.active_feedback):
            raise ValueError(f"active_feedback must be a subset of 1..{self.P}")
        if any(not 0 <= q <= self.P for q in self.active_lags):
            raise ValueError(f"active_lags must be a subset of 0..{self.P}")
        if self.stage1_channels < 1:
            raise ValueError("stage1_channels must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not 0 < self.fd_step < 1:
            raise ValueError("fd_step must lie in (0, 1)")
        if self.min_lengthscale < 0:
            raise ValueError("min_lengthscale must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["active_feedback"] = list(self.active_feedback)
        d["active_lags"] = list(self.active_lags)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**known)


@dataclass
class TrainReport:
    params: LfmParams
    loglik_trace: list           # one list of accepted-iteration logliks per stage
    stage_channels: list
    wall_time: float
    converged: bool
    initial_loglik: float
    final_loglik: float
    n_evaluations: int = 0
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": self.params.to_dict(),
            "loglik_trace": self.loglik_trace,
            "stage_channels": [list(map(int, c)) for c in self.stage_channels],
            "wall_time": self.wall_time,
            "converged": self.converged,
            "initial_loglik": self.initial_loglik,
            "final_loglik": self.final_loglik,
            "n_evaluations": self.n_evaluations,
            "warnings": list(self.warnings),
        }


def select_channels(env: EnvelopeMatrix, k: int) -> np.ndarray:
    """Indices of the ``k`` highest-energy rows, ties to the lower index, sorted."""
    values = env.values if isinstance(env, EnvelopeMatrix) else np.atleast_2d(env)
    M = values.shape[0]
    if not 1 <= k <= M:
        raise ValueError(f"k must lie in 1..{M}, got {k}")
    energy = np.sum(values ** 2, axis=1)
    order = np.lexsort((np.arange(M), -energy))
    return np.sort(order[:k])


def skip_mask(env: EnvelopeMatrix, threshold_db: float = -60.0) -> np.ndarray:
    """Frames whose loudest channel lies below ``threshold_db`` of the peak."""
    if not threshold_db < 0:
        raise ValueError("threshold_db must be negative")
    values = env.values if isinstance(env, EnvelopeMatrix) else np.atleast_2d(env)
    frame_max = values.max(axis=0)
    return frame_max < values.max() * 10.0 ** (threshold_db / 20.0)


def _decay_rate(row: np.ndarray, frame_rate: float) -> float:
    smooth = gaussian_filter1d(row, 2.0, mode="nearest")
    falling = np.diff(smooth) < 0
    best_len, best_start, start = 0, 0, None
    for i, f in enumerate(np.append(falling, False)):
        if f and start is None:
            start = i
        elif not f and start is not None:
            if i - start > best_len:
                best_len, best_start = i - start, start
            start = None
    if best_len < 2:
        return 0.1
    seg = row[best_start:best_start + best_len + 1]
    t = np.arange(seg.size) / frame_rate
    slope = np.polyfit(t, np.log(np.maximum(seg, 1e-12)), 1)[0]
    return float(np.clip(-slope, 0.1, 200.0))


def _autocorr_zero_lag(values: np.ndarray, frame_rate: float) -> float:
    x = values.mean(axis=0)
    x = x - x.mean()
    if not np.any(x):
        return 1.0
    n = x.size
    spec = np.fft.rfft(x, 2 * n)
    ac = np.fft.irfft(np.abs(spec) ** 2)[:n]
    crossings = np.nonzero(ac <= 0)[0]
    lag = crossings[0] if crossings.size else n
    return float(np.clip(lag / frame_rate, 0.02, 1.0))


def init_params(env: EnvelopeMatrix, cfg: TrainConfig) -> LfmParams:
    """Data-driven starting point for the optimizer."""
    values = env.values
    M, R, P = values.shape[0], cfg.R, cfg.P
    for m in range(M):
        if not np.any(values[m] > 0):
            raise TrainingError(f"channel {m} is identically zero; cannot initialize")
    D = np.array([_decay_rate(values[m], env.frame_rate) for m in range(M)])
    peak = values.max(axis=1)
    S = np.zeros((M, R, P + 1))
    S[:, :, 0] = (D * peak / (R * float(softplus(1.0))))[:, None]
    lengthscale = _autocorr_zero_lag(values, env.frame_rate)
    if R > 1:
        # distinct forces need a symmetry break
        rng = np.random.default_rng(cfg.seed)
        S[:, :, 0] *= rng.uniform(0.5, 1.5, size=(1, R))
        scales = 2.0 ** (np.arange(R) - (R - 1) / 2)
    else:
        scales = np.ones(1)
    kernels = tuple(KernelParams(float(np.clip(lengthscale * s, 0.02, 1.0)), 1.0) for s in scales)
    sigma2 = 1e-2 * float(np.mean(values ** 2))
    return LfmParams(D, np.ones(M), np.zeros((M, P)), S, kernels, sigma2,
                     cfg.active_feedback, cfg.active_lags)


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _expit(v):
    return 0.5 * (1.0 + np.tanh(0.5 * v))


class ParamPacker:
    """Maps between LfmParams and an unconstrained optimization vector.

    Only the channels in ``free_channels`` contribute their D, gamma and
    active B / S entries; kernel hyperparameters and sigma2 are included when
    ``shared`` is true. Everything else is copied from ``template``.
    Lengthscales are parameterized as ``min_lengthscale + exp(v)``. Kernel
    variances are free only with ``learn_variance``; otherwise they keep the
    template's values.
    """

    def __init__(self, template: LfmParams, free_channels, shared: bool = True,
                 min_lengthscale: float = 0.0, learn_variance: bool = True):
        self.min_lengthscale = float(min_lengthscale)
        self.learn_variance = bool(learn_variance)
        self.template = template.copy()
        self.free = np.asarray(free_channels, dtype=int)
        self.shared = shared
        self.fb = np.array(template.active_feedback, dtype=int) - 1
        self.lags = np.array(template.active_lags, dtype=int)

    @property
    def size(self) -> int:
        per = 2 + self.fb.size + self.template.R * self.lags.size
        n_kernel = (2 if self.learn_variance else 1) * self.template.R
        return self.free.size * per + (n_kernel + 1 if self.shared else 0)

    def pack(self, params: LfmParams) -> np.ndarray:
        parts = []
        for m in self.free:
            g = np.clip((params.gamma[m] - GAMMA_LO) / (GAMMA_HI - GAMMA_LO),
                        GAMMA_MARGIN, 1 - GAMMA_MARGIN)
            parts += [[np.log(max(params.D[m], D_FLOOR)), _logit(g)],
                      params.B[m, self.fb], params.S[m][:, self.lags].ravel()]
        if self.shared:
            floor = self.min_lengthscale
            parts.append([np.log(max(k.lengthscale - floor, 1e-3 * max(floor, 1e-12)))
                          for k in params.kernels])
            if self.learn_variance:
                parts.append([np.log(k.variance) for k in params.kernels])
            parts.append([np.log(params.sigma2)])
        return np.concatenate([np.asarray(p, dtype=float) for p in parts]) if parts else np.zeros(0)

    def unpack(self, v) -> LfmParams:
        v = np.asarray(v, dtype=float)
        p = self.template.copy()
        R, nfb, nl = p.R, self.fb.size, self.lags.size
        i = 0
        for m in self.free:
            p.D[m] = np.exp(v[i])
            p.gamma[m] = GAMMA_LO + (GAMMA_HI - GAMMA_LO) * _expit(v[i + 1])
            i += 2
            p.B[m, self.fb] = v[i:i + nfb]
            i += nfb
            p.S[m][:, self.lags] = v[i:i + R * nl].reshape(R, nl)
            i += R * nl
        if self.shared:
            ls = self.min_lengthscale + np.exp(v[i:i + R])
            i += R
            if self.learn_variance:
                var = np.exp(v[i:i + R])
                i += R
            else:
                var = [k.variance for k in p.kernels]
            p.kernels = tuple(KernelParams(float(a), float(b)) for a, b in zip(ls, var))
            p.sigma2 = float(np.exp(v[i]))
        return p


def _n_jobs(n_jobs):
    if n_jobs is not None:
        return max(1, int(n_jobs))
    env = os.environ.get("LFM_SOUND_THREADS")
    if env:
        return max(1, int(env))
    return max(1, os.cpu_count() or 1)


class _Objective:
    """Negative log likelihood with central finite-difference gradients."""

    def __init__(self, Y, dt, packer: ParamPacker, skip, fd_step, n_jobs):
        from ._fast import fast_loglik
        self._loglik = fast_loglik
        self.Y, self.dt, self.packer, self.skip = Y, dt, packer, skip
        self.fd_step = fd_step
        self.n_jobs = n_jobs
        self.n_evals = 0
        self.layout = StateLayout(Y.shape[0], packer.template.R, packer.template.P)

    def loglik(self, v) -> float:
        self.n_evals += 1
        try:
            p = self.packer.unpack(v)
            return self._loglik(self.Y, p, self.layout, self.dt, self.skip)
        except (FilterDivergence, ValueError, FloatingPointError):
            return -np.inf

    def steps(self, v):
        return self.fd_step * np.maximum(1.0, np.abs(v))

    def gradient(self, v, f0=None):
        """Central-difference gradient of the log likelihood."""
        h = self.steps(v)
        points = []
        for i in range(v.size):
            e = np.zeros_like(v)
            e[i] = h[i]
            points += [v + e, v - e]
        vals = self._map(points)
        return (vals[0::2] - vals[1::2]) / (2 * h)

    def forward_gradient(self, v, f0):
        h = self.steps(v)
        pts = []
        for i in range(v.size):
            e = np.zeros_like(v)
            e[i] = h[i]
            pts.append(v + e)
        return (self._map(pts) - f0) / h

    def _map(self, points):
        if self.n_jobs > 1:
            with ThreadPoolExecutor(self.n_jobs) as pool:
                return np.array(list(pool.map(self.loglik, points)))
        return np.array([self.loglik(p) for p in points])


def _penalty(f_ref):
    return abs(f_ref) * 10.0 + 1e6


def _run_stage(Y, dt, packer, params0, skip, cfg, n_jobs, label):
    obj = _Objective(Y, dt, packer, skip, cfg.fd_step, n_jobs)
    v0 = packer.pack(params0)
    ll0 = obj.loglik(v0)
    if not np.isfinite(ll0):
        step = None
        try:
            obj._loglik(Y, packer.unpack(v0), obj.layout, dt, skip)
        except FilterDivergence as exc:
            step = exc.step
        where = "" if step is None else f" at step {step}"
        raise TrainingError(f"{label}: filter diverges{where} with the initial parameters; "
                            "try a looser initialization (larger sigma2 or smaller damping)", step)
    trace = [ll0]
    if v0.size == 0:
        return params0, trace, True, obj.n_evals

    def fun(v):
        ll = obj.loglik(v)
        if not np.isfinite(ll):
            return _penalty(ll0), np.zeros_like(v)
        g = obj.gradient(v)
        g[~np.isfinite(g)] = 0.0
        return -ll, -g

    def callback(intermediate_result):
        trace.append(-float(intermediate_result.fun))

    res = minimize(fun, v0, jac=True, method="L-BFGS-B", callback=callback,
                   options={"maxiter": cfg.max_iters, "maxcor": 20, "ftol": 1e-12, "gtol": 1e-6})
    best = res.x if -res.fun >= ll0 else v0
    converged = bool(res.success) or res.nit < cfg.max_iters
    logger.info("%s: %d iterations, loglik %.6g -> %.6g (%s)", label, res.nit, ll0, -res.fun,
                res.message)
    return packer.unpack(best), trace, converged, obj.n_evals


def optimize(env: EnvelopeMatrix, cfg: TrainConfig, init: LfmParams | None = None) -> TrainReport:
    """Staged maximum-likelihood fit.

    Stage 1 fits the ``cfg.stage1_channels`` most energetic channels together
    with the shared kernel and noise parameters. Stage 2 appends the remaining
    channels and fits only their parameters, leaving stage-1 values untouched.
    """
    t0 = time.perf_counter()
    M = env.n_channels
    params = init_params(env, cfg) if init is None else init.copy()
    if params.M != M:
        raise ValueError(f"initial parameters have {params.M} channels, data has {M}")
    n_jobs = _n_jobs(cfg.n_jobs)
    skip = skip_mask(env, cfg.skip_threshold_db)
    Y = env.values
    warnings = []
    traces, stages, converged_all, n_evals = [], [], True, 0

    first = select_channels(env, min(cfg.stage1_channels, M))
    sub = params.channels(first)
    packer = ParamPacker(sub, np.arange(first.size), shared=True,
                         min_lengthscale=cfg.min_lengthscale, learn_variance=cfg.learn_variance)
    fitted, trace, conv, ne = _run_stage(Y[first], env.dt, packer, sub, skip, cfg, n_jobs, "stage 1")
    traces.append(trace); stages.append(first); n_evals += ne
    converged_all &= conv
    for j, m in enumerate(first):
        params.D[m], params.gamma[m] = fitted.D[j], fitted.gamma[j]
        params.B[m], params.S[m] = fitted.B[j], fitted.S[j]
    params.kernels, params.sigma2 = fitted.kernels, fitted.sigma2

    rest = np.setdiff1d(np.arange(M), first)
    if rest.size:
        packer = ParamPacker(params, rest, shared=False)
        fitted, trace, conv, ne = _run_stage(Y, env.dt, packer, params, skip, cfg, n_jobs, "stage 2")
        traces.append(trace); stages.append(rest); n_evals += ne
        converged_all &= conv
        params = fitted
    if not converged_all:
        warnings.append(f"iteration cap of {cfg.max_iters} reached before convergence")
    final = traces[-1][-1]
    return TrainReport(params, traces, stages, time.perf_counter() - t0, converged_all,
                       traces[0][0], final, n_evals, warnings)


def n_free_parameters(params: LfmParams, learn_variance: bool = True) -> int:
    return ParamPacker(params, np.arange(params.M), shared=True,
                       learn_variance=learn_variance).size


def select_forces(env: EnvelopeMatrix, cfg: TrainConfig, candidates=(1, 2, 3)):
    """Fit each candidate force count and keep the lowest BIC.

    Returns (best_report, {R: bic}).
    """
    n_obs = env.values.size
    best, scores = None, {}
    for R in candidates:
        c = TrainConfig(**{**cfg.to_dict(), "R": R})
        rep = optimize(env, c)
        ll = rep.final_loglik
        scores[R] = -2.0 * ll + n_free_parameters(rep.params, cfg.learn_variance) * np.log(n_obs)
        if best is None or scores[R] < scores[best[0]]:
            best = (R, rep)
    return best[1], scores
