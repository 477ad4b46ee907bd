"""Compiled cubature Kalman likelihood for the augmented LFM.

Mirrors :func:`lfmsound.inference.ckf_filter` (softplus link, output
selector measurement, standard initial state) but only accumulates the log
likelihood. Compiled with ``nogil`` so that finite-difference evaluations can
run on threads.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .inference import JITTER_LADDER, UNIT_ROUNDOFF, FilterDivergence
from .lfm_core import LfmParams, StateLayout, initial_state, make_dynamics

_LADDER = np.array(JITTER_LADDER)
UNIT_ROUNDOFF_ = UNIT_ROUNDOFF


@njit(cache=True, nogil=True)
def _chol(P, out):
    n = P.shape[0]
    for j in range(n):
        s = P[j, j]
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if not s > 0.0:
            return False
        d = np.sqrt(s)
        out[j, j] = d
        for i in range(j + 1, n):
            t = P[i, j]
            for k in range(j):
                t -= out[i, k] * out[j, k]
            out[i, j] = t / d
        for i in range(j):
            out[i, j] = 0.0
    return True


@njit(cache=True, nogil=True)
def _chol_jitter(P, out, work, ladder):
    n = P.shape[0]
    for jit in ladder:
        for i in range(n):
            for j in range(n):
                work[i, j] = P[i, j]
            work[i, i] += jit
        if _chol(work, out):
            return True
    return False


@njit(cache=True, nogil=True)
def _pchol(P, S, perm, sq):
    # unblocked diagonally pivoted Cholesky (the LAPACK pstf2 recursion);
    # S receives the factor in original row order, S @ S.T = P
    n = P.shape[0]
    dmax = P[0, 0]
    for i in range(n):
        perm[i] = i
        sq[i] = 0.0
        if P[i, i] > dmax:
            dmax = P[i, i]
        for j in range(n):
            S[i, j] = 0.0
    tol = n * UNIT_ROUNDOFF_ * dmax
    for k in range(n):
        jmax = k
        best = P[perm[k], perm[k]] - sq[perm[k]]
        for j in range(k + 1, n):
            v = P[perm[j], perm[j]] - sq[perm[j]]
            if v > best:
                best = v
                jmax = j
        if not best > tol:
            return False
        t = perm[k]
        perm[k] = perm[jmax]
        perm[jmax] = t
        p = perm[k]
        lkk = np.sqrt(best)
        S[p, k] = lkk
        for j in range(k + 1, n):
            i = perm[j]
            acc = P[i, p]
            for c in range(k):
                acc -= S[i, c] * S[p, c]
            S[i, k] = acc / lkk
            sq[i] += S[i, k] * S[i, k]
    return True


@njit(cache=True, nogil=True)
def _pchol_jitter(P, S, work, perm, sq, ladder):
    n = P.shape[0]
    for jit in ladder:
        for i in range(n):
            for j in range(n):
                work[i, j] = P[i, j]
            work[i, i] += jit
        if _pchol(work, S, perm, sq):
            return True
    return False


@njit(cache=True, nogil=True)
def _softplus(u):
    if u > 0.0:
        return u + np.log1p(np.exp(-u))
    return np.log1p(np.exp(u))


@njit(cache=True, nogil=True)
def _transition(X, out, D, gamma, B, S, A, Hgp, dt, M, R, P, d):
    z_off = M
    xh_off = M + R * d
    uh_off = xh_off + M * P
    U = np.empty((P + 1, R))
    for r in range(R):
        u = 0.0
        for j in range(d):
            u += Hgp[j] * X[z_off + r * d + j]
        U[0, r] = _softplus(u)
        for q in range(1, P + 1):
            U[q, r] = _softplus(X[uh_off + (q - 1) * R + r])
    for m in range(M):
        x = X[m]
        if x > 0.0:
            acc = -D[m] * x ** gamma[m]
        elif x < 0.0:
            acc = D[m] * (-x) ** gamma[m]
        else:
            acc = 0.0
        for p in range(P):
            acc += B[m, p] * X[xh_off + p * M + m]
        for q in range(P + 1):
            for r in range(R):
                acc += S[m, r, q] * U[q, r]
        out[m] = x + dt * acc
    for r in range(R):
        base = z_off + r * d
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += A[r, i, j] * X[base + j]
            out[base + i] = s
    for p in range(P - 1, 0, -1):
        for m in range(M):
            out[xh_off + p * M + m] = X[xh_off + (p - 1) * M + m]
        for r in range(R):
            out[uh_off + p * R + r] = X[uh_off + (p - 1) * R + r]
    if P > 0:
        for m in range(M):
            out[xh_off + m] = X[m]
        for r in range(R):
            u = 0.0
            for j in range(d):
                u += Hgp[j] * X[z_off + r * d + j]
            out[uh_off + r] = u


@njit(cache=True, nogil=True)
def _loglik(Y, skip, m0, P0, D, gamma, B, S, A, Q, Hgp, sigma2, dt, P, d, ladder):
    M, T = Y.shape
    R = A.shape[0]
    n = m0.size
    npts = 2 * n
    w = 1.0 / npts
    sq = np.sqrt(n)
    m = m0.copy()
    C = P0.copy()
    L = np.zeros((n, n))
    work = np.empty((n, n))
    perm = np.empty(n, dtype=np.int64)
    colsq = np.empty(n)
    Xp = np.empty(n)
    Ys = np.empty((npts, n))
    Ls = np.zeros((M, M))
    Sm = np.empty((M, M))
    Swork = np.empty((M, M))
    ll = 0.0
    log2pi = np.log(2.0 * np.pi)
    for k in range(T):
        if k > 0:
            if not _pchol_jitter(C, L, work, perm, colsq, ladder):
                return ll, k
            for i in range(npts):
                col = i % n
                sgn = 1.0 if i < n else -1.0
                for a in range(n):
                    Xp[a] = m[a] + sgn * sq * L[a, col]
                _transition(Xp, Ys[i], D, gamma, B, S, A, Hgp, dt, M, R, P, d)
            for a in range(n):
                s = 0.0
                for i in range(npts):
                    s += Ys[i, a]
                m[a] = s * w
            for i in range(npts):
                for a in range(n):
                    Ys[i, a] -= m[a]
            C = (Ys.T @ Ys) * w + Q
            for a in range(n):
                for b in range(a):
                    v = 0.5 * (C[a, b] + C[b, a])
                    C[a, b] = v
                    C[b, a] = v
        if skip[k]:
            continue
        for a in range(M):
            for b in range(M):
                Sm[a, b] = C[a, b]
            Sm[a, a] += sigma2
        if not _chol_jitter(Sm, Ls, Swork, ladder):
            return ll, k
        resid = Y[:, k] - m[:M]
        # K = C[:, :M] S^-1 ; solve with the Cholesky factor
        Sinv = np.linalg.inv(Ls)
        Sinv = Sinv.T @ Sinv
        alpha = Sinv @ resid
        quad = 0.0
        logdet = 0.0
        for a in range(M):
            quad += resid[a] * alpha[a]
            logdet += np.log(Ls[a, a])
        ll += -0.5 * quad - logdet - 0.5 * M * log2pi
        PHt = C[:, :M].copy()
        K = PHt @ Sinv
        m = m + K @ resid
        C = C - K @ PHt.T
        for a in range(n):
            for b in range(a):
                v = 0.5 * (C[a, b] + C[b, a])
                C[a, b] = v
                C[b, a] = v
    return ll, -1


def fast_loglik(Y, params: LfmParams, layout: StateLayout, dt: float, skip_mask=None,
                initial=None) -> float:
    """Marginal log likelihood; raises FilterDivergence with the failing step."""
    Y = np.ascontiguousarray(np.atleast_2d(Y), dtype=float)
    T = Y.shape[1]
    skip = np.zeros(T, dtype=np.bool_) if skip_mask is None else np.asarray(skip_mask, dtype=np.bool_)
    if Y.shape[0] != layout.M:
        raise ValueError(f"observations have {Y.shape[0]} rows, layout expects {layout.M}")
    dyn = make_dynamics(params, layout, dt)
    if initial is None:
        initial = initial_state(Y[:, 0], params, layout)
    ll, status = _loglik(Y, skip, initial.mean.astype(float), initial.cov.astype(float),
                         params.D, params.gamma, np.ascontiguousarray(params.B),
                         np.ascontiguousarray(params.S), dyn.A, dyn.Q, dyn.H_gp,
                         params.sigma2, float(dt), layout.P, layout.d, _LADDER)
    if status >= 0:
        raise FilterDivergence(int(status))
    return float(ll)
