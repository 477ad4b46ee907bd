"""NMF and temporally smoothed NMF baselines, plus reconstruction metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .validation import check_envelopes

EPS = 1e-9


@dataclass
class NmfFactors:
    W: np.ndarray           # M x K basis
    Hact: np.ndarray        # K x T activations
    objective_trace: list = field(default_factory=list)

    def reconstruction(self) -> np.ndarray:
        return self.W @ self.Hact


def _as_matrix(V):
    V = getattr(V, "values", V)
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if np.any(V < 0) or not np.all(np.isfinite(V)):
        raise ValueError("V must be finite and nonnegative")
    return V


def _init(shape_w, shape_h, seed):
    rng = np.random.default_rng(seed)
    # 1 - U[0, 1) lies in (0, 1]
    return 1.0 - rng.random(shape_w), 1.0 - rng.random(shape_h)


def _smoothness(H):
    return float(np.sum(np.diff(H, axis=1) ** 2))


def _multiplicative(V, K, iters, beta, seed, check_nonneg=True):
    if K < 1:
        raise ValueError("K must be >= 1")
    if beta < 0:
        raise ValueError("beta must be >= 0")
    M, T = V.shape
    W, H = _init((M, K), (K, T), seed)
    # path-graph degree of each frame; the penalty's gradient splits into
    # beta * degree * H (positive) and beta * neighbour sum (negative)
    degree = np.full(T, 2.0)
    degree[0] = degree[-1] = 1.0
    if T == 1:
        degree[:] = 0.0
    trace = []
    for _ in range(iters):
        W *= (V @ H.T) / (W @ (H @ H.T) + EPS)
        num = W.T @ V
        den = (W.T @ W) @ H
        if beta:
            nbr = np.zeros_like(H)
            nbr[:, 1:] += H[:, :-1]
            nbr[:, :-1] += H[:, 1:]
            num = num + beta * nbr
            den = den + beta * degree * H
        H *= num / (den + EPS)
        if check_nonneg:
            assert np.all(W >= 0) and np.all(H >= 0)
        obj = float(np.sum((V - W @ H) ** 2))
        if beta:
            obj += beta * _smoothness(H)
        trace.append(obj)
    return NmfFactors(W, H, trace)


def nmf(V, K: int, iters: int = 500, seed=0) -> NmfFactors:
    """Euclidean NMF by Lee-Seung multiplicative updates: V (M x T) ~ W @ Hact."""
    return _multiplicative(_as_matrix(V), K, iters, 0.0, seed)


def tnmf(V, K: int, iters: int = 500, beta: float = 1.0, seed=0) -> NmfFactors:
    """NMF with a squared first-difference penalty ``beta`` on each activation row."""
    return _multiplicative(_as_matrix(V), K, iters, float(beta), seed)


def total_variation(H) -> np.ndarray:
    return np.sum(np.abs(np.diff(np.atleast_2d(H), axis=1)), axis=1)


def rms_error(A, B) -> float:
    A, B = np.asarray(A, dtype=float), np.asarray(B, dtype=float)
    if A.shape != B.shape:
        raise ValueError(f"shape mismatch: {A.shape} vs {B.shape}")
    return float(np.sqrt(np.mean((A - B) ** 2)))


def cosine_distance(A, B) -> float:
    a = np.asarray(A, dtype=float).ravel()
    b = np.asarray(B, dtype=float).ravel()
    if np.shape(A) != np.shape(B):
        raise ValueError(f"shape mismatch: {np.shape(A)} vs {np.shape(B)}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine distance is undefined for a zero matrix")
    return float(1.0 - a @ b / (na * nb))


METRICS = ("rms", "cosine")


@dataclass
class RelativeReport:
    rows: list          # dicts: sound, method, metric, value, ratio
    summary: list       # dicts: method, metric, median, q1, q3, n
    excluded: list      # sounds flagged for a zero NMF metric

    def table(self) -> str:
        lines = [f"{'sound':<24}{'method':<8}{'metric':<8}{'value':>14}{'ratio/NMF':>12}"]
        for r in self.rows:
            ratio = "n/a" if r["ratio"] is None else f"{r['ratio']:.4f}"
            lines.append(f"{r['sound']:<24}{r['method']:<8}{r['metric']:<8}{r['value']:>14.6g}{ratio:>12}")
        lines.append("")
        lines.append(f"{'method':<8}{'metric':<8}{'q1':>10}{'median':>10}{'q3':>10}")
        for s in self.summary:
            lines.append(f"{s['method']:<8}{s['metric']:<8}{s['q1']:>10.4f}{s['median']:>10.4f}{s['q3']:>10.4f}")
        if self.excluded:
            lines.append("excluded: " + ", ".join(self.excluded))
        return "\n".join(lines)

    def write_csv(self, path, extra_excluded=()):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row_type", "sound", "method", "metric", "value", "ratio_to_nmf",
                        "q1", "median", "q3"])
            for r in self.rows:
                w.writerow(["sound", r["sound"], r["method"], r["metric"], repr(r["value"]),
                            "" if r["ratio"] is None else repr(r["ratio"]), "", "", ""])
            for s in self.summary:
                w.writerow(["summary", "", s["method"], s["metric"], "", "", repr(s["q1"]),
                            repr(s["median"]), repr(s["q3"])])
            for name in list(self.excluded) + list(extra_excluded):
                w.writerow(["excluded", name, "", "", "", "", "", "", ""])


def relative_report(lfm_metrics: dict, tnmf_metrics: dict, nmf_metrics: dict) -> RelativeReport:
    """Per-sound metric ratios against NMF with quartile summaries.

    Each argument maps sound name -> {"rms": float, "cosine": float}.
    """
    if not (set(lfm_metrics) == set(tnmf_metrics) == set(nmf_metrics)):
        raise ValueError("metrics must cover the same sounds")
    methods = {"LFM": lfm_metrics, "tNMF": tnmf_metrics, "NMF": nmf_metrics}
    rows, excluded = [], []
    ratios = {(meth, met): [] for meth in methods for met in METRICS}
    for sound in sorted(nmf_metrics):
        zero = any(nmf_metrics[sound][met] == 0 for met in METRICS)
        if zero:
            excluded.append(sound)
        for meth, table in methods.items():
            for met in METRICS:
                value = float(table[sound][met])
                ratio = None if zero else value / nmf_metrics[sound][met]
                rows.append({"sound": sound, "method": meth, "metric": met, "value": value,
                             "ratio": ratio})
                if ratio is not None and math.isfinite(ratio):
                    ratios[(meth, met)].append(ratio)
    summary = []
    for (meth, met), vals in ratios.items():
        if vals:
            q1, med, q3 = np.percentile(vals, [25, 50, 75])
            summary.append({"method": meth, "metric": met, "median": float(med), "q1": float(q1),
                            "q3": float(q3), "n": len(vals)})
    return RelativeReport(rows, summary, excluded)


class NMF(TransformerMixin, BaseEstimator):
    """Euclidean NMF on frames x channels envelope data.

    ``fit(X)`` factorizes ``X.T`` (channels x frames) as basis @ activations;
    ``transform`` returns activations as frames x components.
    """

    def __init__(self, n_components=1, max_iter=500, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.random_state = random_state

    def _factorize(self, V):
        return _multiplicative(V, self.n_components, self.max_iter, self._smoothing(),
                               self.random_state)

    def _smoothing(self):
        return 0.0

    def fit(self, X, y=None):
        X = check_envelopes(X)
        self.factors_ = self._factorize(X.T)
        self.components_ = self.factors_.W.T
        self.n_features_in_ = X.shape[1]
        self.reconstruction_err_ = float(np.sqrt(self.factors_.objective_trace[-1])) \
            if self.factors_.objective_trace else np.nan
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).factors_.Hact.T

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = check_envelopes(X)
        W = self.components_.T
        _, H = _init(W.shape, (W.shape[1], X.shape[0]), self.random_state)
        V = X.T
        for _ in range(self.max_iter):
            H *= (W.T @ V) / ((W.T @ W) @ H + EPS)
        return H.T

    def inverse_transform(self, A):
        check_is_fitted(self, "components_")
        return np.asarray(A) @ self.components_


class TemporalNMF(NMF):
    """NMF with a squared-difference smoothness penalty on the activations."""

    def __init__(self, n_components=1, max_iter=500, beta=1.0, random_state=0):
        super().__init__(n_components=n_components, max_iter=max_iter, random_state=random_state)
        self.beta = beta

    def _smoothing(self):
        return float(self.beta)
