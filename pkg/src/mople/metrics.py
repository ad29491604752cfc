"""Estimation and clustering accuracy measures."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from sklearn.metrics import adjusted_mutual_info_score, adjusted_rand_score

MAX_ALIGN_COMPONENTS = 6


@dataclass(frozen=True)
class LabelAlignment:
    """``perm[c]`` is the estimated component matched to true component ``c``."""

    perm: tuple
    cost: float


@dataclass(frozen=True)
class EvalGrid:
    points: np.ndarray

    @classmethod
    def over(cls, u, D: int = 100) -> "EvalGrid":
        if D < 1:
            raise ValueError("D must be at least 1")
        u = np.asarray(u, dtype=float)
        return cls(np.linspace(u.min(), u.max(), D))


def align_labels(est_beta, est_sigma2, true_beta, true_sigma2) -> LabelAlignment:
    """Match estimated to true components by exhaustive search.

    Minimises ``sum_c ||beta_hat[perm[c]] - beta[c]||^2 + (s2_hat[perm[c]] - s2[c])^2``.
    """
    eb = np.asarray(est_beta, dtype=float).reshape(len(est_sigma2), -1)
    tb = np.asarray(true_beta, dtype=float).reshape(len(true_sigma2), -1)
    es = np.asarray(est_sigma2, dtype=float)
    ts = np.asarray(true_sigma2, dtype=float)
    C = ts.shape[0]
    if es.shape[0] != C or eb.shape != tb.shape:
        raise ValueError(f"cannot align {es.shape[0]} estimated components with {C} true ones")
    if C > MAX_ALIGN_COMPONENTS:
        raise ValueError(f"exhaustive alignment supports at most {MAX_ALIGN_COMPONENTS} components")
    cost = ((eb[:, None, :] - tb[None, :, :]) ** 2).sum(axis=2) + (es[:, None] - ts[None, :]) ** 2
    best, best_cost = None, np.inf
    for perm in itertools.permutations(range(C)):
        total = sum(cost[perm[c], c] for c in range(C))
        if total < best_cost:
            best, best_cost = perm, total
    return LabelAlignment(tuple(int(k) for k in best), float(best_cost))


def coef_mse_bias(estimates, truth: float):
    """Return ``(mse, bias)`` of aligned per-replication estimates of one coefficient."""
    est = np.asarray(estimates, dtype=float).ravel()
    if est.size == 0:
        raise ValueError("no replications")
    dev = est - truth
    return float(np.mean(dev**2)), float(np.mean(dev))


def curve_mae(g_hat, g_true) -> float:
    """Mean absolute difference between two curves evaluated on the same grid."""
    a = np.asarray(g_hat, dtype=float)
    b = np.asarray(g_true, dtype=float)
    if a.shape != b.shape:
        raise ValueError("curves must be evaluated on the same grid")
    return float(np.mean(np.abs(a - b)))


def _check_pair(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        raise ValueError("need at least two labels")
    return a, b


def ari(a, b) -> float:
    """Adjusted Rand index (Hubert and Arabie)."""
    a, b = _check_pair(a, b)
    return float(adjusted_rand_score(a, b))


def ami(a, b) -> float:
    """Adjusted mutual information with ``max(H(a), H(b))`` normalisation."""
    a, b = _check_pair(a, b)
    ka, kb = np.unique(a).size, np.unique(b).size
    if ka == 1 and kb == 1:
        return 1.0
    if ka == 1 or kb == 1:
        return 0.0
    return float(adjusted_mutual_info_score(a, b, average_method="max"))
