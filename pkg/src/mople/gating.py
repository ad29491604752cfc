"""Softmax gating network and its posterior-weighted Newton update."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._types import GatingParams

MAX_HALVINGS = 20


@dataclass(frozen=True)
class GatingUpdateReport:
    steps_taken: int
    q_before: float
    q_after: float
    halvings: int


def _design(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return np.column_stack([np.ones(X.shape[0]), X])


def _coef(g: GatingParams) -> np.ndarray:
    # (C, p+1): intercept then slopes
    return np.column_stack([g.alpha0, g.alpha])


def log_mixing_probs(g: GatingParams, X) -> np.ndarray:
    """Log gating probabilities, shape (n, C)."""
    eta = _design(X) @ _coef(g).T
    return eta - logsumexp(eta, axis=1, keepdims=True)


def mixing_probs(g: GatingParams, x) -> np.ndarray:
    """Gating probabilities ``pi_c(x)``.

    A 1-d ``x`` of length p returns a length-C vector; a 2-d ``x`` returns
    an (n, C) matrix.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim <= 1:
        return np.exp(log_mixing_probs(g, x.reshape(1, -1)))[0]
    return np.exp(log_mixing_probs(g, x))


def gating_q(g: GatingParams, X, Z) -> float:
    """``sum_i sum_c z_ic log pi_c(x_i)``."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape[1] == 1:
        return 0.0
    logp = log_mixing_probs(g, X)
    return float(np.sum(Z * logp))


def gating_gradient(g: GatingParams, X, Z) -> np.ndarray:
    """Gradient of :func:`gating_q` for the free rows, shape (C-1, p+1)."""
    D = _design(X)
    P = np.exp(log_mixing_probs(g, X))
    return ((np.asarray(Z) - P)[:, :-1]).T @ D


def gating_hessian_block(g: GatingParams, X, c: int) -> np.ndarray:
    """Diagonal Hessian block ``-sum_i pi_ic (1 - pi_ic) d_i d_i^T`` for row ``c``."""
    D = _design(X)
    P = np.exp(log_mixing_probs(g, X))
    w = P[:, c] * (1.0 - P[:, c])
    return -(D * w[:, None]).T @ D


def newton_update(g: GatingParams, X, Z, intercepts_only: bool = False, frozen: bool = False):
    """One block-diagonal Newton step on each free gating row, with step halving.

    Each non-reference row takes ``alpha_c - H_cc^{-1} grad_c`` using its own
    Hessian block; the joint step is halved until :func:`gating_q` does not
    decrease. ``intercepts_only`` holds the slopes at zero (FMPLR);
    ``frozen`` returns ``g`` unchanged. A singular block leaves that row
    where it is.

    Returns
    -------
    (GatingParams, GatingUpdateReport)
    """
    C = g.C
    q0 = gating_q(g, X, Z)
    if C == 1 or frozen:
        return g, GatingUpdateReport(0, q0, q0, 0)
    D = _design(X)
    if intercepts_only:
        D = D[:, :1]
    P = np.exp(log_mixing_probs(g, X))
    R = np.asarray(Z) - P
    coef = _coef(g)
    step = np.zeros_like(coef)
    k = D.shape[1]
    for c in range(C - 1):
        grad = D.T @ R[:, c]
        w = P[:, c] * (1.0 - P[:, c])
        H = (D * w[:, None]).T @ D
        try:
            step[c, :k] = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            continue
        if not np.all(np.isfinite(step[c])):
            step[c] = 0.0
    if not np.any(step):
        return g, GatingUpdateReport(0, q0, q0, 0)
    t = 1.0
    for halvings in range(MAX_HALVINGS + 1):
        new = coef + t * step
        cand = GatingParams(new[:, 0], new[:, 1:])
        q1 = gating_q(cand, X, Z)
        if q1 >= q0:
            return cand, GatingUpdateReport(1, q0, q1, halvings)
        t *= 0.5
    return g, GatingUpdateReport(0, q0, q0, MAX_HALVINGS)


def fit_gating(X, Z, g0: GatingParams | None = None, intercepts_only: bool = False,
               max_steps: int = 100, tol: float = 1e-10) -> GatingParams:
    """Iterate :func:`newton_update` to a stationary point of :func:`gating_q`."""
    Z = np.asarray(Z, dtype=float)
    X = np.asarray(X, dtype=float)
    g = g0 if g0 is not None else GatingParams.zeros(Z.shape[1], X.shape[1])
    for _ in range(max_steps):
        g, rep = newton_update(g, X, Z, intercepts_only=intercepts_only)
        if rep.steps_taken == 0 or rep.q_after - rep.q_before <= tol * (1.0 + abs(rep.q_before)):
            break
    return g
