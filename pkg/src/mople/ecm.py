"""ECM fitting of mixtures of (partially) linear experts.

All three model variants share one loop and differ only in how the
component-wise "nonparametric" part ``g_c`` is smoothed and in which gating
coefficients are free:

* ``mople``: kernel smoother, full softmax gating.
* ``fmplr``: kernel smoother, gating intercepts only.
* ``moe``:   ``g_c`` is an intercept (``moe_u_term="constant"``) or an
  intercept plus a linear term in ``u`` (``"linear"``), full gating.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import logsumexp

from ._types import (
    DegenerateComponentError,
    Dataset,
    ExpertParams,
    FitResult,
    GatingParams,
    InitializationError,
    ModelConfig,
    NumericalError,
)
from .gating import fit_gating, gating_q, log_mixing_probs, newton_update
from .kernels import KernelSpec, kernel_matrix, kernel_smooth

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)
EMPTY_COMPONENT_MASS = 1e-8
VARIANCE_FLOOR_REL = 1e-8
INIT_ITER = 50
INIT_TOL = 1e-4


@dataclass
class EcmState:
    gating: GatingParams
    experts: ExpertParams
    posteriors: np.ndarray | None = None
    loglik: float = -np.inf
    iter: int = 0
    restart_logliks: list = field(default_factory=list)


@dataclass
class _Diagnostics:
    q_gaps: list = field(default_factory=list)
    floor_hits: int = 0
    nonmonotone: int = 0


class Smoother:
    """Component-wise linear smoother ``V -> S_c^T V`` for one variant.

    ``kind`` is ``"kernel"``, ``"constant"`` or ``"linear"``. For the kernel
    smoother the (n, n) weight matrix is built once and reused.
    """

    def __init__(self, u, kind: str = "kernel", spec: KernelSpec | None = None):
        self.u = np.asarray(u, dtype=float)
        self.kind = kind
        self.spec = spec
        self.W = kernel_matrix(self.u, spec) if kind == "kernel" else None
        if kind == "linear":
            self.B = np.column_stack([np.ones_like(self.u), self.u])

    @classmethod
    def for_config(cls, data: Dataset, cfg: ModelConfig) -> "Smoother":
        if cfg.variant == "moe":
            return cls(data.u, cfg.moe_u_term)
        return cls(data.u, "kernel", KernelSpec(cfg.kernel, cfg.h))

    def __call__(self, z: np.ndarray, V: np.ndarray) -> np.ndarray:
        if self.kind == "kernel":
            return kernel_smooth(self.W, z, V, self.spec.h)
        if self.kind == "constant":
            m = (z @ V) / z.sum()
            return np.broadcast_to(m, V.shape).copy()
        BtZ = self.B.T * z
        try:
            coef = np.linalg.solve(BtZ @ self.B, BtZ @ V)
        except np.linalg.LinAlgError:
            raise DegenerateComponentError("weighted design in u is singular") from None
        return self.B @ coef

    def evaluate(self, z, r, points, intercept: bool = True) -> tuple[np.ndarray, int]:
        """Smooth residuals ``r`` with weights ``z`` at arbitrary ``points``.

        Returns the values and the number of points whose kernel window was
        empty; those take the value of the nearest feasible point.
        ``intercept=False`` drops the fitted intercept of the parametric
        (constant / linear) forms and is ignored by the kernel smoother.
        """
        points = np.asarray(points, dtype=float)
        if self.kind == "constant":
            level = (z @ r) / z.sum() if intercept else 0.0
            return np.full(points.shape, level), 0
        if self.kind == "linear":
            BtZ = self.B.T * z
            a, b = np.linalg.solve(BtZ @ self.B, BtZ @ r)
            return (a if intercept else 0.0) + b * points, 0
        W = kernel_matrix(self.u, self.spec, points)
        den = z @ W
        num = (z * r) @ W
        ok = den > 0
        out = np.full(points.shape, np.nan)
        out[ok] = num[ok] / den[ok]
        if not ok.any():
            raise DegenerateComponentError("no evaluation point lies inside any kernel window")
        missing = np.flatnonzero(~ok)
        if missing.size:
            good = np.flatnonzero(ok)
            nearest = good[np.abs(points[good][None, :] - points[missing][:, None]).argmin(axis=1)]
            out[missing] = out[nearest]
        return out, int(missing.size)


def variance_floor(data: Dataset) -> float:
    v = float(np.var(data.y))
    return VARIANCE_FLOOR_REL * (v if v > 0 else 1.0)


def _log_densities(data: Dataset, experts: ExpertParams) -> np.ndarray:
    mu = data.X @ experts.beta.T + experts.g_values.T
    s2 = experts.sigma2[None, :]
    return -0.5 * (LOG_2PI + np.log(s2) + (data.y[:, None] - mu) ** 2 / s2)


def _log_joint(data: Dataset, gating: GatingParams, experts: ExpertParams) -> np.ndarray:
    return log_mixing_probs(gating, data.X) + _log_densities(data, experts)


def observed_loglik(data: Dataset, gating: GatingParams, experts: ExpertParams) -> float:
    """``sum_i log sum_c pi_c(x_i) phi(y_i; x_i'beta_c + g_c(u_i), sigma_c^2)``."""
    return float(np.sum(logsumexp(_log_joint(data, gating, experts), axis=1)))


def e_step(data: Dataset, state: EcmState) -> np.ndarray:
    """Posterior membership probabilities, computed in log space."""
    lj = _log_joint(data, state.gating, state.experts)
    Z = np.exp(lj - logsumexp(lj, axis=1, keepdims=True))
    return Z / Z.sum(axis=1, keepdims=True)


def q_function(data: Dataset, gating: GatingParams, experts: ExpertParams, Z) -> float:
    """Expected complete-data log-likelihood for fixed posteriors ``Z``."""
    return gating_q(gating, data.X, Z) + float(np.sum(Z * _log_densities(data, experts)))


def map_labels(Z) -> np.ndarray:
    # argmax returns the lowest index on ties
    return np.argmax(np.asarray(Z), axis=1)


def _check_mass(Z) -> None:
    mass = Z.sum(axis=0)
    if np.any(mass < EMPTY_COMPONENT_MASS):
        c = int(np.argmin(mass))
        raise DegenerateComponentError(f"component {c} is empty (total responsibility {mass[c]:.3g})")


def _smooth_all(data: Dataset, Z, smoother: Smoother) -> list:
    yX = np.column_stack([data.y, data.X])
    return [smoother(Z[:, c], yX) for c in range(Z.shape[1])]


def _g_from(M, beta) -> np.ndarray:
    return np.vstack([m[:, 0] - m[:, 1:] @ b for m, b in zip(M, beta)])


def update_g(data: Dataset, posteriors, beta, spec: KernelSpec | Smoother) -> np.ndarray:
    """Kernel-weighted mean of each component's partial residuals ``y - X beta_c``.

    Returns a (C, n) matrix of ``g_c(u_j)``.
    """
    smoother = spec if isinstance(spec, Smoother) else Smoother(data.u, "kernel", spec)
    Z = np.asarray(posteriors, dtype=float)
    beta = np.atleast_2d(beta)
    return np.vstack([smoother(Z[:, c], data.y - data.X @ beta[c]) for c in range(Z.shape[1])])


def _profile_step(data: Dataset, Z, M, floor: float):
    """Profiled WLS for ``beta_c``, the re-derived ``g_c`` and ``sigma_c^2``."""
    C, p = Z.shape[1], data.p
    beta = np.empty((C, p))
    g = np.empty((C, data.n))
    sigma2 = np.empty(C)
    hits = 0
    for c in range(C):
        z = Z[:, c]
        yt = data.y - M[c][:, 0]
        Xt = data.X - M[c][:, 1:]
        A = (Xt.T * z) @ Xt
        b = (Xt.T * z) @ yt
        if not np.all(np.isfinite(A)) or np.linalg.cond(A) > 1e14:
            raise DegenerateComponentError(f"profiled normal equations of component {c} are singular")
        beta[c] = np.linalg.solve(A, b)
        g[c] = M[c][:, 0] - M[c][:, 1:] @ beta[c]
        r = yt - Xt @ beta[c]
        s2 = float(z @ (r * r) / z.sum())
        if s2 < floor:
            hits += 1
            s2 = floor
        sigma2[c] = s2
    return beta, g, sigma2, hits


def update_beta_sigma(data: Dataset, posteriors, spec: KernelSpec | Smoother, floor: float | None = None):
    """Profiled weighted least squares for every component.

    ``beta_c`` solves ``(Xt' Z_c Xt) beta = Xt' Z_c yt`` with
    ``Xt = (I - S_c') X`` and ``yt = (I - S_c') y``. ``g_c`` is then
    re-derived from the new ``beta_c`` and ``sigma_c^2`` is the weighted
    mean squared residual against it, clamped to ``floor``.

    Returns
    -------
    beta : (C, p) ndarray
    sigma2 : (C,) ndarray
    g_values : (C, n) ndarray
    """
    smoother = spec if isinstance(spec, Smoother) else Smoother(data.u, "kernel", spec)
    Z = np.asarray(posteriors, dtype=float)
    _check_mass(Z)
    if floor is None:
        floor = variance_floor(data)
    M = _smooth_all(data, Z, smoother)
    beta, g, sigma2, hits = _profile_step(data, Z, M, floor)
    if hits:
        warnings.warn(f"{hits} component variance(s) clamped to the floor {floor:.3g}", RuntimeWarning)
    return beta, sigma2, g


def _gating_mode(cfg: ModelConfig) -> dict:
    if cfg.variant == "fmplr":
        return {"intercepts_only": True, "frozen": not cfg.fmplr_free_intercepts}
    return {"intercepts_only": False, "frozen": False}


def _run(data: Dataset, cfg: ModelConfig, state: EcmState, smoother: Smoother,
         max_iter: int, tol: float, check_q: bool = True):
    floor = variance_floor(data)
    gmode = _gating_mode(cfg)
    gating, experts = state.gating, state.experts
    ll_prev = observed_loglik(data, gating, experts)
    trace = [ll_prev]
    diag = _Diagnostics()
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Z = e_step(data, EcmState(gating, experts))
        _check_mass(Z)
        M = _smooth_all(data, Z, smoother)
        # CM-step 1: g from the current beta
        g_cm1 = _g_from(M, experts.beta)
        # CM-step 2
        new_gating, _ = newton_update(gating, data.X, Z, **gmode)
        beta, g, sigma2, hits = _profile_step(data, Z, M, floor)
        new_experts = ExpertParams(beta, g, sigma2)
        diag.floor_hits += hits
        if check_q:
            q0 = q_function(data, gating, ExpertParams(experts.beta, g_cm1, experts.sigma2), Z)
            q1 = q_function(data, new_gating, new_experts, Z)
            diag.q_gaps.append(q1 - q0)
        gating, experts = new_gating, new_experts
        ll = observed_loglik(data, gating, experts)
        if not math.isfinite(ll):
            raise NumericalError(f"log-likelihood became non-finite at iteration {it}")
        if ll < ll_prev - 1e-9 * (abs(ll_prev) + 1):
            diag.nonmonotone += 1
            logger.debug("log-likelihood decreased at iteration %d: %.10g -> %.10g", it, ll_prev, ll)
        trace.append(ll)
        if abs(ll - ll_prev) / (abs(ll_prev) + 1.0) < tol:
            converged = True
            break
        ll_prev = ll
    return gating, experts, np.array(trace), it, converged, diag


def _nonparametric_df(cfg: ModelConfig, data: Dataset) -> float:
    from .kernels import kernel_constants

    k0, int_k2, tau = kernel_constants(KernelSpec(cfg.kernel, cfg.h))
    return cfg.C * tau * data.u_range / cfg.h * (k0 - 0.5 * int_k2)


def effective_df(cfg: ModelConfig, data: Dataset) -> float:
    """Degrees of freedom entering the BIC.

    MoPLE: ``C tau_K |Omega| / h (K(0) - int K^2 / 2) + (2C - 1)(p + 1)``
    with ``|Omega| = max(u) - min(u)``. FMPLR drops the ``(C - 1) p`` gating
    slopes (and the intercepts too when the proportions are fixed). MoE
    counts its parameters directly: gating ``(C - 1)(p + 1)``, per
    component ``p`` slopes, an intercept, a ``u`` slope when linear, and a
    variance.
    """
    C, p = cfg.C, data.p
    if cfg.variant == "moe":
        k_u = 2 if cfg.moe_u_term == "linear" else 1
        return float((C - 1) * (p + 1) + C * (p + k_u) + C)
    parametric = (2 * C - 1) * (p + 1)
    if cfg.variant == "fmplr":
        parametric -= (C - 1) * p
        if not cfg.fmplr_free_intercepts:
            parametric -= C - 1
    return float(_nonparametric_df(cfg, data) + parametric)


def bic(loglik: float, df: float, n: int) -> float:
    """``-2 loglik + log(n) df``."""
    return -2.0 * loglik + math.log(n) * df


def _initial_from_posteriors(data: Dataset, Z, cfg: ModelConfig, smoother: Smoother) -> EcmState:
    gmode = _gating_mode(cfg)
    if gmode["frozen"]:
        gating = GatingParams.zeros(cfg.C, data.p)
    else:
        gating = fit_gating(data.X, Z, intercepts_only=gmode["intercepts_only"], max_steps=25)
    beta, sigma2, g = update_beta_sigma(data, Z, smoother)
    return EcmState(gating, ExpertParams(beta, g, sigma2))


def initialize(data: Dataset, cfg: ModelConfig, rng=None) -> EcmState:
    """Best of ``cfg.restarts`` short mixture-of-linear-experts fits.

    Each restart draws random soft assignments, takes one M-step and runs
    a short ECM with ``g_c`` held to a per-component intercept. The
    gating constraint of ``cfg.variant`` applies throughout. The restart
    with the highest observed log-likelihood wins; restarts that empty a
    component or hit the variance floor are discarded. The result does not
    depend on ``cfg.h``.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    elif not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    init_cfg = replace(cfg, variant="moe" if cfg.variant == "mople" else cfg.variant, moe_u_term="constant")
    smoother = Smoother(data.u, "constant")
    child_seeds = rng.integers(0, 2**63 - 1, size=cfg.restarts)
    best = None
    errors = []
    logliks = []
    for r, s in enumerate(child_seeds):
        sub = np.random.default_rng(int(s))
        Z0 = sub.dirichlet(np.ones(cfg.C), size=data.n)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("error", RuntimeWarning)
                st = _initial_from_posteriors(data, Z0, init_cfg, smoother)
                if cfg.C == 1:
                    gating, experts, it = st.gating, st.experts, 0
                    diag = _Diagnostics()
                else:
                    gating, experts, _, it, _, diag = _run(
                        data, init_cfg, st, smoother, INIT_ITER, INIT_TOL, check_q=False
                    )
        except (NumericalError, RuntimeWarning, np.linalg.LinAlgError) as exc:
            errors.append(f"restart {r}: {exc}")
            continue
        if diag.floor_hits:
            errors.append(f"restart {r}: variance floor reached")
            continue
        ll = observed_loglik(data, gating, experts)
        logliks.append(ll)
        logger.debug("restart %d: loglik %.6f after %d iterations", r, ll, it)
        if best is None or ll > best.loglik:
            best = EcmState(gating, experts, loglik=ll, iter=0)
        if cfg.C == 1:
            break
    if best is None:
        raise InitializationError("all initialization restarts were degenerate: " + "; ".join(errors[:3]))
    best.posteriors = e_step(data, best)
    best.restart_logliks = logliks
    return best


def fit(data: Dataset, cfg: ModelConfig, init: EcmState | None = None,
        smoother: Smoother | None = None) -> FitResult:
    """Run the ECM loop from ``init`` until the relative log-likelihood change
    drops below ``cfg.tol`` or ``cfg.max_iter`` iterations are used.

    Raises
    ------
    BandwidthInfeasibleError, DegenerateComponentError
        With the iteration at which the failure happened.
    """
    if init is None:
        init = initialize(data, cfg)
    if smoother is None:
        smoother = Smoother.for_config(data, cfg)
    gating = init.gating
    if cfg.variant == "fmplr":
        gating = GatingParams(gating.alpha0 if cfg.fmplr_free_intercepts else np.zeros(cfg.C),
                              np.zeros_like(gating.alpha))
    state = EcmState(gating, init.experts)
    gating, experts, trace, iters, converged, diag = _run(data, cfg, state, smoother, cfg.max_iter, cfg.tol)
    if diag.floor_hits:
        warnings.warn("variance floor reached during the fit; the solution may be degenerate", RuntimeWarning)
    Z = e_step(data, EcmState(gating, experts))
    loglik = float(trace[-1])
    df = effective_df(cfg, data)
    result = FitResult(
        gating=gating,
        experts=experts,
        loglik=loglik,
        loglik_trace=trace,
        posteriors=Z,
        labels=map_labels(Z),
        df=df,
        bic=bic(loglik, df, data.n),
        iterations=iters,
        converged=converged,
        config=cfg,
        u=data.u,
        diagnostics={
            "min_q_gap": float(min(diag.q_gaps)) if diag.q_gaps else 0.0,
            "floor_hits": diag.floor_hits,
            "nonmonotone_steps": diag.nonmonotone,
        },
    )
    return result


def evaluate_g(data: Dataset, result: FitResult, points, smoother: Smoother | None = None,
               moe_intercept: bool = True):
    """Evaluate every fitted ``g_c`` at ``points`` from the converged posteriors.

    For the kernel variants this is the kernel-weighted mean of the partial
    residuals at each point. For MoE, ``moe_intercept=False`` reports only
    the ``u`` term of each linear expert, treating the intercept as a
    separate coefficient.

    Returns
    -------
    values : (C, D) ndarray
    fallbacks : int
        Number of (component, point) pairs that fell outside every kernel
        window and were filled from the nearest feasible point.
    """
    if smoother is None:
        smoother = Smoother.for_config(data, result.config)
    Z = np.asarray(result.posteriors)
    out = []
    total = 0
    for c in range(Z.shape[1]):
        r = data.y - data.X @ result.experts.beta[c]
        vals, nfb = smoother.evaluate(Z[:, c], r, points, intercept=moe_intercept)
        out.append(vals)
        total += nfb
    return np.vstack(out), total


def permute_result(result: FitResult, perm) -> FitResult:
    """Relabel components by ``perm`` (new index k holds old component perm[k])."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    Z = np.asarray(result.posteriors)[:, perm]
    return replace(
        result,
        gating=result.gating.permuted(perm),
        experts=result.experts.permuted(perm),
        posteriors=Z,
        labels=inv[np.asarray(result.labels)],
    )
