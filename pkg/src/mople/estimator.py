"""scikit-learn compatible estimator around the ECM engine."""

from __future__ import annotations

import numbers

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._types import Dataset, ModelConfig
from .ecm import Smoother, evaluate_g, fit as ecm_fit, initialize
from .gating import log_mixing_probs, mixing_probs
from .selection import select


class MixtureOfPartiallyLinearExperts(RegressorMixin, BaseEstimator):
    """Mixture of partially linear experts with softmax gating.

    Each expert is ``y = x' beta_c + g_c(u) + N(0, sigma_c^2)`` and the
    gating network is a softmax in ``x``. One column of the input matrix is
    the smoothing covariate ``u``; the rest are the linear covariates ``x``.

    Parameters
    ----------
    model : {'mople', 'fmplr', 'moe'}, default='mople'
        ``'fmplr'`` drops the gating slopes; ``'moe'`` replaces ``g_c`` by a
        linear (or constant, see ``moe_u_term``) function of ``u``.
    n_components : int, default=2
    bandwidth : float or 'auto', default='auto'
        Kernel bandwidth in units of ``u``. ``'auto'`` picks the value with
        the lowest BIC from ``bandwidths``.
    bandwidths : sequence of float, optional
        Candidate grid for ``bandwidth='auto'``; defaults to 10 log-spaced
        values between 6% and 50% of the range of ``u``.
    kernel : {'epanechnikov'}, default='epanechnikov'
    max_iter : int, default=500
    tol : float, default=1e-8
        Relative log-likelihood change that stops the iterations.
    n_restarts : int, default=10
        Random starts of the initialization.
    random_state : int, RandomState or None, default=None
    nonparametric_feature : int, default=-1
        Column index of ``u`` in ``X``.
    moe_u_term : {'linear', 'constant'}, default='linear'
    fmplr_free_intercepts : bool, default=True
        When False, FMPLR uses equal mixing proportions.

    Attributes
    ----------
    result_ : FitResult
    coef_ : ndarray of shape (n_components, n_linear_features)
    sigma2_ : ndarray of shape (n_components,)
    gating_intercept_, gating_coef_ : ndarray
    labels_ : ndarray of shape (n_samples,)
        MAP component of each training observation.
    posteriors_ : ndarray of shape (n_samples, n_components)
    loglik_, df_, bic_ : float
    bandwidth_ : float
    n_iter_ : int
    converged_ : bool
    """

    def __init__(
        self,
        model="mople",
        n_components=2,
        bandwidth="auto",
        bandwidths=None,
        kernel="epanechnikov",
        max_iter=500,
        tol=1e-8,
        n_restarts=10,
        random_state=None,
        nonparametric_feature=-1,
        moe_u_term="linear",
        fmplr_free_intercepts=True,
    ):
        self.model = model
        self.n_components = n_components
        self.bandwidth = bandwidth
        self.bandwidths = bandwidths
        self.kernel = kernel
        self.max_iter = max_iter
        self.tol = tol
        self.n_restarts = n_restarts
        self.random_state = random_state
        self.nonparametric_feature = nonparametric_feature
        self.moe_u_term = moe_u_term
        self.fmplr_free_intercepts = fmplr_free_intercepts

    def _split(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape[1] < 2:
            raise ValueError("X needs at least one linear column plus the nonparametric column")
        j = self.nonparametric_feature % X.shape[1]
        return np.delete(X, j, axis=1), X[:, j]

    def _seed(self) -> int:
        if isinstance(self.random_state, numbers.Integral):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(0, 2**31 - 1))

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        Xl, u = self._split(X)
        data = Dataset(y, Xl, u)
        seed = self._seed()
        h = 1.0 if self.bandwidth == "auto" else float(self.bandwidth)
        cfg = ModelConfig(
            variant=self.model, C=self.n_components, h=h, kernel=self.kernel, max_iter=self.max_iter,
            tol=self.tol, restarts=self.n_restarts, seed=seed, moe_u_term=self.moe_u_term,
            fmplr_free_intercepts=self.fmplr_free_intercepts,
        )
        if self.bandwidth == "auto" and self.model != "moe":
            cfg, self.selection_grid_, result = select(
                data, self.model, [self.n_components], self.bandwidths, seed=seed,
                restarts=self.n_restarts, base=cfg,
            )
        else:
            result = ecm_fit(data, cfg, initialize(data, cfg, np.random.default_rng([seed, cfg.C])))
        self._data = data
        self._smoother = Smoother.for_config(data, cfg)
        self.result_ = result
        self.config_ = cfg
        self.bandwidth_ = cfg.h
        self.coef_ = np.array(result.experts.beta)
        self.sigma2_ = np.array(result.experts.sigma2)
        self.gating_intercept_ = np.array(result.gating.alpha0)
        self.gating_coef_ = np.array(result.gating.alpha)
        self.labels_ = np.array(result.labels)
        self.posteriors_ = np.array(result.posteriors)
        self.loglik_ = result.loglik
        self.df_ = result.df
        self.bic_ = result.bic
        self.n_iter_ = result.iterations
        self.converged_ = result.converged
        self.n_features_in_ = X.shape[1]
        return self

    def g(self, u):
        """Fitted nonparametric functions at ``u``, shape (n_components, len(u))."""
        check_is_fitted(self, "result_")
        vals, _ = evaluate_g(self._data, self.result_, np.atleast_1d(np.asarray(u, dtype=float)), self._smoother)
        return vals

    def predict_proba(self, X):
        """Gating probabilities ``pi_c(x)``."""
        check_is_fitted(self, "result_")
        X = check_array(X)
        Xl, _ = self._split(X)
        return mixing_probs(self.result_.gating, Xl)

    def component_means(self, X):
        """Per-component expert means ``x' beta_c + g_c(u)``, shape (n, C)."""
        check_is_fitted(self, "result_")
        X = check_array(X)
        Xl, u = self._split(X)
        return Xl @ self.coef_.T + self.g(u).T

    def predict(self, X):
        """Conditional mean ``sum_c pi_c(x) (x' beta_c + g_c(u))``."""
        return np.sum(self.predict_proba(X) * self.component_means(X), axis=1)

    def posterior_proba(self, X, y):
        """Posterior component probabilities given the response."""
        check_is_fitted(self, "result_")
        X, y = check_X_y(X, y, y_numeric=True)
        Xl, _ = self._split(X)
        mu = self.component_means(X)
        lj = log_mixing_probs(self.result_.gating, Xl) + norm.logpdf(y[:, None], mu, np.sqrt(self.sigma2_))
        return np.exp(lj - logsumexp(lj, axis=1, keepdims=True))

    def predict_cluster(self, X, y):
        """MAP component of each observation."""
        return np.argmax(self.posterior_proba(X, y), axis=1)

    def fit_predict(self, X, y):
        return self.fit(X, y).labels_

    def bic(self):
        check_is_fitted(self, "result_")
        return self.bic_
