import math
import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from conftest import partial_linear_data
from mople import (
    BandwidthInfeasibleError,
    Dataset,
    DegenerateComponentError,
    ExpertParams,
    GatingParams,
    ModelConfig,
    fit,
    initialize,
    observed_loglik,
)
from mople.ecm import (
    EcmState,
    Smoother,
    bic,
    e_step,
    effective_df,
    evaluate_g,
    map_labels,
    permute_result,
    update_beta_sigma,
    update_g,
)
from mople.gating import mixing_probs
from mople.kernels import KernelSpec, smoother_matrix


def _random_params(seed, C, n, p=1):
    r = np.random.default_rng(seed)
    gating = GatingParams(np.append(r.standard_normal(C - 1), 0.0),
                          np.vstack([r.standard_normal((C - 1, p)), np.zeros((1, p))]))
    experts = ExpertParams(r.standard_normal((C, p)), r.standard_normal((C, n)), r.uniform(0.1, 2, C))
    return gating, experts


def test_loglik_matches_naive_double_loop(case3_small):
    data, _ = case3_small
    gating, experts = _random_params(0, 3, data.n)
    total = 0.0
    for i in range(data.n):
        pi = mixing_probs(gating, data.X[i])
        dens = sum(pi[c] * norm.pdf(data.y[i], data.X[i] @ experts.beta[c] + experts.g_values[c, i],
                                    math.sqrt(experts.sigma2[c])) for c in range(3))
        total += math.log(dens)
    assert observed_loglik(data, gating, experts) == pytest.approx(total, rel=1e-10)


def test_e_step_single_observation_example():
    # equal gating, densities 0.3 and 0.1 at the observation -> posteriors 0.75 / 0.25
    data = Dataset([0.0], [[0.0]], [0.0])
    s2 = [1 / (2 * math.pi * 0.3**2), 1 / (2 * math.pi * 0.1**2)]
    state = EcmState(GatingParams.zeros(2, 1), ExpertParams(np.zeros((2, 1)), np.zeros((2, 1)), s2))
    np.testing.assert_allclose(e_step(data, state), [[0.75, 0.25]], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 4), st.floats(1, 1e4))
def test_posteriors_are_probabilities(seed, C, spread):
    r = np.random.default_rng(seed)
    n = 15
    data = Dataset(spread * r.standard_normal(n), r.uniform(size=(n, 1)), r.uniform(size=n))
    gating, experts = _random_params(seed, C, n)
    Z = e_step(data, EcmState(gating, ExpertParams(experts.beta, experts.g_values, experts.sigma2 * 1e-3)))
    assert np.all(np.isfinite(Z)) and np.all(Z >= 0)
    np.testing.assert_allclose(Z.sum(axis=1), 1.0, atol=1e-12)


def test_map_labels_ties_go_to_lowest_index():
    np.testing.assert_array_equal(map_labels([[0.5, 0.5], [0.2, 0.8], [0.4, 0.4 + 1e-17]]), [0, 1, 0])


def test_update_g_with_flat_bandwidth_is_weighted_mean():
    data = partial_linear_data(30, 1)
    r = np.random.default_rng(2)
    Z = r.dirichlet([1, 1], size=30)
    beta = np.array([[1.0, 0.0], [0.0, -1.0]])
    g = update_g(data, Z, beta, KernelSpec(h=1e6))
    for c in range(2):
        resid = data.y - data.X @ beta[c]
        np.testing.assert_allclose(g[c], np.average(resid, weights=Z[:, c]), rtol=1e-9)


def _profile_oracle(data, Z, h):
    """Explicit smoother matrices and a weighted least squares via lstsq."""
    out = []
    for c in range(Z.shape[1]):
        z = Z[:, c]
        S = smoother_matrix(data.u, z, KernelSpec(h=h))
        I = np.eye(data.n)
        Xt = (I - S.T) @ data.X
        yt = (I - S.T) @ data.y
        w = np.sqrt(z)
        b = np.linalg.lstsq(Xt * w[:, None], yt * w, rcond=None)[0]
        g = S.T @ (data.y - data.X @ b)
        s2 = np.sum(z * (data.y - data.X @ b - g) ** 2) / z.sum()
        out.append((b, g, s2))
    return out


@pytest.mark.parametrize("h", [0.1, 0.3])
def test_profiled_update_matches_explicit_oracle(h):
    data = partial_linear_data(80, 3)
    Z = np.random.default_rng(4).dirichlet([2, 2], size=80)
    beta, sigma2, g = update_beta_sigma(data, Z, KernelSpec(h=h))
    for c, (b, gc, s2) in enumerate(_profile_oracle(data, Z, h)):
        np.testing.assert_allclose(beta[c], b, rtol=1e-9)
        np.testing.assert_allclose(g[c], gc, rtol=1e-9, atol=1e-12)
        assert sigma2[c] == pytest.approx(s2, rel=1e-9)


def test_constant_smoother_reduces_to_ols_with_intercept():
    data = partial_linear_data(50, 5)
    beta, sigma2, g = update_beta_sigma(data, np.ones((50, 1)), Smoother(data.u, "constant"))
    D = np.column_stack([np.ones(50), data.X])
    coef, res, *_ = np.linalg.lstsq(D, data.y, rcond=None)
    np.testing.assert_allclose(beta[0], coef[1:], rtol=1e-10)
    np.testing.assert_allclose(g[0], coef[0], rtol=1e-10)
    assert sigma2[0] == pytest.approx(res[0] / 50, rel=1e-10)


def test_variance_floor_warns():
    u = np.linspace(0, 1, 10)
    data = Dataset(2.0 * u, u[:, None] ** 2 + 0.1 * np.sin(9 * u)[:, None], u)
    with pytest.warns(RuntimeWarning, match="floor"):
        _, sigma2, _ = update_beta_sigma(data, np.ones((10, 1)), Smoother(u, "linear"))
    assert sigma2[0] == pytest.approx(1e-8 * np.var(data.y))


def test_empty_component_raises():
    data = partial_linear_data(20, 1)
    Z = np.column_stack([np.ones(20), np.zeros(20)])
    with pytest.raises(DegenerateComponentError, match="component 1"):
        update_beta_sigma(data, Z, KernelSpec(h=0.3))


def test_df_values():
    data = Dataset([0.0, 1.0, 2.0], [[0.0], [1.0], [0.5]], [0.0, 0.5, 1.0])
    # 2 * 3 * (1 / 0.1) * (0.75 - 0.3) + 3 * 2
    assert effective_df(ModelConfig(C=2, h=0.1), data) == pytest.approx(33.0)
    assert effective_df(ModelConfig(variant="fmplr", C=2, h=0.1), data) == pytest.approx(32.0)
    assert effective_df(ModelConfig(variant="fmplr", C=2, h=0.1, fmplr_free_intercepts=False),
                        data) == pytest.approx(31.0)
    assert effective_df(ModelConfig(variant="moe", C=2), data) == 10.0
    assert effective_df(ModelConfig(variant="moe", C=2, moe_u_term="constant"), data) == 8.0


def test_df_decreases_with_bandwidth():
    data = partial_linear_data(10, 0)
    dfs = [effective_df(ModelConfig(C=2, h=h), data) for h in (0.05, 0.1, 0.4)]
    assert dfs[0] > dfs[1] > dfs[2]


def test_bic_example():
    assert bic(-100.0, 5.0, 100) == pytest.approx(200 + 5 * math.log(100), abs=1e-12)


@pytest.fixture(scope="module")
def case3_fit(case3_small):
    data, truth = case3_small
    return data, truth, fit(data, ModelConfig(C=2, h=0.2, restarts=5, seed=3))


def test_fit_ascends_and_converges(case3_fit):
    _, _, res = case3_fit
    assert res.converged
    assert res.diagnostics["min_q_gap"] >= -1e-8
    assert res.diagnostics["nonmonotone_steps"] == 0
    assert np.all(np.diff(res.loglik_trace) >= -1e-9 * np.abs(res.loglik_trace[1:]))
    np.testing.assert_allclose(res.posteriors.sum(axis=1), 1.0, atol=1e-10)


def test_fit_loglik_is_consistent(case3_fit):
    data, _, res = case3_fit
    assert observed_loglik(data, res.gating, res.experts) == pytest.approx(res.loglik, rel=1e-12)
    assert res.bic == pytest.approx(-2 * res.loglik + math.log(data.n) * res.df)


def test_loglik_invariant_under_relabelling(case3_fit):
    data, _, res = case3_fit
    swapped = permute_result(res, [1, 0])
    assert abs(observed_loglik(data, swapped.gating, swapped.experts) - res.loglik) < 1e-8
    np.testing.assert_array_equal(swapped.posteriors, res.posteriors[:, ::-1])
    np.testing.assert_array_equal(swapped.labels, 1 - res.labels)


def test_fit_recovers_case3_coefficients(case3_fit):
    _, _, res = case3_fit
    b = np.sort(res.experts.beta[:, 0])
    np.testing.assert_allclose(b, [-3.0, 3.0], atol=0.8)


def test_initialization_keeps_best_restart(case3_small):
    data, _ = case3_small
    cfg = ModelConfig(C=2, restarts=6, seed=11)
    init = initialize(data, cfg)
    assert len(init.restart_logliks) >= 1
    assert init.loglik == max(init.restart_logliks)
    again = initialize(data, cfg)
    np.testing.assert_array_equal(init.experts.beta, again.experts.beta)


def test_initialization_ignores_bandwidth(case3_small):
    data, _ = case3_small
    a = initialize(data, ModelConfig(C=2, h=0.05, restarts=3, seed=1))
    b = initialize(data, ModelConfig(C=2, h=0.5, restarts=3, seed=1))
    np.testing.assert_array_equal(a.experts.g_values, b.experts.g_values)


def test_single_component_recovers_partial_linear_model():
    data = partial_linear_data(400, 9, beta=(1.5, -2.0), noise=0.2)
    res = fit(data, ModelConfig(C=1, h=0.1))
    np.testing.assert_allclose(res.experts.beta[0], [1.5, -2.0], atol=0.1)
    g, nfb = evaluate_g(data, res, np.linspace(0.1, 0.9, 9))
    assert nfb == 0
    centred = g[0] - g[0].mean()
    truth = np.sin(2 * np.pi * np.linspace(0.1, 0.9, 9))
    np.testing.assert_allclose(centred, truth - truth.mean(), atol=0.2)


def test_fmplr_gating_has_no_slopes(case3_small):
    data, _ = case3_small
    res = fit(data, ModelConfig(variant="fmplr", C=2, h=0.2, restarts=3))
    np.testing.assert_array_equal(res.gating.alpha, 0.0)


def test_moe_constant_term_gives_flat_curves(case3_small):
    data, _ = case3_small
    res = fit(data, ModelConfig(variant="moe", C=2, moe_u_term="constant", restarts=3))
    for c in range(2):
        assert np.ptp(res.experts.g_values[c]) < 1e-10


def test_tiny_bandwidth_is_reported_infeasible():
    u = np.array([0.0, 0.01, 0.02, 0.5, 0.98, 0.99, 1.0])
    data = Dataset(np.arange(7.0), np.linspace(0, 1, 7)[:, None] ** 2, u)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(BandwidthInfeasibleError, match="empty kernel window"):
            fit(data, ModelConfig(C=2, h=1e-4, restarts=2, max_iter=20))


def test_large_bandwidth_approaches_constant_curves_at_rate_h_squared(case3_small):
    # Epanechnikov weights vary by (|Omega| / h)^2 across the sample, so the
    # spread of g_c and the gap to the intercept-only fit shrink as 1 / h^2.
    data, _ = case3_small
    cfg = ModelConfig(C=2, restarts=3, seed=0)
    init = initialize(data, cfg)
    moe = fit(data, replace(cfg, variant="moe", moe_u_term="constant"), EcmState(init.gating, init.experts))
    spreads, gaps = [], []
    for m in (1e3, 1e4, 1e5):
        res = fit(data, replace(cfg, h=m * data.u_range), EcmState(init.gating, init.experts))
        spreads.append(np.max(np.ptp(res.experts.g_values, axis=1)))
        gaps.append(abs(res.loglik - moe.loglik))
    np.testing.assert_allclose(np.array(spreads[:-1]) / spreads[1:], 100, rtol=0.05)
    np.testing.assert_allclose(np.array(gaps[:-1]) / gaps[1:], 100, rtol=0.05)
    assert spreads[-1] < 1e-10 and gaps[-1] < 1e-8


def test_single_component_initialization_is_ols():
    data = partial_linear_data(60, 2)
    init = initialize(data, ModelConfig(C=1))
    D = np.column_stack([np.ones(60), data.X])
    coef = np.linalg.lstsq(D, data.y, rcond=None)[0]
    np.testing.assert_allclose(init.experts.beta[0], coef[1:], rtol=1e-10)
    np.testing.assert_allclose(init.experts.g_values[0], coef[0], rtol=1e-10)


def test_fit_is_bitwise_deterministic(case3_small):
    data, _ = case3_small
    cfg = ModelConfig(C=2, h=0.25, restarts=2, seed=8)
    a, b = fit(data, cfg), fit(data, cfg)
    assert a.loglik == b.loglik
    np.testing.assert_array_equal(a.posteriors, b.posteriors)
    np.testing.assert_array_equal(a.experts.g_values, b.experts.g_values)


def test_df_increases_with_components():
    data = partial_linear_data(10, 0)
    for variant in ("mople", "fmplr", "moe"):
        dfs = [effective_df(ModelConfig(variant=variant, C=C, h=0.2), data) for C in (1, 2, 3, 4)]
        assert np.all(np.diff(dfs) > 0)
