import csv
import json
import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import expit
from scipy.stats import binomtest

from mople.simulation import (
    CASES,
    generate,
    get_scenario,
    run_replication,
    run_study,
    scenario_to_csv,
    task_seed,
)


@pytest.mark.parametrize("alias, name", [("1", "CaseI"), ("2", "CaseII"), ("3", "CaseIII"), ("CaseII", "CaseII")])
def test_aliases(alias, name):
    assert get_scenario(alias).name == name


def test_unknown_scenario():
    with pytest.raises(ValueError, match="unknown scenario"):
        get_scenario("CaseIV")


def test_true_curves():
    u = np.array([0.0, 0.25, 0.5, 1.0])
    c1, c3 = CASES["CaseI"], CASES["CaseIII"]
    np.testing.assert_allclose(c1.g_funcs[0](u), -3 * u)
    np.testing.assert_allclose(c1.g_funcs[1](u), 3 * u)
    np.testing.assert_allclose(c3.g_funcs[0](u), 2 * u**2)
    np.testing.assert_allclose(c3.g_funcs[1](u), [2.0, 1.0, 0.0, 2.0], atol=1e-15)


def test_component_share_matches_integrated_gating():
    p1, _ = quad(lambda x: expit(-0.5 + 2 * x), 0, 1)
    assert p1 == pytest.approx(0.6137, abs=1e-4)
    n = 20_000
    _, labels = generate(get_scenario("CaseIII"), n, np.random.default_rng(0))
    assert binomtest(int(np.sum(labels == 0)), n, p1).pvalue > 1e-3
    _, labels = generate(get_scenario("CaseII"), n, np.random.default_rng(0))
    assert binomtest(int(np.sum(labels == 0)), n, 0.5).pvalue > 1e-3


def test_noise_level_per_component():
    sc = get_scenario("CaseI")
    data, labels = generate(sc, 20_000, np.random.default_rng(1))
    x, u = data.X[:, 0], data.u
    for c in range(2):
        m = labels == c
        resid = data.y[m] - x[m] * sc.beta[c] - sc.g_funcs[c](u[m])
        assert np.var(resid) == pytest.approx(sc.sigma2[c], rel=0.05)
        assert abs(resid.mean()) < 0.03


def test_generation_is_deterministic():
    a, la = generate(get_scenario("CaseI"), 50, np.random.default_rng(3))
    b, lb = generate(get_scenario("CaseI"), 50, np.random.default_rng(3))
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(la, lb)


def test_task_seed_distinguishes_tasks():
    seeds = {task_seed(0, sc, n, k) for sc in CASES for n in (250, 500) for k in range(5)}
    assert len(seeds) == 3 * 2 * 5
    assert task_seed(0, "CaseI", 250, 0) == task_seed(0, "CaseI", 250, 0)


def test_scenario_csv(tmp_path, case3_small):
    data, labels = case3_small
    scenario_to_csv(tmp_path / "s.csv", data, labels)
    rows = list(csv.DictReader((tmp_path / "s.csv").open()))
    assert len(rows) == data.n
    assert float(rows[0]["y"]) == data.y[0]
    assert {r["label"] for r in rows} <= {"1", "2"}


@pytest.fixture(scope="module")
def one_rep():
    return run_replication("CaseI", ["moe", "fmplr", "mople"], 200, 0, 11, restarts=3, bandwidths=[0.15, 0.3])


def test_replication_shares_sample_across_methods(one_rep):
    assert len({r.seed for r in one_rep}) == 1
    assert [r.method for r in one_rep] == ["moe", "fmplr", "mople"]


def test_replication_records_are_sane(one_rep):
    for rec in one_rep:
        assert rec.status == "ok", rec.error
        assert rec.max_row_error < 1e-10
        assert rec.min_q_gap >= -1e-8
        assert rec.perm_loglik_change < 1e-8
        assert 0.5 < rec.ari <= 1.0
        np.testing.assert_allclose(rec.beta, [-3, 3], atol=1.0)
    assert math.isnan(one_rep[0].bandwidth)
    assert one_rep[2].bandwidth in (0.15, 0.3)


def test_study_report(tmp_path):
    rep = run_study(["CaseI"], ["moe", "mople"], [120], r=2, seed=4, restarts=2, bandwidths=[0.3])
    paths = rep.write(tmp_path, {"command": "test"})
    summary = list(csv.DictReader(paths["summary"].open()))
    assert [(s["method"], s["r"]) for s in summary] == [("moe", "2"), ("mople", "2")]
    for col in ("beta1_mse", "beta2_bias", "g1_mae", "g2_mae_full_curve", "ari", "ami", "failures"):
        assert col in summary[0]
    payload = json.loads(paths["json"].read_text())
    assert payload["manifest"]["command"] == "test" and len(payload["records"]) == 4


def test_study_is_reproducible():
    kw = dict(scenarios=["CaseII"], methods=["mople"], n_list=[100], r=2, seed=9, restarts=2, bandwidths=[0.3])
    a, b = run_study(**kw), run_study(**kw)
    assert [x.beta for x in a.records] == [x.beta for x in b.records]


def test_parallel_matches_serial():
    kw = dict(scenarios=["CaseI"], methods=["mople"], n_list=[100], r=2, seed=1, restarts=2, bandwidths=[0.3])
    a, b = run_study(**kw), run_study(threads=2, **kw)
    assert [x.beta for x in a.records] == [x.beta for x in b.records]


def test_study_argument_checks():
    with pytest.raises(ValueError):
        run_study(r=0)
    with pytest.raises(ValueError, match="unknown method"):
        run_study(methods=["gmm"], r=1)
