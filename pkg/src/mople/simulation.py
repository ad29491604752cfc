"""Two-component simulation scenarios and the replication harness."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ._types import Dataset, NumericalError, dumps_json
from .metrics import EvalGrid, align_labels, ami, ari, coef_mse_bias, curve_mae

logger = logging.getLogger(__name__)

METHODS = ("moe", "fmplr", "mople")


def _neg3u(u):
    return -3.0 * u


def _pos3u(u):
    return 3.0 * u


def _sq(u):
    return 2.0 * u**2


def _cos2(u):
    # 2 cos(pi u)^2 read as 2 * cos^2(pi u)
    return 2.0 * np.cos(np.pi * u) ** 2


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    gating: tuple
    beta: tuple
    g_funcs: tuple
    sigma2: tuple

    @property
    def C(self) -> int:
        return len(self.beta)


CASES = {
    "CaseI": ScenarioSpec("CaseI", (-0.5, 2.0), (-3.0, 3.0), (_neg3u, _pos3u), (0.5, 0.25)),
    "CaseII": ScenarioSpec("CaseII", (0.0, 0.0), (-3.0, 3.0), (_sq, _cos2), (0.5, 0.25)),
    "CaseIII": ScenarioSpec("CaseIII", (-0.5, 2.0), (-3.0, 3.0), (_sq, _cos2), (0.5, 0.25)),
}
CASE_ALIASES = {"1": "CaseI", "2": "CaseII", "3": "CaseIII"}


def get_scenario(name) -> ScenarioSpec:
    key = CASE_ALIASES.get(str(name), str(name))
    try:
        return CASES[key]
    except KeyError:
        raise ValueError(f"unknown scenario {name!r}; choose from {sorted(CASES)}") from None


def generate(scenario: ScenarioSpec, n: int, rng=None):
    """Draw ``n`` observations and their true component labels (0-based).

    ``x, u ~ U(0, 1)`` independently; component 0 is chosen with
    probability ``logistic(a0 + a1 x)``; ``y = x beta_c + g_c(u) + N(0, sigma_c^2)``.
    """
    if n < 1:
        raise ValueError("n must be positive")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    x = rng.uniform(size=n)
    u = rng.uniform(size=n)
    a0, a1 = scenario.gating
    p1 = 1.0 / (1.0 + np.exp(-(a0 + a1 * x)))
    labels = np.where(rng.uniform(size=n) < p1, 0, 1)
    beta = np.asarray(scenario.beta)[labels]
    g = np.where(labels == 0, scenario.g_funcs[0](u), scenario.g_funcs[1](u))
    sd = np.sqrt(np.asarray(scenario.sigma2))[labels]
    y = x * beta + g + sd * rng.standard_normal(n)
    return Dataset(y, x[:, None], u, names=("y", "x", "u")), labels


def scenario_to_csv(path, data: Dataset, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["y", "x", "u"] + (["label"] if labels is not None else []))
        for i in range(data.n):
            row = [repr(float(data.y[i])), repr(float(data.X[i, 0])), repr(float(data.u[i]))]
            if labels is not None:
                row.append(int(labels[i]) + 1)
            w.writerow(row)


@dataclass
class ReplicationRecord:
    scenario: str
    method: str
    n: int
    replication: int
    seed: int
    status: str
    bandwidth: float = float("nan")
    beta: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    mae: list = field(default_factory=list)
    mae_full_curve: list = field(default_factory=list)
    ari: float = float("nan")
    ami: float = float("nan")
    loglik: float = float("nan")
    min_q_gap: float = float("nan")
    max_row_error: float = float("nan")
    perm_loglik_change: float = float("nan")
    mae_fallbacks: int = 0
    error: str = ""


def task_seed(seed: int, scenario: str, n: int, replication: int) -> int:
    """Seed shared by all methods of one replication so they see the same sample."""
    ss = np.random.SeedSequence([seed, sorted(CASES).index(scenario), n, replication])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


def run_replication(scenario_name: str, methods: Sequence[str], n: int, replication: int, seed: int,
                    restarts: int = 10, bandwidths=None, grid_size: int = 100) -> list:
    """Generate one sample and fit every method on it (C = 2)."""
    from .ecm import evaluate_g, observed_loglik, permute_result
    from .selection import default_bandwidths, select

    scenario = get_scenario(scenario_name)
    s = task_seed(seed, scenario.name, n, replication)
    data, truth = generate(scenario, n, np.random.default_rng(s))
    grid = EvalGrid.over(data.u, grid_size)
    bws = default_bandwidths(data) if bandwidths is None else list(bandwidths)
    out = []
    for method in methods:
        # per-method seed independent of which other methods run
        m_idx = METHODS.index(method)
        rec = ReplicationRecord(scenario.name, method, n, replication, s, "ok")
        try:
            best_cfg, _, res = select(data, method, [scenario.C], bws, seed=s + m_idx, restarts=restarts)
            rec.bandwidth = best_cfg.h if method != "moe" else float("nan")
            align = align_labels(res.experts.beta[:, 0], res.experts.sigma2,
                                 np.asarray(scenario.beta), np.asarray(scenario.sigma2))
            perm = align.perm
            rec.beta = [float(res.experts.beta[perm[c], 0]) for c in range(scenario.C)]
            rec.sigma2 = [float(res.experts.sigma2[perm[c]]) for c in range(scenario.C)]
            truth_g = [scenario.g_funcs[c](grid.points) for c in range(scenario.C)]
            ghat, nfb = evaluate_g(data, res, grid.points)
            rec.mae_full_curve = [curve_mae(ghat[perm[c]], truth_g[c]) for c in range(scenario.C)]
            if method == "moe":
                ghat, _ = evaluate_g(data, res, grid.points, moe_intercept=False)
            rec.mae = [curve_mae(ghat[perm[c]], truth_g[c]) for c in range(scenario.C)]
            rec.mae_fallbacks = nfb
            rec.ari = ari(truth, res.labels)
            rec.ami = ami(truth, res.labels)
            rec.loglik = res.loglik
            rec.min_q_gap = res.diagnostics.get("min_q_gap", float("nan"))
            rec.max_row_error = float(np.max(np.abs(res.posteriors.sum(axis=1) - 1.0)))
            swapped = permute_result(res, [1, 0])
            rec.perm_loglik_change = abs(observed_loglik(data, swapped.gating, swapped.experts) - res.loglik)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            rec.status = "failed"
            rec.error = f"{type(exc).__name__}: {exc}"
            logger.warning("%s %s n=%d rep=%d failed: %s", scenario.name, method, n, replication, exc)
        out.append(rec)
    return out


def _run_task(args):
    return run_replication(*args[:5], **args[5])


@dataclass
class ReplicationReport:
    records: list
    r: int
    seed: int

    def summary(self) -> list:
        """Aggregate rows keyed by (scenario, method, n), mirroring the tables."""
        rows = []
        keys = sorted({(rec.scenario, rec.method, rec.n) for rec in self.records},
                      key=lambda k: (k[0], METHODS.index(k[1]) if k[1] in METHODS else 9, k[2]))
        for sc, method, n in keys:
            recs = [x for x in self.records if (x.scenario, x.method, x.n) == (sc, method, n)]
            ok = [x for x in recs if x.status == "ok"]
            row = {"scenario": sc, "method": method, "n": n, "r": len(recs),
                   "failures": len(recs) - len(ok)}
            spec = get_scenario(sc)
            if ok:
                est = np.array([x.beta for x in ok])
                for c in range(spec.C):
                    mse, bias = coef_mse_bias(est[:, c], spec.beta[c])
                    row[f"beta{c + 1}_mse"] = mse
                    row[f"beta{c + 1}_bias"] = bias
                mae = np.array([x.mae for x in ok])
                full = np.array([x.mae_full_curve for x in ok])
                for c in range(spec.C):
                    row[f"g{c + 1}_mae"] = float(np.mean(mae[:, c]))
                for c in range(spec.C):
                    row[f"g{c + 1}_mae_full_curve"] = float(np.mean(full[:, c]))
                row["ari"] = float(np.mean([x.ari for x in ok]))
                row["ami"] = float(np.mean([x.ami for x in ok]))
            rows.append(row)
        return rows

    def write(self, out_dir, manifest: dict | None = None) -> dict:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {}
        rec_path = out_dir / "replications.csv"
        fields = list(ReplicationRecord.__dataclass_fields__)
        with rec_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(fields)
            for rec in self.records:
                w.writerow([_fmt(getattr(rec, f)) for f in fields])
        paths["records"] = rec_path
        summ = self.summary()
        cols = []
        for row in summ:
            cols += [k for k in row if k not in cols]
        sum_path = out_dir / "summary.csv"
        with sum_path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in summ:
                w.writerow([_fmt(row.get(k, "")) for k in cols])
        paths["summary"] = sum_path
        json_path = out_dir / "report.json"
        json_path.write_text(dumps_json({
            "manifest": manifest or {},
            "r": self.r,
            "seed": self.seed,
            "summary": summ,
            "records": [rec.__dict__ for rec in self.records],
        }))
        paths["json"] = json_path
        return paths


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.17g}"
    if isinstance(v, list):
        return json.dumps([float(f"{x:.17g}") for x in v])
    return v


def run_study(scenarios: Sequence[str] = ("CaseI", "CaseII", "CaseIII"), methods: Sequence[str] = METHODS,
              n_list: Sequence[int] = (250, 500, 1000), r: int = 100, seed: int = 0, threads: int = 1,
              restarts: int = 10, bandwidths=None, progress: Callable | None = None) -> ReplicationReport:
    """Replicate the simulation study; deterministic given ``seed``.

    Each (scenario, n, replication) sample is generated once and fitted by
    every method. Failed fits are kept as records with ``status="failed"``
    and excluded from the aggregates.
    """
    if r < 1:
        raise ValueError("r must be at least 1")
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}")
    names = [get_scenario(s).name for s in scenarios]
    tasks = [(sc, tuple(methods), int(n), k, int(seed), {"restarts": restarts, "bandwidths": bandwidths})
             for sc in names for n in n_list for k in range(r)]
    records = []
    t0 = time.time()
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            for i, recs in enumerate(ex.map(_run_task, tasks)):
                records.extend(recs)
                if progress:
                    progress(i + 1, len(tasks), time.time() - t0)
    else:
        for i, t in enumerate(tasks):
            records.extend(_run_task(t))
            if progress:
                progress(i + 1, len(tasks), time.time() - t0)
    return ReplicationReport(records, r, seed)


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get("MOPLE_THREADS", "1")))
    except ValueError:
        return 1
