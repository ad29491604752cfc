"""BIC-based choice of the component count and the bandwidth."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ._types import Dataset, ModelConfig, NumericalError
from .ecm import EcmState, Smoother, bic, effective_df, fit, initialize

logger = logging.getLogger(__name__)

__all__ = ["SelectionGrid", "bic", "default_bandwidths", "effective_df", "select"]


@dataclass
class SelectionGrid:
    component_counts: list
    bandwidths: list
    results: dict = field(default_factory=dict)

    def ok_cells(self) -> list:
        return [k for k, v in self.results.items() if v["status"] == "ok"]

    def best(self):
        """Minimum-BIC ok cell; ties go to smaller C, then larger h."""
        cells = self.ok_cells()
        if not cells:
            return None
        return min(cells, key=lambda k: (self.results[k]["bic"], k[0], -k[1]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["C", "h", "loglik", "df", "bic", "status"])
            for (C, h), v in sorted(self.results.items()):
                w.writerow([C, f"{h:.17g}", f"{v['loglik']:.17g}", f"{v['df']:.17g}",
                            f"{v['bic']:.17g}", v["status"]])


def default_bandwidths(data: Dataset, num: int = 10) -> list:
    """``num`` log-spaced values from ``0.06 |Omega|`` to ``0.5 |Omega|``."""
    r = data.u_range
    if r <= 0:
        raise ValueError("u has zero range; no bandwidth grid can be built")
    return list(np.geomspace(0.06 * r, 0.5 * r, num))


def select(data: Dataset, variant: str, component_counts: Sequence[int], bandwidths: Sequence[float] | None = None,
           seed: int = 0, restarts: int = 10, base: ModelConfig | None = None):
    """Fit every (C, h) candidate and keep the lowest BIC.

    The initialization does not depend on ``h``, so it is computed once per
    ``C`` and shared across bandwidths. Cells that fail numerically are
    marked ``infeasible`` and excluded.

    Returns
    -------
    best : ModelConfig
    grid : SelectionGrid
    fit : FitResult

    Raises
    ------
    NumericalError
        If every cell is infeasible.
    """
    counts = [int(c) for c in component_counts]
    if not counts:
        raise ValueError("component_counts is empty")
    if variant == "moe":
        bws = [1.0]
    else:
        bws = default_bandwidths(data) if bandwidths is None else [float(h) for h in bandwidths]
    if not bws:
        raise ValueError("bandwidths is empty")
    base = base or ModelConfig()
    base = replace(base, variant=variant, seed=int(seed), restarts=int(restarts))
    grid = SelectionGrid(counts, bws)
    fits = {}
    smoothers = {}
    for C in counts:
        cfg0 = replace(base, C=C, h=bws[0])
        try:
            init = initialize(data, cfg0, np.random.default_rng([int(seed), C]))
        except NumericalError as exc:
            logger.info("C=%d: initialization failed: %s", C, exc)
            for h in bws:
                grid.results[(C, h)] = _infeasible(str(exc))
            continue
        for h in bws:
            cfg = replace(cfg0, h=h)
            if h not in smoothers:
                smoothers[h] = Smoother.for_config(data, cfg)
            try:
                res = fit(data, cfg, EcmState(init.gating, init.experts), smoothers[h])
            except NumericalError as exc:
                logger.info("C=%d h=%g infeasible: %s", C, h, exc)
                grid.results[(C, h)] = _infeasible(str(exc))
                continue
            grid.results[(C, h)] = {"bic": res.bic, "df": res.df, "loglik": res.loglik, "status": "ok"}
            fits[(C, h)] = res
    key = grid.best()
    if key is None:
        raise NumericalError("every (C, h) candidate is infeasible")
    return fits[key].config, grid, fits[key]


def _infeasible(msg: str) -> dict:
    return {"bic": math.nan, "df": math.nan, "loglik": math.nan, "status": "infeasible", "error": msg}
