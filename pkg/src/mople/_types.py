"""Shared domain types, dataset ingestion and parameter validation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

VARIANTS = ("moe", "fmplr", "mople")
KERNELS = ("epanechnikov",)


class ValidationError(ValueError):
    """Raised when data, configuration or parameters violate an invariant."""


class NumericalError(RuntimeError):
    """Raised when a fit cannot proceed numerically."""


class BandwidthInfeasibleError(NumericalError):
    """A component has no responsibility-weighted kernel mass at some point."""


class DegenerateComponentError(NumericalError):
    """A component lost all of its responsibility mass or its design collapsed."""


class InitializationError(NumericalError):
    """Every initialization restart was degenerate."""


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Response ``y``, linear covariates ``X`` (n, p) and the smoothing covariate ``u``."""

    y: np.ndarray
    X: np.ndarray
    u: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float).ravel()
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        u = np.asarray(self.u, dtype=float).ravel()
        n = y.shape[0]
        if n < 1:
            raise ValidationError("dataset is empty (n = 0)")
        if X.ndim != 2 or X.shape[0] != n or u.shape[0] != n:
            raise ValidationError(
                f"inconsistent lengths: y has {n}, X has {X.shape}, u has {u.shape[0]}"
            )
        if X.shape[1] < 1:
            raise ValidationError("X must have at least one column")
        for label, arr in (("y", y), ("X", X), ("u", u)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"non-finite entries in {label}")
        if n > 1:
            const = np.flatnonzero(np.ptp(X, axis=0) == 0)
            if const.size:
                raise ValidationError(
                    f"column {self._colname(int(const[0]))} of X is constant; "
                    "intercepts are carried by the nonparametric part"
                )
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "u", _frozen(u))
        object.__setattr__(self, "names", tuple(self.names))

    def _colname(self, j: int) -> str:
        if len(self.names) == self.X.shape[1] + 2:
            return repr(self.names[1 + j])
        return str(j)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def u_range(self) -> float:
        return float(self.u.max() - self.u.min())


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "mople"
    C: int = 2
    h: float = 0.1
    kernel: str = "epanechnikov"
    max_iter: int = 500
    tol: float = 1e-8
    restarts: int = 10
    seed: int = 0
    # MoE expert form for the u covariate: "linear" enters u as a regressor,
    # "constant" reduces g_c to an intercept.
    moe_u_term: str = "linear"
    # FMPLR: keep gating intercepts free (False fixes pi_c = 1/C).
    fmplr_free_intercepts: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if isinstance(self.C, bool) or int(self.C) != self.C or self.C < 1:
            raise ValidationError(f"number of components C must be a positive integer, got {self.C!r}")
        if not (self.h > 0 and math.isfinite(self.h)):
            raise ValidationError(f"bandwidth h must be positive and finite, got {self.h!r}")
        if self.kernel not in KERNELS:
            raise ValidationError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.max_iter < 1:
            raise ValidationError("max_iter must be positive")
        if not self.tol > 0:
            raise ValidationError("tol must be positive")
        if self.restarts < 1:
            raise ValidationError("restarts must be positive")
        if self.seed < 0:
            raise ValidationError("seed must be a nonnegative integer")
        if self.moe_u_term not in ("linear", "constant"):
            raise ValidationError("moe_u_term must be 'linear' or 'constant'")


@dataclass(frozen=True, eq=False)
class GatingParams:
    """Softmax gating coefficients; the last row is the zero reference."""

    alpha0: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        a0 = np.asarray(self.alpha0, dtype=float).ravel()
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim == 1:
            a = a.reshape(a0.shape[0], -1)
        object.__setattr__(self, "alpha0", _frozen(a0))
        object.__setattr__(self, "alpha", _frozen(a))

    @property
    def C(self) -> int:
        return self.alpha0.shape[0]

    @classmethod
    def zeros(cls, C: int, p: int) -> "GatingParams":
        return cls(np.zeros(C), np.zeros((C, p)))

    def permuted(self, perm: Sequence[int]) -> "GatingParams":
        """Reorder components and re-reference to the new last component."""
        perm = np.asarray(perm)
        a0 = self.alpha0[perm] - self.alpha0[perm[-1]]
        a = self.alpha[perm] - self.alpha[perm[-1]]
        return GatingParams(a0, a)


@dataclass(frozen=True, eq=False)
class ExpertParams:
    beta: np.ndarray
    g_values: np.ndarray
    sigma2: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "beta", _frozen(np.atleast_2d(self.beta)))
        object.__setattr__(self, "g_values", _frozen(np.atleast_2d(self.g_values)))
        object.__setattr__(self, "sigma2", _frozen(np.ravel(self.sigma2)))

    @property
    def C(self) -> int:
        return self.sigma2.shape[0]

    def permuted(self, perm: Sequence[int]) -> "ExpertParams":
        perm = np.asarray(perm)
        return ExpertParams(self.beta[perm], self.g_values[perm], self.sigma2[perm])


def validate_params(gating: GatingParams, experts: ExpertParams, cfg: ModelConfig, p: Optional[int] = None) -> None:
    """Raise :class:`ValidationError` naming the first violated invariant."""
    C = cfg.C
    if gating.alpha0.shape != (C,) or gating.alpha.shape[0] != C:
        raise ValidationError(f"gating shape {gating.alpha.shape} does not match C={C}")
    if experts.beta.shape[0] != C or experts.sigma2.shape != (C,) or experts.g_values.shape[0] != C:
        raise ValidationError(f"expert shapes do not match C={C}")
    if p is not None and (gating.alpha.shape[1] != p or experts.beta.shape[1] != p):
        raise ValidationError(f"coefficient width does not match p={p}")
    if np.any(~np.isfinite(experts.sigma2)) or np.any(experts.sigma2 <= 0):
        raise ValidationError(f"nonpositive variance: sigma2={experts.sigma2.tolist()}")
    if not np.all(np.isfinite(experts.g_values)) or not np.all(np.isfinite(experts.beta)):
        raise ValidationError("non-finite expert parameters")
    if gating.alpha0[-1] != 0 or np.any(gating.alpha[-1] != 0):
        raise ValidationError("nonzero reference gating row (last component must be zero)")
    if cfg.variant == "fmplr" and np.any(gating.alpha != 0):
        raise ValidationError("FMPLR requires all gating slopes to be zero")
    if cfg.variant == "fmplr" and not cfg.fmplr_free_intercepts and np.any(gating.alpha0 != 0):
        raise ValidationError("FMPLR with fixed proportions requires zero gating intercepts")


@dataclass(frozen=True, eq=False)
class FitResult:
    gating: GatingParams
    experts: ExpertParams
    loglik: float
    loglik_trace: np.ndarray
    posteriors: np.ndarray
    labels: np.ndarray
    df: float
    bic: float
    iterations: int
    converged: bool
    config: Optional[ModelConfig] = None
    u: Optional[np.ndarray] = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict, repr=False)

    def to_dict(self) -> dict:
        d = {
            "gating": {"alpha0": self.gating.alpha0.tolist(), "alpha": self.gating.alpha.tolist()},
            "experts": {
                "beta": self.experts.beta.tolist(),
                "g_values": self.experts.g_values.tolist(),
                "sigma2": self.experts.sigma2.tolist(),
            },
            "loglik": self.loglik,
            "loglik_trace": np.asarray(self.loglik_trace).tolist(),
            "posteriors": np.asarray(self.posteriors).tolist(),
            "labels": np.asarray(self.labels).tolist(),
            "df": self.df,
            "bic": self.bic,
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }
        if self.config is not None:
            d["config"] = dict(self.config.__dict__)
        if self.u is not None:
            d["u"] = np.asarray(self.u).tolist()
        if self.diagnostics:
            d["diagnostics"] = dict(self.diagnostics)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FitResult":
        cfg = ModelConfig(**d["config"]) if d.get("config") else None
        return cls(
            gating=GatingParams(d["gating"]["alpha0"], d["gating"]["alpha"]),
            experts=ExpertParams(d["experts"]["beta"], d["experts"]["g_values"], d["experts"]["sigma2"]),
            loglik=float(d["loglik"]),
            loglik_trace=np.asarray(d["loglik_trace"], dtype=float),
            posteriors=np.asarray(d["posteriors"], dtype=float),
            labels=np.asarray(d["labels"], dtype=int),
            df=float(d["df"]),
            bic=float(d["bic"]),
            iterations=int(d["iterations"]),
            converged=bool(d["converged"]),
            config=cfg,
            u=None if d.get("u") is None else np.asarray(d["u"], dtype=float),
            diagnostics=dict(d.get("diagnostics") or {}),
        )


def _encode(obj):
    if isinstance(obj, float):
        if not math.isfinite(obj):
            return None
        return float(f"{obj:.17g}")
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    return obj


def dumps_json(obj: dict) -> str:
    """Serialize with 17 significant digits so floats round-trip exactly."""
    return json.dumps(_encode(obj), indent=1, sort_keys=True)


def validate_fit_result(result: FitResult, atol: float = 1e-10) -> None:
    """Check the invariants every :class:`FitResult` must satisfy."""
    Z = np.asarray(result.posteriors)
    if Z.ndim != 2 or Z.shape[1] != result.experts.C:
        raise ValidationError(f"posterior matrix has shape {Z.shape}")
    if not np.all(np.isfinite(Z)) or Z.min() < 0 or Z.max() > 1:
        raise ValidationError("posterior entries must lie in [0, 1]")
    if np.max(np.abs(Z.sum(axis=1) - 1.0)) > atol:
        raise ValidationError("posterior rows do not sum to one")
    labels = np.asarray(result.labels)
    if labels.shape != (Z.shape[0],) or np.any(labels != np.argmax(Z, axis=1)):
        raise ValidationError("labels are not the MAP assignment of the posteriors")
    if not math.isfinite(result.loglik) or not math.isfinite(result.df):
        raise ValidationError("non-finite log-likelihood or df")
    n = Z.shape[0]
    expected = -2.0 * result.loglik + math.log(n) * result.df
    if abs(result.bic - expected) > 1e-9 * max(1.0, abs(expected)):
        raise ValidationError(f"bic {result.bic} != -2*loglik + log(n)*df = {expected}")
    if result.config is not None:
        validate_params(result.gating, result.experts, result.config)
    elif np.any(result.experts.sigma2 <= 0):
        raise ValidationError("nonpositive variance")


def load_dataset(path, y: str, x: Sequence[str], u: str, delimiter: str = ",") -> Dataset:
    """Read a delimited file with a header and bind columns by name.

    Parameters
    ----------
    path : path-like
        CSV file (UTF-8, header row, '.' decimal separator).
    y, u : str
        Response and nonparametric covariate column names.
    x : sequence of str
        Linear covariate column names.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    ValidationError
        On missing columns, empty or unparseable cells, constant ``x`` columns
        or an empty file. Messages carry the row number and column name.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    if isinstance(x, str):
        x = [x]
    wanted = [y, *x, u]
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        missing = [c for c in wanted if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {missing}; header is {header}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            vals = []
            for col in wanted:
                cell = (rec.get(col) or "").strip()
                if cell == "" or cell.upper() in ("NA", "NAN"):
                    raise ValidationError(f"{path}: row {lineno}, column {col!r}: missing value")
                try:
                    v = float(cell)
                except ValueError:
                    raise ValidationError(
                        f"{path}: row {lineno}, column {col!r}: cannot parse {cell!r} as a number"
                    ) from None
                if not math.isfinite(v):
                    raise ValidationError(f"{path}: row {lineno}, column {col!r}: non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ValidationError(f"{path}: no data rows (n = 0)")
    A = np.array(rows)
    return Dataset(A[:, 0], A[:, 1:-1], A[:, -1], names=tuple(wanted))
