"""Command-line interface: ``mople fit|select|simulate|evaluate``."""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._types import (
    FitResult,
    ModelConfig,
    NumericalError,
    ValidationError,
    dumps_json,
    load_dataset,
    validate_fit_result,
)
from .datasets import PRESTIGE_COLUMNS, prestige_path
from .ecm import Smoother, evaluate_g, fit, initialize
from .metrics import EvalGrid, align_labels, ami, ari, curve_mae
from .selection import default_bandwidths, select
from .simulation import METHODS, default_threads, get_scenario, run_study

logger = logging.getLogger("mople")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest(args, inputs=()) -> dict:
    echo = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items() if k != "func"}
    return {
        "command": args.command,
        "config": echo,
        "seed": getattr(args, "seed", None),
        "version": __version__,
        "inputs": {str(p): _digest(p) for p in inputs},
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    }


def _parse_list(text, cast=float) -> list:
    return [cast(t) for t in str(text).replace(";", ",").split(",") if t.strip()]


def _parse_range(text) -> list:
    text = str(text).strip()
    for sep in ("..", ":"):
        if sep in text:
            lo, hi = text.split(sep)
            return list(range(int(lo), int(hi) + 1))
    if "-" in text.lstrip("-"):
        lo, hi = text.split("-", 1)
        return list(range(int(lo), int(hi) + 1))
    return _parse_list(text, int)


def _resolve_data(args):
    if str(args.data).lower() == "prestige":
        path = prestige_path()
        y = args.y or PRESTIGE_COLUMNS["y"]
        x = _parse_list(args.x, str) if args.x else PRESTIGE_COLUMNS["x"]
        u = args.u or PRESTIGE_COLUMNS["u"]
    else:
        path = Path(args.data)
        if not (args.y and args.x and args.u):
            raise UsageError("--y, --x and --u are required for a data file")
        y, x, u = args.y, _parse_list(args.x, str), args.u
    return path, load_dataset(path, y, x, u)


def _write_curves(stem: Path, data, result, points) -> list:
    values, fallbacks = evaluate_g(data, result, points)
    if fallbacks:
        logger.warning("%d curve evaluations fell outside every kernel window", fallbacks)
    C = values.shape[0]
    paths = [stem.with_name(stem.name + "_curves.csv")]
    with paths[0].open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["u"] + [f"g_{c + 1}" for c in range(C)])
        for d, u in enumerate(points):
            w.writerow([f"{u:.17g}"] + [f"{values[c, d]:.17g}" for c in range(C)])
    for c in range(C):
        p = stem.with_name(f"{stem.name}_curve_{c + 1}.csv")
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["u", "g"])
            for d, u in enumerate(points):
                w.writerow([f"{u:.17g}", f"{values[c, d]:.17g}"])
        paths.append(p)
    return paths


def _fit_payload(result: FitResult, manifest: dict) -> str:
    d = result.to_dict()
    d["manifest"] = manifest
    return dumps_json(d)


def _out_stem(out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    return out.with_suffix("") if out.suffix == ".json" else out


def cmd_fit(args) -> int:
    path, data = _resolve_data(args)
    h = args.bandwidth if args.bandwidth is not None else 1.0
    cfg = ModelConfig(variant=args.model, C=args.components, h=h, max_iter=args.max_iter, tol=args.tol,
                      restarts=args.restarts, seed=args.seed, moe_u_term=args.moe_u_term)
    if args.model != "moe" and (args.auto_bandwidth or args.bandwidth is None):
        cfg, _, result = select(data, args.model, [args.components], None, seed=args.seed,
                                restarts=args.restarts, base=cfg)
    else:
        result = fit(data, cfg, initialize(data, cfg, np.random.default_rng([args.seed, cfg.C])))
    validate_fit_result(result)
    stem = _out_stem(args.out)
    manifest = _manifest(args, [path])
    stem.with_suffix(".json").write_text(_fit_payload(result, manifest))
    grid = EvalGrid.over(data.u, args.grid_size)
    _write_curves(stem, data, result, grid.points)
    print(json.dumps({"loglik": result.loglik, "bic": result.bic, "df": result.df, "h": cfg.h,
                      "beta": result.experts.beta.tolist(), "converged": result.converged}))
    return 0


def cmd_select(args) -> int:
    path, data = _resolve_data(args)
    counts = _parse_range(args.components_range)
    if any(c < 1 for c in counts):
        raise ValidationError("component counts must be positive")
    if args.bandwidths and not args.auto_grid:
        bws = _parse_list(args.bandwidths)
        if any(h <= 0 for h in bws):
            raise ValidationError("bandwidths must be positive")
    else:
        bws = default_bandwidths(data)
    base = ModelConfig(variant=args.model, max_iter=args.max_iter, tol=args.tol, restarts=args.restarts,
                       seed=args.seed, moe_u_term=args.moe_u_term)
    best, grid, result = select(data, args.model, counts, bws, seed=args.seed, restarts=args.restarts, base=base)
    validate_fit_result(result)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = _manifest(args, [path])
    (out_dir / "manifest.json").write_text(dumps_json(manifest))
    grid.to_csv(out_dir / "grid.csv")
    (out_dir / "best_fit.json").write_text(_fit_payload(result, manifest))
    _write_curves(out_dir / "best_fit", data, result, EvalGrid.over(data.u, args.grid_size).points)
    print(json.dumps({"C": best.C, "h": best.h, "bic": result.bic}))
    return 0


def cmd_simulate(args) -> int:
    cases = ["CaseI", "CaseII", "CaseIII"] if str(args.case).lower() == "all" else [get_scenario(args.case).name]
    n_list = _parse_list(args.n_list, int)
    r = args.replications
    if args.full_study:
        n_list, r = [250, 500, 1000], 400
    methods = _parse_list(args.methods, str)
    for m in methods:
        if m not in METHODS:
            raise ValidationError(f"unknown method {m!r}")
    if r < 1 or any(n < 1 for n in n_list):
        raise ValidationError("replications and sample sizes must be positive")
    threads = args.threads or default_threads()

    def progress(done, total, elapsed):
        logger.info("%d/%d replications (%.0fs)", done, total, elapsed)

    report = run_study(cases, methods, n_list, r, args.seed, threads=threads, restarts=args.restarts,
                       progress=progress)
    out_dir = Path(args.out_dir)
    manifest = _manifest(args)
    paths = report.write(out_dir, manifest)
    (out_dir / "manifest.json").write_text(dumps_json(manifest))
    for row in report.summary():
        print(json.dumps(row))
    logger.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return 0


def _read_labels(path, column=None) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if not header:
            raise ValidationError(f"{path}: empty labels file")
        col = column or header[0]
        if col not in header:
            raise ValidationError(f"{path}: no column {col!r}")
        return [(rec.get(col) or "").strip() for rec in reader]


def cmd_evaluate(args) -> int:
    payload = json.loads(Path(args.fit).read_text())
    result = FitResult.from_dict(payload)
    validate_fit_result(result)
    ref = _read_labels(args.labels, args.label_column)
    if len(ref) != len(result.labels):
        raise ValidationError(f"label length mismatch: {len(ref)} reference vs {len(result.labels)} fitted")
    keep = [i for i, v in enumerate(ref) if v not in ("", "NA", "NaN", "nan")]
    ref_kept = [ref[i] for i in keep]
    est = np.asarray(result.labels)[keep]
    out = {"n": len(keep), "excluded_missing": len(ref) - len(keep),
           "ari": round(ari(ref_kept, est), 4), "ami": round(ami(ref_kept, est), 4)}
    if args.truth_spec:
        spec = _truth_spec(args.truth_spec)
        C = result.experts.C
        tb = np.asarray(spec["beta"], dtype=float).reshape(C, -1)
        ts = np.asarray(spec["sigma2"], dtype=float)
        al = align_labels(result.experts.beta, result.experts.sigma2, tb, ts)
        perm = list(al.perm)
        dev = result.experts.beta[perm] - tb
        out["alignment"] = perm
        out["beta_bias"] = dev.tolist()
        out["beta_mse"] = (dev**2).tolist()
        if spec.get("g") is not None:
            if not args.data:
                raise UsageError("--data (with --y/--x/--u) is required to compute MAE")
            _, data = _resolve_data(args)
            grid = EvalGrid.over(data.u, args.grid_size).points
            ghat, _ = evaluate_g(data, result, grid, Smoother.for_config(data, result.config))
            out["mae"] = [curve_mae(ghat[perm[c]], spec["g"][c](grid)) for c in range(C)]
    print(json.dumps(out))
    return 0


def _truth_spec(text) -> dict:
    p = Path(text)
    if p.is_file():
        d = json.loads(p.read_text())
        if "case" in d:
            sc = get_scenario(d["case"])
            return {"beta": sc.beta, "sigma2": sc.sigma2, "g": sc.g_funcs}
        return {"beta": d["beta"], "sigma2": d["sigma2"], "g": None}
    sc = get_scenario(text)
    return {"beta": sc.beta, "sigma2": sc.sigma2, "g": sc.g_funcs}


def _add_data_args(p):
    p.add_argument("--data", required=True, help="CSV path, or 'prestige' for the bundled fixture")
    p.add_argument("--y", help="response column")
    p.add_argument("--x", help="comma-separated linear covariate columns")
    p.add_argument("--u", help="nonparametric covariate column")


def _add_model_args(p):
    p.add_argument("--model", choices=METHODS, default="mople")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--moe-u-term", choices=("linear", "constant"), default="linear")
    p.add_argument("--grid-size", type=int, default=100, help="points in the exported curve grid")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mople", description=__doc__)
    parser.add_argument("--version", action="version", version=f"mople {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit", help="fit one model")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--components", type=int, default=2)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--auto-bandwidth", action="store_true")
    p.add_argument("--out", default="fit.json")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="BIC sweep over components and bandwidths")
    _add_data_args(p)
    _add_model_args(p)
    p.add_argument("--components-range", default="1..5")
    p.add_argument("--bandwidths")
    p.add_argument("--auto-grid", action="store_true")
    p.add_argument("--out-dir", default="select_out")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("simulate", help="replicate the simulation study")
    p.add_argument("--case", default="all", help="1, 2, 3 or all")
    p.add_argument("--n-list", default="250,500,1000")
    p.add_argument("--replications", type=int, default=100)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=10)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--full-study", action="store_true", help="r = 400 and n in {250, 500, 1000}")
    p.add_argument("--out-dir", default="simulation_out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="clustering and estimation metrics for a saved fit")
    p.add_argument("--fit", required=True)
    p.add_argument("--labels", required=True, help="CSV with reference labels")
    p.add_argument("--label-column")
    p.add_argument("--truth-spec", help="scenario name (1, 2, 3) or JSON with beta and sigma2")
    p.add_argument("--data")
    p.add_argument("--y")
    p.add_argument("--x")
    p.add_argument("--u")
    p.add_argument("--grid-size", type=int, default=100)
    p.set_defaults(func=cmd_evaluate)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code}) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(1, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError, ValueError, KeyError) as exc:
        return _fail(1, exc)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        return _fail(2, exc)


if __name__ == "__main__":
    sys.exit(main())
