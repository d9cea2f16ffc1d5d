"""Command-line experiments: ``toy``, ``matfac`` and ``mcp``.

Every command writes plain CSV (one row per point or iteration) and a JSON
summary. Each output file carries the fully resolved configuration, as a
``# config:`` first line in CSV files and a ``config`` key in JSON.

Exit codes: 0 success, 1 data or I/O error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import EscapeConfig, Objective, escape_loop, toy_coordinate_ao, toy_diagonal_escape, toy_objective

log = logging.getLogger("aoescape")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- argument types ----------------------------------------------------------

def _positive_int(s):
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {s}")
    return v


def _nonneg_int(s):
    v = int(s)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a nonnegative integer, got {s}")
    return v


def _positive_float(s):
    v = float(s)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {s}")
    return v


def _int_list(s):
    try:
        vals = [int(t) for t in str(s).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None
    if not vals or min(vals) < 1:
        raise argparse.ArgumentTypeError("expected positive integers")
    return vals


def _float_list(s):
    try:
        vals = [float(t) for t in str(s).split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from None
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("expected positive numbers")
    return vals


def _method_list(s):
    from .matfac import METHODS

    if str(s) == "all":
        return list(METHODS)
    vals = [t.strip() for t in str(s).split(",") if t.strip()]
    bad = [v for v in vals if v not in METHODS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(
            f"unknown method(s) {', '.join(bad)}; choose from {', '.join(METHODS)} or 'all'")
    return vals


def _on_off(s):
    s = str(s).lower()
    if s in ("on", "true", "yes", "1"):
        return True
    if s in ("off", "false", "no", "0"):
        return False
    raise argparse.ArgumentTypeError(f"expected on/off, got {s!r}")


# -- parser ------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="aoescape", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key = value file; command-line flags override it")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("-v", "--verbose", action="store_true")

    t = sub.add_parser("toy", help="saddle escape on f(x,y) = (x-y)^2 - x^2 y^2")
    common(t)
    t.add_argument("--box", type=_positive_float, default=10.0, help="half-width of the search box")
    t.add_argument("--start", type=float, nargs=2, default=(0.0, 0.0), metavar=("X", "Y"))

    mf = sub.add_parser("matfac", help="matrix factorization experiment")
    common(mf)
    mf.add_argument("--data", help="ratings CSV (user_id,item_id,rating); synthetic data if omitted")
    mf.add_argument("--n-users", type=_positive_int, default=300)
    mf.add_argument("--n-items", type=_positive_int, default=300)
    mf.add_argument("--k-true", type=_positive_int, default=5)
    mf.add_argument("--density", type=_positive_float, default=0.2)
    mf.add_argument("--noise-sd", type=float, default=0.5)
    mf.add_argument("--min-user", type=_nonneg_int, default=0)
    mf.add_argument("--min-item", type=_nonneg_int, default=0)
    mf.add_argument("--k", type=_int_list, default="5", help="ranks, comma separated")
    mf.add_argument("--method", type=_method_list, default="all")
    mf.add_argument("--lambda-grid", type=_float_list, default="0.1,0.3,1,3,10")
    mf.add_argument("--folds", type=_positive_int, default=5)
    mf.add_argument("--s", type=_nonneg_int, default=50, help="expected participants per escape round")
    mf.add_argument("--runs", type=_positive_int, default=10)
    mf.add_argument("--escape", type=_on_off, default="on", help="off keeps only the baseline")
    mf.add_argument("--max-escape-iters", type=_positive_int, default=30)
    mf.add_argument("--max-rounds", type=_positive_int, default=20)

    mc = sub.add_parser("mcp", help="MC+ regularization surfaces")
    common(mc)
    mc.add_argument("--data", help="regression CSV (response first); simulated M1 data if omitted")
    mc.add_argument("--n", type=_positive_int, default=100)
    mc.add_argument("--d", type=_positive_int, default=200)
    mc.add_argument("--rho-min", type=float, default=0.3)
    mc.add_argument("--scaling", choices=("selective", "all"), default="selective")
    mc.add_argument("--n-lambda", type=_positive_int, default=50)
    mc.add_argument("--n-gamma", type=_positive_int, default=8)
    mc.add_argument("--gamma-lo", type=float, default=1.000001)
    mc.add_argument("--gamma-hi", type=float, default=150.0)
    mc.add_argument("--lambda-frac", type=_positive_float, default=0.01)
    mc.add_argument("--escape", type=_on_off, default="on")
    mc.add_argument("--max-rounds", type=_positive_int, default=5)
    mc.add_argument("--cd-tol", type=_positive_float, default=1e-8)
    return p


def read_config_file(path):
    """``key = value`` lines; ``#`` starts a comment. Keys use flag names."""
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}: line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = value
    return out


def parse_args(argv):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        values = read_config_file(args.config)
        sp = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(values) - known - {"config"})
        if unknown:
            raise UsageError(f"unknown config key(s): {', '.join(unknown)}")
        for key, value in values.items():
            if key == "start":
                values[key] = tuple(float(v) for v in value.replace(",", " ").split())
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
    return args


# -- output helpers ----------------------------------------------------------

def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.ndarray):
        return _jsonable(v.tolist())
    return v


def resolved_config(args):
    cfg = {k: v for k, v in vars(args).items() if k not in ("verbose", "out", "config")}
    return _jsonable(cfg)


def dumps(obj):
    return json.dumps(_jsonable(obj), indent=2) + "\n"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def write_csv(path, header, rows, config):
    buf = io.StringIO()
    buf.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(row.get(h)) for h in header])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _prepare_out(args):
    if not args.out:
        return None
    out = Path(args.out)
    if out.exists() and not out.is_dir():
        raise DataError(f"output path {out} exists and is not a directory")
    return out


# -- commands ----------------------------------------------------------------

def cmd_toy(args):
    out = _prepare_out(args)
    box = args.box
    start = np.array(args.start, dtype=float)
    if np.any(np.abs(start) > box):
        raise UsageError("--start must lie inside the box")
    f = Objective(lambda z: toy_objective(z[0], z[1]))
    ao = lambda z: toy_coordinate_ao(z, box)
    esc = lambda z: toy_diagonal_escape(z, box)
    ao_point, _ = ao(start)
    x, report = escape_loop(f, ao, esc, start, EscapeConfig())
    result = {
        "config": resolved_config(args),
        "start": start,
        "ao_point": ao_point,
        "ao_value": f(ao_point),
        "escaped_point": x,
        "escaped_value": f(x),
        "report": report.to_dict(),
    }
    text = dumps(result)
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "toy.json").write_text(text, encoding="utf-8")
    return 0


def _load_ratings(args):
    from .data import dense_subset_filter, load_ratings_csv, synth_lowrank_ratings

    if args.data:
        path = Path(args.data)
        if not path.is_file():
            raise DataError(f"data file {path} not found")
        try:
            data = load_ratings_csv(path)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    else:
        if not args.density <= 1:
            raise UsageError("--density must lie in (0, 1]")
        data = synth_lowrank_ratings(args.n_users, args.n_items, args.k_true,
                                     args.noise_sd, args.density, args.seed)
    if args.min_user or args.min_item:
        data = dense_subset_filter(data, args.min_user, args.min_item)
    if len(data) < 2 * args.folds:
        raise DataError("too few ratings for the requested split and folds")
    return data


def cmd_matfac(args):
    from .data import SplitSpec, split_half
    from .matfac import FitConfig, cross_validate_lambda, fit, mae, rounds_to_within

    if args.folds < 2:
        raise UsageError("--folds must be at least 2")
    out = _prepare_out(args)
    methods = args.method if args.escape else ["baseline"]
    data = _load_ratings(args)
    config = resolved_config(args)
    config["methods_run"] = methods

    def fit_cfg(method):
        return FitConfig(method=method, s=args.s, max_escape_iters=args.max_escape_iters,
                         max_rounds=args.max_rounds)

    # lambda chosen once per (K, method) on the first run's training half
    train0, _ = split_half(data, SplitSpec(seed=args.seed))
    cv_rows, lam_star = [], {}
    for K in args.k:
        for method in methods:
            if len(args.lambda_grid) == 1:
                lam_star[K, method] = args.lambda_grid[0]
                continue
            best, table = cross_validate_lambda(args.lambda_grid, K, train0, method,
                                                args.folds, args.seed, fit_cfg(method))
            lam_star[K, method] = best
            for lam, err in table.items():
                cv_rows.append({"K": K, "method": method, "lambda": lam, "cv_mae": err,
                                "selected": int(lam == best)})
            log.info("K=%d %s: lambda*=%g", K, method, best)

    run_rows, trace_rows = [], []
    for run in range(args.runs):
        train, test = split_half(data, SplitSpec(seed=args.seed + run))
        clip = train.rating_range()
        for K in args.k:
            for method in methods:
                lam = lam_star[K, method]
                res = fit(train, K, lam, fit_cfg(method), seed=args.seed + run, test=test,
                          clip=clip)
                run_rows.append({
                    "run": run, "K": K, "method": method, "lambda": lam,
                    "train_loss": res.train_loss, "test_mae": mae(res.model, test, clip),
                    "ao_sweeps": res.trace[-1]["ao_sweeps"],
                    "escape_iters": res.trace[-1]["escape_iters"],
                    "escape_iters_to_1pct": rounds_to_within(res.trace, 0.01),
                })
                for row in res.trace:
                    trace_rows.append({"run": run, "K": K, "method": method, **row})

    lam_table = {str(K): {m: lam_star[K, m] for m in methods} for K in args.k}
    mae_table, count_table = {}, {}
    for K in args.k:
        mae_table[str(K)], count_table[str(K)] = {}, {}
        for m in methods:
            vals = [r["test_mae"] for r in run_rows if r["K"] == K and r["method"] == m]
            mae_table[str(K)][m] = float(np.mean(vals))
            count_table[str(K)][m] = len(vals)
    summary = {"config": config, "n_ratings": len(data), "n_users": data.n, "n_items": data.m,
               "optimal_lambda": lam_table, "mean_test_mae": mae_table, "runs_per_cell": count_table}

    text = dumps(summary)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "runs.csv", ["run", "K", "method", "lambda", "train_loss", "test_mae",
                                     "ao_sweeps", "escape_iters", "escape_iters_to_1pct"],
                  run_rows, config)
        write_csv(out / "trace.csv", ["run", "K", "method", "step", "phase", "ao_sweeps",
                                      "escape_iters", "train_loss", "test_mae"], trace_rows, config)
        write_csv(out / "cv.csv", ["K", "method", "lambda", "cv_mae", "selected"], cv_rows, config)
        (out / "summary.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


SURFACE_HEADER = ["lambda_index", "gamma_index", "lambda", "gamma", "surface", "objective",
                  "nonzeros", "pct_delta_L", "var_sel_error", "pct_delta_e"]


def surface_rows(surf, beta_true=None):
    """One row per grid point and surface (A, B, C, kept)."""
    from .mcp import pct_delta_e, var_sel_error
    from .mcp.surfaces import ZERO_TOL

    kept = surf.kept
    coefs = {"A": surf.A, "B": surf.B, "C": surf.C, "kept": kept}
    objs = {"A": surf.obj_A, "B": surf.obj_B, "C": surf.obj_C, "kept": surf.obj_kept}
    rows = []
    for i, lam in enumerate(surf.lambda_grid):
        for g, gam in enumerate(surf.gamma_grid):
            base = objs["A"][i, g]
            err_A = var_sel_error(surf.A[i, g], beta_true) if beta_true is not None else None
            for name in ("A", "B", "C", "kept"):
                beta = coefs[name][i, g]
                err = var_sel_error(beta, beta_true) if beta_true is not None else None
                rows.append({
                    "lambda_index": i, "gamma_index": g, "lambda": float(lam), "gamma": float(gam),
                    "surface": name, "objective": float(objs[name][i, g]),
                    "nonzeros": int(np.sum(np.abs(beta) >= ZERO_TOL)),
                    "pct_delta_L": float((objs[name][i, g] - base) / base),
                    "var_sel_error": err,
                    "pct_delta_e": None if err is None else pct_delta_e(err_A, err),
                })
    return rows


def aggregates_from_rows(rows, n_gamma, with_truth):
    """Summary aggregates from the ``kept`` rows of :func:`surface_rows`."""
    from .mcp import gamma_halves, summarize_block

    kept = [r for r in rows if r["surface"] == "kept"]
    small, large = gamma_halves(n_gamma)
    out = {}
    for name, cols in (("small_gamma", small), ("large_gamma", large),
                       ("all_gamma", np.arange(n_gamma))):
        sel = [r for r in kept if r["gamma_index"] in set(cols.tolist())]
        dL = np.array([r["pct_delta_L"] for r in sel], dtype=float)
        de = None
        if with_truth:
            de = np.array([np.nan if r["pct_delta_e"] is None else r["pct_delta_e"] for r in sel],
                          dtype=float)
        out[name] = summarize_block(dL, de)
    return out


def cmd_mcp(args):
    from .data import DataFileError, load_regression_csv
    from .mcp import all_sets, correlation_set, fit_surfaces, make_grid, simulate_M1

    if not args.gamma_lo > 1 or not args.gamma_hi >= args.gamma_lo:
        raise UsageError("need 1 < --gamma-lo <= --gamma-hi")
    if not 0 < args.lambda_frac <= 1:
        raise UsageError("--lambda-frac must lie in (0, 1]")
    if not 0 < args.rho_min < 1 and args.scaling == "selective":
        raise UsageError("--rho-min must lie in (0, 1)")
    out = _prepare_out(args)
    if args.data:
        path = Path(args.data)
        if not path.is_file():
            raise DataError(f"data file {path} not found")
        try:
            prob, _ = load_regression_csv(path)
        except (DataFileError, ValueError) as exc:
            raise DataError(str(exc)) from None
        beta_true = None
    else:
        if args.d < 181:
            raise UsageError("simulated M1 data needs --d >= 181")
        prob, beta_true = simulate_M1(args.n, args.d, args.seed)
    config = resolved_config(args)

    lams, gams = make_grid(prob, args.n_lambda, args.n_gamma, args.gamma_lo, args.gamma_hi,
                           args.lambda_frac)
    sets = correlation_set(prob, args.rho_min) if args.scaling == "selective" else all_sets(prob.d)
    escape = EscapeConfig(max_rounds=args.max_rounds) if args.escape else None
    surf = fit_surfaces(prob, lams, gams, sets, escape, args.cd_tol)

    rows = surface_rows(surf, beta_true)
    summary = {
        "config": config,
        "n": prob.n, "d": prob.d,
        "lambda_grid": lams, "gamma_grid": gams,
        "aggregates": aggregates_from_rows(rows, gams.size, beta_true is not None),
        "fraction_C_not_worse_than_A": float(np.mean(surf.obj_C <= surf.obj_A + 1e-10)),
        "fraction_kept_from_C": float(np.mean(surf.kept_choice == "C")),
    }
    text = dumps(summary)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "surfaces.csv", SURFACE_HEADER, rows, config)
        (out / "summary.json").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


COMMANDS = {"toy": cmd_toy, "matfac": cmd_matfac, "mcp": cmd_mcp}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"aoescape: error: {exc}\n")
        return 2
    except DataError as exc:
        sys.stderr.write(f"aoescape: error: {exc}\n")
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"aoescape: error: {exc}\n")
        return 2
    except (DataError, OSError) as exc:
        sys.stderr.write(f"aoescape: error: {exc}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
