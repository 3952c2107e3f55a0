"""Command-line front end: ``hflkit <command> [options]``.

Commands write CSV tables (fixed column order) and JSON documents (with a
``schema_version`` field) into ``--out``. Exit codes: 0 success, 2 invalid
input, 3 numerical failure, 4 configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import re
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .backtest import BacktestConfig, BacktestError, expanding_backtest
from .baselines import (BaselineError, kernel_pca_factors, pca_factors, power_factors,
                        rp_pca_factors)
from .econometrics import (HFL_NAME, LONG_COLUMNS, RankDeficientError, RegressionError,
                           expanding_slopes, table_long, table_wide, time_series_betas,
                           xs_test)
from .panel import FactorPanel, PanelError, ReturnPanel, load_factors, load_panel, write_panel
from .selection import (P_BUCKETS, SelectionError, abs_t_summary, bucket_shares,
                        double_selection, p_bucket)
from .sieve import FitError, HflConfig, fit_from_dict, fit_hfl
from .synth import simulate_hfl, simulate_multifactor

SCHEMA_VERSION = 1

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_CONFIG = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


# -- output helpers ------------------------------------------------------------------

def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def write_json(path: Path, doc: dict) -> None:
    doc = {"schema_version": SCHEMA_VERSION, **{k: v for k, v in doc.items()
                                                 if k != "schema_version"}}
    path.write_text(json.dumps(_jsonable(doc), indent=2) + "\n")


# -- configuration -------------------------------------------------------------------

def _load_config(path: Optional[str]) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(doc) - {"hfl", "backtest", "selection", "expanding"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    return doc


def _hfl_config(args) -> HflConfig:
    d = dict(args.config_doc.get("hfl", {}))
    if getattr(args, "degree", None) is not None:
        d["degree"] = args.degree
    d["seed"] = args.seed
    try:
        return HflConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid hfl config: {exc}") from None


def _backtest_config(args) -> BacktestConfig:
    d = dict(args.config_doc.get("backtest", {}))
    for key in ("initial_window", "step", "n_portfolios", "signal"):
        val = getattr(args, key, None)
        if val is not None:
            d[key] = val
    d["hfl"] = _hfl_config(args)
    try:
        return BacktestConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid backtest config: {exc}") from None


def _selection_config(args) -> dict:
    d = dict(args.config_doc.get("selection", {}))
    unknown = set(d) - {"n_folds"}
    if unknown:
        raise ConfigError(f"unknown selection config keys {sorted(unknown)}")
    return {"n_folds": int(d.get("n_folds", 5))}


def _out(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {out}: {exc}") from None
    return out


def _panel(args) -> ReturnPanel:
    return load_panel(args.panel, getattr(args, "classes", None))


def _fit(args, panel: ReturnPanel):
    if getattr(args, "fit", None):
        try:
            doc = json.loads(Path(args.fit).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise PanelError(f"cannot read fit file {args.fit}: {exc}") from None
        try:
            return fit_from_dict(doc, panel)
        except (KeyError, ValueError) as exc:
            raise PanelError(f"fit file {args.fit}: {exc}") from None
    return fit_hfl(panel, _hfl_config(args))


def _factor_files(paths: Sequence[str], panel: ReturnPanel) -> list:
    out = []
    for path in paths or ():
        fp = load_factors(path)
        fp.aligned_to(panel)
        out.append(fp)
    return out


# -- commands ------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    out = _out(args)
    if args.generator == "hfl":
        noise = args.noise_sd if args.noise_sd == "calibrated" else float(args.noise_sd)
        panel, truth = simulate_hfl(args.n, args.t, args.h, noise, seed=args.seed)
    else:
        noise = 0.0 if args.noise_sd == "calibrated" else float(args.noise_sd)
        panel, truth = simulate_multifactor(args.n, args.t, args.k, args.generator, noise,
                                            seed=args.seed)
    write_panel(panel, out / "panel.csv")
    (out / "truth.json").write_text(truth.to_json())
    return EXIT_OK


def cmd_fit(args) -> int:
    panel = _panel(args)
    out = _out(args)
    fit = fit_hfl(panel, _hfl_config(args))
    (out / "fit.json").write_text(fit.to_json())
    write_csv(out / "fitted.csv", ["date", *panel.asset_ids],
              ([d, *col] for d, col in zip(panel.dates, fit.fitted.T)))
    write_json(out / "foc.json", {
        **fit.foc.to_dict(),
        "scale_rms": float(np.sqrt(np.mean(panel.returns ** 2))),
        "loss": fit.loss,
    })
    return EXIT_OK


def _write_xs(out: Path, stem: str, results, labels) -> None:
    write_csv(out / f"{stem}.csv", LONG_COLUMNS, table_long(results, labels))
    rows = table_wide(results, labels)
    write_csv(out / f"{stem}_table.csv", rows[0], rows[1:])
    write_json(out / f"{stem}.json", {"results": [r.to_dict() for r in results]})


def cmd_xs_test(args) -> int:
    panel = _panel(args)
    out = _out(args)
    fit = _fit(args, panel)
    extras = {}
    for fp in _factor_files(args.factors, panel):
        betas = time_series_betas(panel, fp)
        for name in fp.factor_names:
            if name in extras:
                raise PanelError(f"factor {name!r} supplied twice")
            extras[name] = betas.column(name)
    res = xs_test(panel, fit, extras, label="model")
    _write_xs(out, "xs_test", [res], ["model"])
    if args.expanding is not None:
        cfg = _hfl_config(args)
        step = int(args.config_doc.get("expanding", {}).get("step", args.expanding_step))
        rows = [[r["date"], r["months"], r["beta"], r["fm_se"], r["lower"], r["upper"],
                 r["alpha"], r["alpha_se"]]
                for r in expanding_slopes(panel, lambda w: fit_hfl(w, cfg), args.expanding, step)]
        write_csv(out / "expanding.csv",
                  ["date", "months", "beta", "fm_se", "lower_2se", "upper_2se", "alpha", "alpha_se"],
                  rows)
    return EXIT_OK


_SPEC_RE = re.compile(r"^(pca|rp|kpca|power):(.+)$")


def _parse_k(text: str) -> list:
    if ".." in text:
        lo, hi = text.split("..", 1)
        return list(range(int(lo), int(hi) + 1))
    return [int(text)]


def parse_baseline_spec(spec: str) -> list:
    """Expand a baseline spec into (label, method, params) configurations.

    ``pca:k=1..3``, ``rp:k=1..2,gamma=10``, ``kpca:k=1..3,kernel=rbf``,
    ``power:mkt,3`` (factor name and maximum power).
    """
    m = _SPEC_RE.match(spec.strip())
    if not m:
        raise ConfigError(f"bad baseline spec {spec!r}")
    method, body = m.groups()
    if method == "power":
        parts = body.split(",")
        if len(parts) != 2:
            raise ConfigError(f"power spec needs 'name,max_power', got {body!r}")
        try:
            p = int(parts[1])
        except ValueError:
            raise ConfigError(f"bad max power in {spec!r}") from None
        return [(f"power:{parts[0]},{p}", "power", {"factor": parts[0], "max_power": p})]
    opts = {}
    for item in body.split(","):
        if "=" not in item:
            raise ConfigError(f"expected key=value in {spec!r}, got {item!r}")
        key, val = item.split("=", 1)
        opts[key.strip()] = val.strip()
    if "k" not in opts:
        raise ConfigError(f"spec {spec!r} needs k")
    try:
        ks = _parse_k(opts.pop("k"))
    except ValueError:
        raise ConfigError(f"bad k range in {spec!r}") from None
    allowed = {"pca": set(), "rp": {"gamma"}, "kpca": {"kernel", "bandwidth", "degree"}}[method]
    if set(opts) - allowed:
        raise ConfigError(f"unknown options {sorted(set(opts) - allowed)} in {spec!r}")
    out = []
    for k in ks:
        params = {"k": k}
        if method == "rp":
            params["gamma"] = float(opts.get("gamma", 10.0))
        if method == "kpca":
            params["kernel"] = opts.get("kernel", "rbf")
            if "bandwidth" in opts:
                params["bandwidth"] = float(opts["bandwidth"])
            if "degree" in opts:
                params["degree"] = int(opts["degree"])
        suffix = "".join(f",{a}={b}" for a, b in params.items() if a != "k")
        out.append((f"{method}:k={k}{suffix}", method, params))
    return out


_MARKET_ALIASES = ("mkt", "mktrf", "mkt-rf", "mkt_rf", "market")


def _market_series(name: str, factor_panels: list, panel: ReturnPanel):
    for fp in factor_panels:
        for fname in fp.factor_names:
            if fname == name or (name.lower() in _MARKET_ALIASES
                                 and fname.lower() in _MARKET_ALIASES):
                label = "MKTRF" if fname.lower() in _MARKET_ALIASES else fname
                return label, fp.values[fp.factor_names.index(fname)]
    if name.lower() in _MARKET_ALIASES:
        # no factor file: the equal-weighted panel average stands in for the market
        return "MKTRF", panel.returns.mean(axis=0)
    raise PanelError(f"factor {name!r} not found in the supplied factor files")


def _baseline_extras(panel, method, params, factor_panels) -> dict:
    if method == "pca":
        res = pca_factors(panel, params["k"])
        return dict(zip(res.factor_names(), res.loadings.T))
    if method == "rp":
        res = rp_pca_factors(panel, params["k"], params["gamma"])
        return dict(zip(res.factor_names(), res.loadings.T))
    if method == "kpca":
        res = kernel_pca_factors(panel, params["k"], params["kernel"], params.get("bandwidth"),
                                 params.get("degree", 2))
        return dict(zip(res.factor_names(), res.loadings.T))
    label, series = _market_series(params["factor"], factor_panels, panel)
    fp = power_factors(series, params["max_power"], name=label, dates=panel.dates)
    betas = time_series_betas(panel, fp)
    return {n: betas.column(n) for n in fp.factor_names}


def cmd_compare(args) -> int:
    panel = _panel(args)
    out = _out(args)
    fit = _fit(args, panel)
    factor_panels = _factor_files(args.factors, panel)
    configs = [("hfl", None, None)]
    for spec in args.spec:
        configs.extend(parse_baseline_spec(spec))
    results, labels = [], []
    for label, method, params in configs:
        extras = {} if method is None else _baseline_extras(panel, method, params, factor_panels)
        results.append(xs_test(panel, fit, extras, label=label))
        labels.append(label)
    _write_xs(out, "compare", results, labels)
    return EXIT_OK


def _zoo_exposures(panel: ReturnPanel, zoo: FactorPanel) -> dict:
    """Per-asset single-factor time-series beta on each zoo factor."""
    out = {}
    for name in zoo.factor_names:
        out[name] = time_series_betas(panel, zoo.select([name])).column(name)
    return out


def cmd_zoo(args) -> int:
    panel = _panel(args)
    out = _out(args)
    fit = _fit(args, panel)
    zoo = load_factors(args.zoo)
    zoo.aligned_to(panel)
    expo = _zoo_exposures(panel, zoo)
    names = list(zoo.factor_names)
    if HFL_NAME in names:
        raise PanelError(f"zoo factor name {HFL_NAME!r} is reserved")
    header = ["factor", "model", "term", "estimate", "se", "t_stat", "p_value", "bucket"]
    rows, pvals, tvals = [], {}, {}

    def record(factor, model, term, est, se, t, p):
        rows.append([factor, model, term, est, se, t, p, p_bucket(p)])
        pvals.setdefault((model, term), []).append(p)
        tvals.setdefault((model, term), []).append(t)

    if args.mode == "pairwise":
        for name in names:
            for model, with_hfl in (("without_hfl", False), ("with_hfl", True)):
                res = xs_test(panel, fit, {name: expo[name]}, include_hfl=with_hfl)
                for term, key in (("alpha", "alpha"), ("zoo", name), ("hfl", HFL_NAME)):
                    if key in res.names:
                        record(name, model, term, res.coef(key), res.se(key), res.t(key),
                               res.p(key))
        write_csv(out / "zoo_pairwise.csv", header, rows)
    else:
        sel = _selection_config(args)
        y = panel.returns.mean(axis=1)
        hfl = fit.mean_fitted()
        zoo_mat = np.column_stack([expo[n] for n in names])
        # HFL as the target, every zoo exposure as a candidate control
        ds = double_selection(y, hfl, zoo_mat, names, target_name=HFL_NAME,
                              n_folds=sel["n_folds"], seed=args.seed)
        record(HFL_NAME, "ds_hfl_target", "alpha", ds.intercept, ds.intercept_se,
               ds.intercept_t, ds.intercept_p)
        record(HFL_NAME, "ds_hfl_target", "hfl", ds.coefficient, ds.se, ds.t_stat, ds.p_value)
        ds_docs = [ds.to_dict()]
        for j, name in enumerate(names):
            others = [k for k in range(len(names)) if k != j]
            controls = np.column_stack([hfl] + [zoo_mat[:, k] for k in others])
            ctrl_names = [HFL_NAME] + [names[k] for k in others]
            ds = double_selection(y, zoo_mat[:, j], controls, ctrl_names, target_name=name,
                                  n_folds=sel["n_folds"], seed=args.seed,
                                  always_include=[HFL_NAME])
            record(name, "ds", "alpha", ds.intercept, ds.intercept_se, ds.intercept_t,
                   ds.intercept_p)
            record(name, "ds", "zoo", ds.coefficient, ds.se, ds.t_stat, ds.p_value)
            ds_docs.append(ds.to_dict())
        write_csv(out / "zoo_ds.csv", header, rows)
        write_json(out / "zoo_ds.json", {"mode": "double_selection", "results": ds_docs})
    bucket_rows = []
    abs_rows = []
    for (model, term), pv in pvals.items():
        shares = bucket_shares(pv)
        bucket_rows.append([model, term, *(shares[b] for b in P_BUCKETS), len(pv)])
        s = abs_t_summary(tvals[(model, term)])
        abs_rows.append([model, term, s["mean_abs_t"], s["sd_abs_t"], s["count"]])
    write_csv(out / "zoo_buckets.csv", ["model", "term", *P_BUCKETS, "count"], bucket_rows)
    write_csv(out / "zoo_abs_t.csv", ["model", "term", "mean_abs_t", "sd_abs_t", "count"],
              abs_rows)
    return EXIT_OK


def cmd_backtest(args) -> int:
    panel = _panel(args)
    out = _out(args)
    cfg = _backtest_config(args)
    ps = expanding_backtest(panel, cfg)
    for fp in _factor_files(args.benchmark, panel):
        ps.add_alphas("+".join(fp.factor_names), fp, nw_lag=args.nw_lag)
    stats_rows = [[n, s.mean_pct, s.sd_pct, s.se_pct, "" if s.sharpe is None else s.sharpe]
                  for n, s in ps.stats().items()]
    write_csv(out / "backtest_performance.csv",
              ["portfolio", "mean_pct", "sd_pct", "se_pct", "sharpe"], stats_rows)
    alpha_rows = []
    for label, table in ps.alphas.items():
        for n, a in table.items():
            alpha_rows.append([label, n, 100.0 * a.alpha, 100.0 * a.se, a.t_stat, a.nw_lag])
    write_csv(out / "backtest_alphas.csv",
              ["benchmark", "portfolio", "alpha_pct", "nw_se_pct", "t_stat", "nw_lag"], alpha_rows)
    write_csv(out / "backtest_returns.csv", ["date", *ps.names],
              ([d, *ps.returns[:, k], ps.long_short[k]] for k, d in enumerate(ps.dates)))
    member_rows = []
    for rb in ps.rebalances:
        for j, members in enumerate(rb.members):
            for a in members:
                member_rows.append([rb.date, rb.max_date_seen, a, f"P{j + 1}"])
    write_csv(out / "backtest_membership.csv",
              ["rebalance_date", "max_date_seen", "asset_id", "portfolio"], member_rows)
    (out / "backtest.json").write_text(ps.to_json())
    return EXIT_OK


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hflkit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--seed", type=int, default=0, help="seed for every stochastic step")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="accepted for interface compatibility; computation is single-threaded")
    p.add_argument("--config", default=None, help="JSON file with hfl/backtest/selection sections")
    sub = p.add_subparsers(dest="command", required=True)

    def panel_args(sp, fit=True):
        sp.add_argument("--panel", required=True, help="panel CSV")
        sp.add_argument("--classes", default=None, help="asset-class sidecar JSON")
        sp.add_argument("--degree", type=int, default=None, help="polynomial degree K")
        if fit:
            sp.add_argument("--fit", default=None, help="fit JSON (refit when omitted)")

    sp = sub.add_parser("simulate", help="write a synthetic panel and its truth")
    sp.add_argument("--generator", default="hfl",
                    choices=("hfl", "linear", "single_index", "general"))
    sp.add_argument("--n", type=int, default=171)
    sp.add_argument("--t", type=int, default=360)
    sp.add_argument("--k", type=int, default=2, help="factor count for multifactor generators")
    sp.add_argument("--h", default=None, help="link: calibrated, a name, or coefficients 'c0,c1,...'")
    sp.add_argument("--noise-sd", default="calibrated", help="noise sd or 'calibrated'")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("fit", help="estimate the HFL model")
    panel_args(sp, fit=False)
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("xs-test", help="cross-sectional test of the HFL model")
    panel_args(sp)
    sp.add_argument("--factors", action="append", default=[], help="factor CSV (repeatable)")
    sp.add_argument("--expanding", type=int, default=None, metavar="MONTHS",
                    help="also write expanding-window slopes starting at this window")
    sp.add_argument("--expanding-step", type=int, default=1)
    sp.set_defaults(func=cmd_xs_test)

    sp = sub.add_parser("compare", help="HFL against PCA-family and power-factor baselines")
    panel_args(sp)
    sp.add_argument("--spec", action="append", default=[],
                    help="pca:k=1..3 | rp:k=1..3,gamma=10 | kpca:k=1..3,kernel=rbf | power:mkt,3")
    sp.add_argument("--factors", action="append", default=[], help="factor CSV (repeatable)")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("zoo", help="factor-zoo comparison")
    panel_args(sp)
    sp.add_argument("--zoo", required=True, help="zoo factor CSV")
    sp.add_argument("--mode", choices=("pairwise", "double_selection"), default="pairwise")
    sp.set_defaults(func=cmd_zoo)

    sp = sub.add_parser("backtest", help="expanding-window portfolio sorts")
    panel_args(sp, fit=False)
    sp.add_argument("--initial-window", dest="initial_window", type=int, default=None)
    sp.add_argument("--step", type=int, default=None)
    sp.add_argument("--n-portfolios", dest="n_portfolios", type=int, default=None)
    sp.add_argument("--signal", choices=("mean", "last"), default=None)
    sp.add_argument("--benchmark", action="append", default=[],
                    help="benchmark factor CSV for alpha regressions (repeatable)")
    sp.add_argument("--nw-lag", dest="nw_lag", type=int, default=3)
    sp.set_defaults(func=cmd_backtest)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.config_doc = _load_config(args.config)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FitError, RankDeficientError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (PanelError, RegressionError, BaselineError, SelectionError, BacktestError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
