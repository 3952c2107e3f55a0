"""Cross-sectional pricing regressions and their inference.

OLS, White and Newey-West standard errors, per-asset time-series betas, and
Fama-MacBeth tests of E[r_i] = alpha + beta * E[h(f_t lambda_i)] (+ extras).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from scipy import stats

from .panel import FactorPanel, ReturnPanel
from .sieve import HflFit, panel_hash

HFL_NAME = "HFL"


class RegressionError(ValueError):
    """Regression inputs are degenerate (too few rows, collinear, non-finite)."""


class RankDeficientError(RegressionError):
    pass


def stars(p: float) -> str:
    """Conventional significance marks: *** 1%, ** 5%, * 10%."""
    if not np.isfinite(p):
        return ""
    if p < 0.01:
        return "***"
    if p < 0.05:
        return "**"
    if p < 0.10:
        return "*"
    return ""


def add_constant(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return np.column_stack([np.ones(x.shape[0]), x])


@dataclass
class OlsResult:
    coefficients: np.ndarray
    residuals: np.ndarray
    se: np.ndarray
    r2: float
    adj_r2: float
    nobs: int
    rank: int
    fitted: np.ndarray = field(repr=False, default=None)


def ols(y, x) -> OlsResult:
    """Least squares of ``y`` on ``x`` (include the intercept column yourself).

    Rank-deficient designs get the minimum-norm solution. Classical standard
    errors use s^2 = SSR / (n - p) and the pseudo-inverse of X'X.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if y.shape != (n,):
        raise RegressionError(f"y has shape {y.shape}, expected ({n},)")
    if n <= p:
        raise RegressionError(f"need more observations than regressors (n={n}, p={p})")
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(x))):
        raise RegressionError("non-finite regression input")
    beta, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ beta
    ssr = float(resid @ resid)
    yc = y - y.mean()
    sst = float(yc @ yc)
    if sst > 0:
        r2 = 1.0 - ssr / sst
    else:
        r2 = 1.0 if ssr == 0 else float("nan")
    adj = 1.0 - (1.0 - r2) * (n - 1) / (n - p)
    s2 = ssr / (n - p)
    cov = s2 * np.linalg.pinv(x.T @ x)
    return OlsResult(beta, resid, np.sqrt(np.maximum(np.diag(cov), 0.0)), r2, adj, n, int(rank),
                     fitted=x @ beta)


def _bread(x: np.ndarray) -> np.ndarray:
    return np.linalg.pinv(x.T @ x)


def white_se(y, x, hc1: bool = False) -> np.ndarray:
    """Heteroskedasticity-robust (HC0, or HC1 with ``hc1=True``) standard errors."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    res = ols(y, x)
    scores = x * res.residuals[:, None]
    meat = scores.T @ scores
    bread = _bread(x)
    cov = bread @ meat @ bread
    if hc1:
        n, p = x.shape
        cov = cov * n / (n - p)
    return np.sqrt(np.maximum(np.diag(cov), 0.0))


def newey_west_cov(y, x, lag: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if lag < 0:
        raise RegressionError("lag must be non-negative")
    if lag >= n:
        raise RegressionError(f"lag {lag} must be smaller than the sample size {n}")
    res = ols(y, x)
    scores = x * res.residuals[:, None]
    meat = scores.T @ scores
    for ell in range(1, lag + 1):
        w = 1.0 - ell / (lag + 1.0)
        gamma = scores[ell:].T @ scores[:-ell]
        meat = meat + w * (gamma + gamma.T)
    bread = _bread(x)
    return bread @ meat @ bread


def newey_west_se(y, x, lag: int) -> np.ndarray:
    """HAC standard errors with Bartlett weights 1 - l/(lag+1), no small-sample factor.

    ``lag=0`` reproduces :func:`white_se` (HC0).
    """
    return np.sqrt(np.maximum(np.diag(newey_west_cov(y, x, lag)), 0.0))


# -- betas ---------------------------------------------------------------------

@dataclass
class BetaMatrix:
    names: tuple
    asset_ids: tuple
    values: np.ndarray  # N x M

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]


def time_series_betas(panel: ReturnPanel, factors: FactorPanel) -> BetaMatrix:
    """Slopes of each asset's returns on the factors (intercept included)."""
    factors.aligned_to(panel)
    x = add_constant(factors.values.T)
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        raise RankDeficientError(
            f"factor design is rank deficient (rank {rank} < {x.shape[1]}); "
            "every asset regression is affected"
        )
    if x.shape[0] <= x.shape[1]:
        raise RegressionError("more factors than months")
    coef, *_ = np.linalg.lstsq(x, panel.returns.T, rcond=None)
    return BetaMatrix(factors.factor_names, panel.asset_ids, coef[1:].T.copy())


# -- Fama-MacBeth -------------------------------------------------------------------

@dataclass
class FmSeries:
    names: tuple
    dates: tuple
    monthly: np.ndarray  # T x p, intercept first
    mean: np.ndarray
    se: np.ndarray


@dataclass
class XsTestResult:
    names: tuple  # "alpha" first, then slopes
    estimates: np.ndarray
    fm_se: np.ndarray
    t_stats: np.ndarray
    p_values: np.ndarray
    adj_r2: float
    mape_pct: float
    n_assets: int
    n_months: int
    residuals: np.ndarray = field(repr=False, default=None)
    label: str = ""

    @property
    def alpha(self) -> float:
        return float(self.estimates[0])

    @property
    def slopes(self) -> dict:
        return {n: float(v) for n, v in zip(self.names[1:], self.estimates[1:])}

    def coef(self, name: str) -> float:
        return float(self.estimates[self.names.index(name)])

    def se(self, name: str) -> float:
        return float(self.fm_se[self.names.index(name)])

    def t(self, name: str) -> float:
        return float(self.t_stats[self.names.index(name)])

    def p(self, name: str) -> float:
        return float(self.p_values[self.names.index(name)])

    def rows(self):
        """(name, estimate, se, t, p, stars), slopes first and alpha last as in the tables."""
        order = list(range(1, len(self.names))) + [0]
        for k in order:
            yield (self.names[k], float(self.estimates[k]), float(self.fm_se[k]),
                   float(self.t_stats[k]), float(self.p_values[k]), stars(self.p_values[k]))

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "label": self.label,
            "coefficients": [
                {"name": n, "estimate": e, "fm_se": s, "t_stat": t, "p_value": p, "stars": st}
                for n, e, s, t, p, st in self.rows()
            ],
            "adj_r2": self.adj_r2,
            "mape_pct": self.mape_pct,
            "n_assets": self.n_assets,
            "n_months": self.n_months,
        }


def _pvalues(t_stats: np.ndarray, df: int) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return 2.0 * stats.t.sf(np.abs(t_stats), df)


def fama_macbeth(panel: ReturnPanel, regressors, names: Optional[Sequence[str]] = None,
                 label: str = ""):
    """Monthly cross-sectional OLS of r_t on [1, regressors].

    ``regressors`` is N x q and constant over time. Point estimates are the
    time means of the monthly coefficients (identical to the OLS of mean
    returns on the regressors); standard errors are the time-series standard
    deviation over sqrt(T). Adjusted R^2 and MAPE come from the means
    regression. t-statistics use T - 1 degrees of freedom.
    """
    z = np.asarray(regressors, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    n, t = panel.returns.shape
    if z.shape[0] != n:
        raise RegressionError(f"regressors have {z.shape[0]} rows, panel has {n} assets")
    q = z.shape[1]
    if names is None:
        names = [f"x{j + 1}" for j in range(q)]
    if len(names) != q:
        raise RegressionError("names do not match the regressor count")
    if not np.all(np.isfinite(z)):
        raise RegressionError("non-finite regressor values")
    x = add_constant(z)
    if n <= x.shape[1]:
        raise RegressionError(f"need more assets than coefficients (N={n}, p={x.shape[1]})")
    rank = np.linalg.matrix_rank(x)
    if rank < x.shape[1]:
        raise RankDeficientError(
            f"cross-section for month {panel.dates[0]} is rank deficient "
            f"(rank {rank} < {x.shape[1]}); regressors are collinear"
        )
    monthly, *_ = np.linalg.lstsq(x, panel.returns, rcond=None)
    monthly = monthly.T  # T x p
    mean = monthly.mean(axis=0)
    se = monthly.std(axis=0, ddof=1) / np.sqrt(t)
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se > 0, mean / se, np.where(mean == 0, 0.0, np.inf * np.sign(mean)))
    pvals = _pvalues(tstat, t - 1)
    means_fit = ols(panel.returns.mean(axis=1), x)
    all_names = ("alpha", *names)
    result = XsTestResult(
        names=all_names,
        estimates=mean,
        fm_se=se,
        t_stats=tstat,
        p_values=pvals,
        adj_r2=float(means_fit.adj_r2),
        mape_pct=float(100.0 * np.mean(np.abs(means_fit.residuals))),
        n_assets=n,
        n_months=t,
        residuals=means_fit.residuals,
        label=label,
    )
    return result, FmSeries(all_names, panel.dates, monthly, mean, se)


def _check_fit(panel: ReturnPanel, fit: HflFit) -> None:
    if fit.fitted.shape != panel.returns.shape:
        raise RegressionError("HFL fit dimensions do not match the panel")
    if fit.panel_hash and fit.panel_hash != panel_hash(panel):
        raise RegressionError("HFL fit was produced on a different panel")


def xs_test(panel: ReturnPanel, fit: Optional[HflFit],
            extra: Optional[Mapping[str, np.ndarray]] = None, label: str = "",
            include_hfl: bool = True) -> XsTestResult:
    """Fama-MacBeth test with the mean HFL fitted value plus optional named extras."""
    cols, names = [], []
    if include_hfl:
        if fit is None:
            raise RegressionError("an HFL fit is required when include_hfl is set")
        _check_fit(panel, fit)
        cols.append(fit.mean_fitted())
        names.append(HFL_NAME)
    for name, vec in (extra or {}).items():
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (panel.n_assets,):
            raise RegressionError(f"extra regressor {name!r} has shape {vec.shape}")
        cols.append(vec)
        names.append(str(name))
    if not cols:
        raise RegressionError("no regressors")
    res, _ = fama_macbeth(panel, np.column_stack(cols), names, label=label)
    return res


def expanding_slopes(panel: ReturnPanel, fit_fn, min_window: int = 120, step: int = 1):
    """Slope path of the HFL cross-sectional test over expanding windows.

    ``fit_fn(window_panel)`` returns an :class:`HflFit` for the window. Yields
    one dict per window end with the HFL slope, its FM standard error and the
    two-standard-error band.
    """
    t = panel.n_months
    if not 2 <= min_window <= t:
        raise ValueError(f"min_window must lie in [2, {t}]")
    for end in range(min_window, t + 1, step):
        window = panel.window(end)
        fit = fit_fn(window)
        res = xs_test(window, fit)
        b, s = res.coef(HFL_NAME), res.se(HFL_NAME)
        yield {"date": panel.dates[end - 1], "months": end, "beta": b, "fm_se": s,
               "lower": b - 2.0 * s, "upper": b + 2.0 * s, "alpha": res.alpha,
               "alpha_se": res.se("alpha")}


# -- tables ------------------------------------------------------------------------

LONG_COLUMNS = ("config", "term", "estimate", "fm_se", "t_stat", "p_value", "stars")
FOOTER_TERMS = ("adj_r2", "mape_pct", "assets", "months")


def table_long(results: Sequence[XsTestResult], labels: Optional[Sequence[str]] = None) -> list:
    """Rows for the fixed-column CSV: coefficient rows, slopes first and alpha last,
    then footer rows carrying adj R^2, MAPE, asset and month counts in ``estimate``."""
    labels = labels or [r.label for r in results]
    rows = []
    for lab, res in zip(labels, results):
        for name, est, se, t, p, st in res.rows():
            rows.append([lab, name, est, se, t, p, st])
        for term, val in zip(FOOTER_TERMS, (res.adj_r2, res.mape_pct, res.n_assets, res.n_months)):
            rows.append([lab, term, val, "", "", "", ""])
    return rows


def table_wide(results: Sequence[XsTestResult], labels: Sequence[str], digits: int = 3) -> list:
    """Display grid: one column per configuration, estimate-with-stars rows each
    followed by a parenthesized FM standard error row, then the footer."""
    terms = []
    for res in results:
        for name in list(res.names[1:]) + ["alpha"]:
            if name not in terms and name != "alpha":
                terms.append(name)
    terms.append("alpha")
    rows = [["term", *labels]]
    for term in terms:
        est_row, se_row = [term], [""]
        for res in results:
            if term in res.names:
                k = res.names.index(term)
                est_row.append(f"{res.estimates[k]:.{digits}f}{stars(res.p_values[k])}")
                se_row.append(f"({res.fm_se[k]:.{digits}f})")
            else:
                est_row.append("")
                se_row.append("")
        rows.extend([est_row, se_row])
    rows.append(["Adj R2", *(f"{r.adj_r2:.{digits}f}" for r in results)])
    rows.append(["MAPE (%)", *(f"{r.mape_pct:.{digits}f}" for r in results)])
    rows.append(["Assets", *(str(r.n_assets) for r in results)])
    rows.append(["Months", *(str(r.n_months) for r in results)])
    return rows
