"""Expanding-window portfolio sorts on HFL forecasts.

At each rebalance date the model is refit on all months up to and including
that date, assets are ranked on their forecast and split into equal-weighted
quantile portfolios held for the next ``step`` months.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .econometrics import add_constant, newey_west_se, ols
from .panel import FactorPanel, PanelValidationError, ReturnPanel
from .sieve import FitError, HflConfig, fit_hfl

SignalFn = Callable[[ReturnPanel], np.ndarray]


class BacktestError(ValueError):
    pass


@dataclass(frozen=True)
class BacktestConfig:
    initial_window: int = 120
    step: int = 6
    n_portfolios: int = 5
    signal: str = "mean"  # mean | last
    hfl: HflConfig = field(default_factory=HflConfig)

    def __post_init__(self):
        if self.initial_window < 2:
            raise BacktestError("initial_window must be at least 2")
        if self.step < 1:
            raise BacktestError("step must be positive")
        if self.n_portfolios < 2:
            raise BacktestError("need at least 2 portfolios")
        if self.signal not in ("mean", "last"):
            raise BacktestError(f"unknown signal {self.signal!r} (mean | last)")

    @classmethod
    def from_dict(cls, d: dict) -> "BacktestConfig":
        d = dict(d)
        hfl = d.pop("hfl", None)
        unknown = set(d) - {"initial_window", "step", "n_portfolios", "signal"}
        if unknown:
            raise BacktestError(f"unknown backtest config keys {sorted(unknown)}")
        if hfl is not None and not isinstance(hfl, HflConfig):
            hfl = HflConfig.from_dict(hfl)
        return cls(**d, hfl=hfl or HflConfig())

    def to_dict(self) -> dict:
        return {"initial_window": self.initial_window, "step": self.step,
                "n_portfolios": self.n_portfolios, "signal": self.signal}


def bin_sizes(n_assets: int, n_portfolios: int) -> list:
    """Equal bins with the remainder in the top bin (171 assets, 5 bins -> 34,34,34,34,35)."""
    if n_assets < n_portfolios:
        raise BacktestError(f"{n_assets} assets cannot fill {n_portfolios} portfolios")
    base = n_assets // n_portfolios
    sizes = [base] * n_portfolios
    sizes[-1] += n_assets - base * n_portfolios
    return sizes


def assign_bins(signal, asset_ids: Sequence[str], n_portfolios: int) -> list:
    """Rank ascending on ``signal`` (ties by asset id) and cut into bins.

    Returns one index array per portfolio, lowest signal first.
    """
    signal = np.asarray(signal, dtype=float)
    if signal.shape != (len(asset_ids),):
        raise BacktestError("signal length differs from the asset count")
    if not np.all(np.isfinite(signal)):
        raise BacktestError("non-finite signal")
    order = sorted(range(len(asset_ids)), key=lambda i: (signal[i], asset_ids[i]))
    out, start = [], 0
    for size in bin_sizes(len(asset_ids), n_portfolios):
        out.append(np.array(order[start:start + size]))
        start += size
    return out


@dataclass
class PerfStats:
    mean_pct: float
    sd_pct: float
    se_pct: float
    sharpe: Optional[float]

    def to_dict(self) -> dict:
        return {"mean_pct": self.mean_pct, "sd_pct": self.sd_pct, "se_pct": self.se_pct,
                "sharpe": self.sharpe}


def performance_stats(series) -> PerfStats:
    """Mean, sample sd and standard error in percent, and the monthly Sharpe ratio.

    A zero-volatility series has no Sharpe ratio; ``None`` is returned with a
    warning.
    """
    x = np.asarray(series, dtype=float)
    if x.size < 2:
        raise BacktestError("need at least 2 observations")
    mean = float(x.mean())
    sd = float(x.std(ddof=1))
    if sd > 0:
        sharpe = mean / sd
    else:
        warnings.warn("zero standard deviation: Sharpe ratio undefined", RuntimeWarning,
                      stacklevel=2)
        sharpe = None
    return PerfStats(100.0 * mean, 100.0 * sd, 100.0 * sd / np.sqrt(x.size), sharpe)


def annualize_sharpe(sharpe: float, periods: int = 12) -> float:
    return float(sharpe * np.sqrt(periods))


@dataclass
class AlphaResult:
    alpha: float
    se: float
    t_stat: float
    betas: dict
    nw_lag: int
    nobs: int

    def to_dict(self) -> dict:
        return {"alpha_pct": 100.0 * self.alpha, "nw_se_pct": 100.0 * self.se,
                "t_stat": self.t_stat, "betas": self.betas, "nw_lag": self.nw_lag,
                "nobs": self.nobs}


def alpha_regression(series, benchmark: FactorPanel, nw_lag: int = 3,
                     dates: Optional[Sequence[str]] = None) -> AlphaResult:
    """Intercept of ``series`` regressed on the benchmark factors, Newey-West SE.

    When ``dates`` is given the benchmark is restricted to those months (every
    one must be present); otherwise its dates must match the series length.
    """
    y = np.asarray(series, dtype=float)
    if dates is not None:
        pos = {d: k for k, d in enumerate(benchmark.dates)}
        missing = [d for d in dates if d not in pos]
        if missing:
            raise PanelValidationError(f"benchmark has no observation for {missing[0]!r}")
        x = benchmark.values[:, [pos[d] for d in dates]].T
    else:
        x = benchmark.values.T
    if x.shape[0] != y.size:
        raise PanelValidationError("benchmark and series lengths differ")
    design = add_constant(x)
    res = ols(y, design)
    se = newey_west_se(y, design, nw_lag)
    a, s = float(res.coefficients[0]), float(se[0])
    t = a / s if s > 0 else (0.0 if a == 0 else float("inf") * np.sign(a))
    betas = {n: float(b) for n, b in zip(benchmark.factor_names, res.coefficients[1:])}
    return AlphaResult(a, s, float(t), betas, nw_lag, y.size)


@dataclass
class Rebalance:
    date: str  # last month of the estimation window
    window_months: int
    max_date_seen: str
    holding_dates: tuple
    members: list  # per portfolio, tuple of asset ids
    signal: np.ndarray = field(repr=False, default=None)


@dataclass
class PortfolioSeries:
    dates: tuple
    returns: np.ndarray  # n_portfolios x T_oos
    rebalances: list
    asset_ids: tuple
    config: BacktestConfig
    alphas: dict = field(default_factory=dict)

    @property
    def names(self) -> list:
        return [f"P{j + 1}" for j in range(self.returns.shape[0])] + ["LS"]

    @property
    def long_short(self) -> np.ndarray:
        return self.returns[-1] - self.returns[0]

    def series(self, name: str) -> np.ndarray:
        if name == "LS":
            return self.long_short
        return self.returns[self.names.index(name)]

    def stats(self) -> dict:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return {n: performance_stats(self.series(n)) for n in self.names}

    def add_alphas(self, label: str, benchmark: FactorPanel, nw_lag: int = 3) -> dict:
        self.alphas[label] = {n: alpha_regression(self.series(n), benchmark, nw_lag, self.dates)
                              for n in self.names}
        return self.alphas[label]

    def audit(self) -> list:
        """(rebalance date, max date seen, ok) per window."""
        return [(r.date, r.max_date_seen, r.max_date_seen <= r.date) for r in self.rebalances]

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "config": self.config.to_dict(),
            "dates": list(self.dates),
            "portfolios": {n: self.series(n).tolist() for n in self.names},
            "stats": {n: s.to_dict() for n, s in self.stats().items()},
            "alphas": {lab: {n: a.to_dict() for n, a in tab.items()}
                       for lab, tab in self.alphas.items()},
            "rebalances": [
                {"date": r.date, "window_months": r.window_months,
                 "max_date_seen": r.max_date_seen, "holding_dates": list(r.holding_dates),
                 "members": [list(m) for m in r.members]}
                for r in self.rebalances
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def rebalance_points(n_months: int, initial_window: int, step: int) -> list:
    """Window lengths at which the model is refit: initial, initial+step, ... < T."""
    if initial_window + step > n_months:
        raise BacktestError(
            f"initial_window ({initial_window}) + step ({step}) exceeds the {n_months} months available"
        )
    return list(range(initial_window, n_months, step))


def hfl_signal(cfg: BacktestConfig) -> SignalFn:
    """Forecast from an HFL fit on the window: in-window mean fitted value, or the last one."""
    def signal(window: ReturnPanel) -> np.ndarray:
        fit = fit_hfl(window, cfg.hfl)
        if cfg.signal == "last":
            return fit.fitted[:, -1].copy()
        return fit.mean_fitted()
    return signal


def expanding_backtest(panel: ReturnPanel, cfg: Optional[BacktestConfig] = None,
                       signal_fn: Optional[SignalFn] = None,
                       on_window: Optional[Callable[[str, ReturnPanel], None]] = None
                       ) -> PortfolioSeries:
    """Expanding-window sorts.

    ``signal_fn`` maps the estimation-window panel to one forecast per asset
    and defaults to an HFL refit. It only ever receives the truncated panel;
    the latest date it was handed is recorded per window for the look-ahead
    audit. ``on_window(date, window)`` is an optional observer.
    """
    cfg = cfg or BacktestConfig()
    points = rebalance_points(panel.n_months, cfg.initial_window, cfg.step)
    bin_sizes(panel.n_assets, cfg.n_portfolios)
    signal_fn = signal_fn or hfl_signal(cfg)
    r = panel.returns
    rets, dates, rebalances = [], [], []
    for end in points:
        window = panel.window(end)
        date = panel.dates[end - 1]
        if on_window is not None:
            on_window(date, window)
        try:
            sig = np.asarray(signal_fn(window), dtype=float)
        except FitError as exc:
            raise FitError(f"fit failed at rebalance date {date}: {exc}") from exc
        bins = assign_bins(sig, panel.asset_ids, cfg.n_portfolios)
        hold = range(end, min(end + cfg.step, panel.n_months))
        block = np.array([r[b][:, hold].mean(axis=0) for b in bins])
        rets.append(block)
        hold_dates = tuple(panel.dates[t] for t in hold)
        dates.extend(hold_dates)
        rebalances.append(Rebalance(date, end, window.dates[-1], hold_dates,
                                    [tuple(panel.asset_ids[i] for i in b) for b in bins], sig))
    return PortfolioSeries(tuple(dates), np.hstack(rets), rebalances, panel.asset_ids, cfg)
