"""Lasso by coordinate descent, K-fold cross-validation and double selection.

The Lasso objective on standardized regressors z (zero mean, unit variance
with the 1/n convention) and centered response is

    (1/2n) ||y - z b||^2 + lam ||b||_1,

and the intercept is unpenalized. Coefficients are reported on both scales.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .econometrics import RegressionError, ols, stars, white_se

KKT_TOL = 1e-8


class SelectionError(ValueError):
    pass


@dataclass
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray
    keep: np.ndarray  # column indices with positive variance

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        ref = np.maximum(np.abs(mean), 1.0)
        keep = np.flatnonzero(scale > 1e-12 * ref)
        return cls(mean, scale, keep)

    def transform(self, x: np.ndarray) -> np.ndarray:
        k = self.keep
        return (x[:, k] - self.mean[k]) / self.scale[k]


@dataclass
class LassoResult:
    lam: float
    coef_std: np.ndarray  # standardized scale, length p (zeros for dropped columns)
    coef: np.ndarray  # original scale
    intercept: float
    active: np.ndarray
    iterations: int
    converged: bool
    kkt_residual: float
    dropped: tuple = ()

    def predict(self, x) -> np.ndarray:
        return self.intercept + np.asarray(x, dtype=float) @ self.coef


def soft_threshold(z, t):
    z = np.asarray(z, dtype=float)
    return np.sign(z) * np.maximum(np.abs(z) - t, 0.0)


def _cd_sweep(idx, rows, diag, grad, beta, lam) -> float:
    delta = 0.0
    for j in idx:
        old = beta[j]
        dj = diag[j]
        z = grad[j] + dj * old
        if z > lam:
            new = (z - lam) / dj
        elif z < -lam:
            new = (z + lam) / dj
        else:
            new = 0.0
        if new != old:
            d = new - old
            grad -= rows[j] * d
            beta[j] = new
            if abs(d) > delta:
                delta = abs(d)
    return delta


def _cd(gram: np.ndarray, zy: np.ndarray, lam: float, beta: np.ndarray, tol: float,
        max_sweeps: int):
    """Covariance-update coordinate descent on standardized data.

    ``gram`` is z'z/n and ``zy`` is z'y/n. Full sweeps alternate with sweeps
    restricted to the active set; convergence is declared only after a full
    sweep moves no coefficient by more than ``tol``.
    """
    p = zy.size
    grad = zy - gram @ beta
    rows = list(gram)  # symmetric, so rows are columns
    diag = gram.diagonal().tolist()
    sweeps = 0
    converged = p == 0
    full = range(p)
    while sweeps < max_sweeps and p > 0:
        sweeps += 1
        if _cd_sweep(full, rows, diag, grad, beta, lam) < tol:
            converged = True
            break
        active = np.flatnonzero(beta).tolist()
        while sweeps < max_sweeps:
            sweeps += 1
            if _cd_sweep(active, rows, diag, grad, beta, lam) < tol:
                break
    return beta, sweeps, converged


def kkt_residual(z: np.ndarray, y: np.ndarray, beta: np.ndarray, lam: float) -> float:
    """Largest violation of the Lasso subgradient conditions on standardized data."""
    if z.shape[1] == 0:
        return 0.0
    g = z.T @ (y - z @ beta) / z.shape[0]
    active = beta != 0
    viol = np.where(active, np.abs(g - lam * np.sign(beta)), np.maximum(np.abs(g) - lam, 0.0))
    return float(viol.max())


def lambda_max(y, x) -> float:
    """Smallest penalty at which every standardized slope is zero."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    st = Standardizer.fit(x)
    z = st.transform(x)
    if z.shape[1] == 0:
        return 0.0
    return float(np.max(np.abs(z.T @ (y - y.mean()))) / y.size)


def lasso(y, x, lam: float, tol: float = 1e-9, max_sweeps: int = 10_000,
          warm: Optional[np.ndarray] = None) -> LassoResult:
    """Lasso fit at penalty ``lam`` with KKT verification.

    Zero-variance columns are dropped with a warning and get coefficient 0.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if lam < 0:
        raise SelectionError("lambda must be non-negative")
    n, p = x.shape
    if y.shape != (n,):
        raise SelectionError("y and X have different row counts")
    st = Standardizer.fit(x)
    dropped = tuple(int(j) for j in np.setdiff1d(np.arange(p), st.keep))
    if dropped:
        warnings.warn(f"dropping zero-variance columns {list(dropped)}", RuntimeWarning,
                      stacklevel=2)
    z = st.transform(x)
    yc = y - y.mean()
    beta = np.zeros(z.shape[1]) if warm is None else np.array(warm, dtype=float)[st.keep]
    beta, sweeps, converged = _cd(z.T @ z / n, z.T @ yc / n, lam, beta, tol, max_sweeps)
    kkt = kkt_residual(z, yc, beta, lam)
    coef_std = np.zeros(p)
    coef_std[st.keep] = beta
    coef = np.zeros(p)
    coef[st.keep] = beta / st.scale[st.keep]
    intercept = float(y.mean() - st.mean @ coef)
    return LassoResult(float(lam), coef_std, coef, intercept, np.flatnonzero(coef_std),
                       sweeps, converged, kkt, dropped)


def lambda_grid(y, x, n_lambda: int = 100, ratio: float = 1e-4) -> np.ndarray:
    """Log-spaced grid from lambda_max down to ratio * lambda_max (descending)."""
    lmax = lambda_max(y, x)
    if lmax <= 0:
        return np.zeros(1)
    return np.geomspace(lmax, ratio * lmax, n_lambda)


@dataclass
class CvReport:
    lambdas: np.ndarray
    fold_mse: np.ndarray  # n_folds x n_lambda
    mean_mse: np.ndarray
    chosen: float
    chosen_index: int
    seed: int
    folds: np.ndarray  # fold id per observation


def fold_ids(n: int, n_folds: int, seed: int) -> np.ndarray:
    """Seeded shuffle, then contiguous blocks of near-equal size."""
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=int)
    for k, block in enumerate(np.array_split(perm, n_folds)):
        ids[block] = k
    return ids


def _silent_lasso(y, x, lam):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return lasso(y, x, lam)


def _path_predictions(y, x, x_new, lambdas, tol: float = 1e-9, max_sweeps: int = 10_000):
    """Warm-started Lasso path on (y, x); yields predictions at x_new per lambda.

    Standardization uses the training rows only.
    """
    st = Standardizer.fit(x)
    z = st.transform(x)
    n = y.size
    ym = y.mean()
    gram = z.T @ z / n
    zy = z.T @ (y - ym) / n
    z_new = st.transform(x_new)
    beta = np.zeros(z.shape[1])
    for lam in lambdas:
        beta, _, _ = _cd(gram, zy, lam, beta, tol, max_sweeps)
        yield ym + z_new @ beta


def cv_lasso(y, x, n_folds: int = 5, lambdas: Optional[Sequence[float]] = None,
             seed: int = 0) -> CvReport:
    """K-fold CV over a lambda grid; ties in mean MSE go to the larger lambda."""
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = y.size
    if n < n_folds or n_folds < 2:
        raise SelectionError(f"need 2 <= n_folds <= n (n={n}, n_folds={n_folds})")
    grid = lambda_grid(y, x) if lambdas is None else np.asarray(lambdas, dtype=float)
    order = np.argsort(-grid, kind="stable")  # solve from large to small for warm starts
    ids = fold_ids(n, n_folds, seed)
    mse = np.empty((n_folds, grid.size))
    for k in range(n_folds):
        train, test = ids != k, ids == k
        if train.sum() < 2:
            raise SelectionError(f"fold {k} leaves fewer than 2 training rows")
        for g, pred in zip(order, _path_predictions(y[train], x[train], x[test], grid[order])):
            mse[k, g] = float(np.mean((y[test] - pred) ** 2))
    mean = mse.mean(axis=0)
    best = mean.min()
    ties = np.flatnonzero(mean == best)
    idx = int(ties[np.argmax(grid[ties])])
    return CvReport(grid, mse, mean, float(grid[idx]), idx, seed, ids)


@dataclass
class DsResult:
    target: str
    coefficient: float
    se: float
    t_stat: float
    p_value: float
    union: tuple
    first_stage: tuple
    second_stage: tuple
    intercept: float = float("nan")
    intercept_se: float = float("nan")
    intercept_t: float = float("nan")
    intercept_p: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "target": self.target, "coefficient": self.coefficient, "se": self.se,
            "t_stat": self.t_stat, "p_value": self.p_value, "stars": stars(self.p_value),
            "intercept": self.intercept, "intercept_se": self.intercept_se,
            "intercept_t": self.intercept_t, "intercept_p": self.intercept_p, "union": list(self.union),
            "first_stage": list(self.first_stage), "second_stage": list(self.second_stage),
        }


def _selected(y, controls, names, n_folds, seed) -> set:
    cv = cv_lasso(y, controls, n_folds=n_folds, seed=seed)
    fit = _silent_lasso(y, controls, cv.chosen)
    return {names[j] for j in fit.active}


def double_selection(y, target, controls=None, names: Optional[Sequence[str]] = None,
                     target_name: str = "target", n_folds: int = 5, seed: int = 0,
                     always_include: Sequence[str] = ()) -> DsResult:
    """Double-selection Lasso inference on the coefficient of ``target``.

    Stage 1 selects controls that predict ``y``; stage 2 those that predict
    ``target``. The final OLS of y on [1, target, union] reports an HC1
    standard error. Controls are handled as a set keyed by name, so column
    order does not affect the result: columns are sorted by name before the
    CV shuffle and the final regression. ``always_include`` names controls
    that enter the final regression regardless of selection.
    """
    y = np.asarray(y, dtype=float)
    target = np.asarray(target, dtype=float)
    n = y.size
    if controls is None:
        controls = np.empty((n, 0))
    controls = np.asarray(controls, dtype=float)
    if controls.ndim == 1:
        controls = controls[:, None]
    p = controls.shape[1]
    if names is None:
        names = [f"c{j:04d}" for j in range(p)]
    names = [str(s) for s in names]
    if len(names) != p or len(set(names)) != p:
        raise SelectionError("control names must be unique and match the column count")
    if target.shape != (n,) or controls.shape[0] != n:
        raise SelectionError("rows of y, target and controls must align")
    missing = [a for a in always_include if a not in names]
    if missing:
        raise SelectionError(f"always_include names unknown control {missing[0]!r}")
    order = np.argsort(names, kind="stable")
    controls = controls[:, order]
    names = [names[j] for j in order]
    if p:
        s1 = _selected(y, controls, names, n_folds, seed)
        s2 = _selected(target, controls, names, n_folds, seed)
    else:
        s1, s2 = set(), set()
    union = sorted(s1 | s2 | set(always_include))
    if len(union) >= n - 2:
        raise SelectionError(
            f"union of selected controls has {len(union)} members with only {n} observations"
        )
    pos = {s: j for j, s in enumerate(names)}
    design = np.column_stack([np.ones(n), target] + [controls[:, pos[s]] for s in union])
    try:
        res = ols(y, design)
    except RegressionError as exc:
        raise SelectionError(str(exc)) from None
    se = white_se(y, design, hc1=True)
    t = res.coefficients / se
    df = n - design.shape[1]
    pv = 2.0 * stats.t.sf(np.abs(t), df)
    return DsResult(target_name, float(res.coefficients[1]), float(se[1]), float(t[1]),
                    float(pv[1]), tuple(union), tuple(sorted(s1)), tuple(sorted(s2)),
                    float(res.coefficients[0]), float(se[0]), float(t[0]), float(pv[0]))


# -- zoo summaries ---------------------------------------------------------------

P_BUCKETS = ("p<=1%", "1%<p<=5%", "5%<p<=10%", "p>10%")


def p_bucket(p: float) -> str:
    if p <= 0.01:
        return P_BUCKETS[0]
    if p <= 0.05:
        return P_BUCKETS[1]
    if p <= 0.10:
        return P_BUCKETS[2]
    return P_BUCKETS[3]


def bucket_shares(pvalues: Sequence[float]) -> dict:
    """Percentage of p-values falling in each significance bucket."""
    pv = list(pvalues)
    counts = {b: 0 for b in P_BUCKETS}
    for p in pv:
        counts[p_bucket(p)] += 1
    total = max(len(pv), 1)
    return {b: 100.0 * c / total for b, c in counts.items()}


def abs_t_summary(t_stats: Sequence[float]) -> dict:
    """Mean and standard deviation of |t| across factors."""
    a = np.abs(np.asarray(t_stats, dtype=float))
    if a.size == 0:
        return {"mean_abs_t": float("nan"), "sd_abs_t": float("nan"), "count": 0}
    sd = float(a.std(ddof=1)) if a.size > 1 else 0.0
    return {"mean_abs_t": float(a.mean()), "sd_abs_t": sd, "count": int(a.size)}
