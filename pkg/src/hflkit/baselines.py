"""PCA-family and power-factor competitors to the HFL factor.

Every eigenvector column is oriented so that its largest-magnitude entry is
positive, which makes all outputs deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial.distance import pdist

from .econometrics import time_series_betas
from .panel import FactorPanel, ReturnPanel

PSD_TOL = 1e-10


class BaselineError(ValueError):
    pass


def orient_columns(v: np.ndarray) -> np.ndarray:
    """Flip columns so the entry of largest magnitude is positive (first such entry on ties)."""
    v = np.array(v, dtype=float, copy=True)
    if v.ndim == 1:
        v = v[:, None]
    idx = np.argmax(np.abs(v), axis=0)
    signs = np.sign(v[idx, np.arange(v.shape[1])])
    signs[signs == 0] = 1.0
    return v * signs


def _top_eig(mat: np.ndarray, k: int):
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    order = np.argsort(vals, kind="stable")[::-1]
    vals, vecs = vals[order], vecs[:, order]
    return vals, orient_columns(vecs[:, :k])


def _check_k(panel: ReturnPanel, k: int) -> None:
    hi = min(panel.n_assets, panel.n_months)
    if not 1 <= k <= hi:
        raise BaselineError(f"k={k} outside [1, {hi}]")


@dataclass
class PcaResult:
    method: str
    factors: np.ndarray  # k x T
    loadings: np.ndarray  # N x k
    eigenvalues: np.ndarray  # all, descending
    params: dict = field(default_factory=dict)
    dates: tuple = ()
    asset_ids: tuple = ()

    @property
    def k(self) -> int:
        return self.factors.shape[0]

    def factor_names(self, prefix: Optional[str] = None) -> list:
        prefix = prefix or {"standard": "PC", "rp": "RP", "kernel": "KPC"}[self.method]
        return [f"{prefix}{j + 1}" for j in range(self.k)]

    def factor_panel(self, prefix: Optional[str] = None) -> FactorPanel:
        return FactorPanel(self.dates, self.factor_names(prefix), self.factors)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "method": self.method,
            "params": self.params,
            "eigenvalues": [float(v) for v in self.eigenvalues],
            "factor_names": self.factor_names(),
            "loadings": self.loadings.tolist(),
            "factors": self.factors.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def pca_factors(panel: ReturnPanel, k: int) -> PcaResult:
    """Standard PCA of the N x N return covariance (1/T normalization).

    Loadings are the top-k eigenvectors; factors are loadings' applied to the
    time-demeaned returns, so ``mu + loadings @ factors`` reconstructs the panel
    when k reaches its rank.
    """
    _check_k(panel, k)
    r = panel.returns
    x = r - r.mean(axis=1, keepdims=True)
    cov = x @ x.T / panel.n_months
    vals, vecs = _top_eig(cov, k)
    return PcaResult("standard", vecs.T @ x, vecs, vals, {"k": k},
                     panel.dates, panel.asset_ids)


def rp_pca_factors(panel: ReturnPanel, k: int, gamma: float = 10.0) -> PcaResult:
    """Risk-premium PCA: eigenvectors of (1/T) R R' + gamma * mu mu'.

    With gamma = -1 the matrix is exactly the covariance used by
    :func:`pca_factors`. Factors are loadings' applied to the raw
    (non-demeaned) returns so they carry the mean component.
    """
    _check_k(panel, k)
    if gamma < -1:
        raise BaselineError("gamma must be >= -1")
    r = panel.returns
    mu = r.mean(axis=1)
    second = r @ r.T / panel.n_months
    vals, vecs = _top_eig(second + gamma * np.outer(mu, mu), k)
    return PcaResult("rp", vecs.T @ r, vecs, vals, {"k": k, "gamma": float(gamma)},
                     panel.dates, panel.asset_ids)


def median_bandwidth(x: np.ndarray) -> float:
    """Median pairwise Euclidean distance between rows of ``x``."""
    d = pdist(x)
    med = float(np.median(d)) if d.size else 0.0
    return med if med > 0 else 1.0


def gram_matrix(x: np.ndarray, kernel: str = "rbf", bandwidth: Optional[float] = None,
                degree: int = 2, coef0: float = 1.0):
    """Kernel Gram matrix over the rows of ``x``; returns (K, params)."""
    if kernel == "linear":
        return x @ x.T, {"kernel": "linear"}
    if kernel == "poly":
        return (x @ x.T + coef0) ** degree, {"kernel": "poly", "degree": degree, "coef0": coef0}
    if kernel == "rbf":
        bw = median_bandwidth(x) if bandwidth is None else float(bandwidth)
        if bw <= 0:
            raise BaselineError("rbf bandwidth must be positive")
        sq = np.sum(x * x, axis=1)
        d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
        return np.exp(-d2 / (2.0 * bw * bw)), {"kernel": "rbf", "bandwidth": bw}
    raise BaselineError(f"unknown kernel {kernel!r} (rbf | linear | poly)")


def center_gram(gram: np.ndarray) -> np.ndarray:
    g = np.asarray(gram, dtype=float)
    return g - g.mean(axis=0, keepdims=True) - g.mean(axis=1, keepdims=True) + g.mean()


def kernel_pca_factors(panel: ReturnPanel, k: int, kernel: str = "rbf",
                       bandwidth: Optional[float] = None, degree: int = 2) -> PcaResult:
    """Kernel PCA over months.

    Each month's cross-section of returns is one observation. The T x T Gram
    matrix is double-centered; factor series are the top-k eigenvectors scaled
    by sqrt(eigenvalue) (the kernel principal component scores). Loadings are
    time-series betas of each asset on those factors.
    """
    _check_k(panel, k)
    x = panel.returns.T
    gram, params = gram_matrix(x, kernel, bandwidth, degree)
    gc = center_gram(gram)
    vals, vecs = _top_eig(gc, k)
    if vals[-1] < -PSD_TOL * max(1.0, abs(vals[0])):
        raise BaselineError(f"centered Gram matrix not PSD (min eigenvalue {vals[-1]:.3e})")
    top = vals[:k]
    if np.any(top <= 0):
        raise BaselineError("fewer than k positive kernel eigenvalues")
    scores = (vecs * np.sqrt(top)).T  # k x T
    fp = FactorPanel(panel.dates, [f"KPC{j + 1}" for j in range(k)], scores)
    betas = time_series_betas(panel, fp).values
    params.update(k=k)
    return PcaResult("kernel", scores, betas, vals, params, panel.dates, panel.asset_ids)


def power_factors(series, max_power: int, name: str = "MKTRF",
                  dates: Optional[Sequence[str]] = None) -> FactorPanel:
    """Columns series, series^2, ..., series^max_power as a factor panel."""
    if max_power < 2:
        raise BaselineError("max_power must be >= 2")
    s = np.asarray(series, dtype=float)
    if dates is None:
        dates = [f"{t:05d}" for t in range(s.size)]
    names = [name] + [f"{name}^{p}" for p in range(2, max_power + 1)]
    return FactorPanel(dates, names, np.vstack([s ** p for p in range(1, max_power + 1)]))


def reconstruction_error(panel: ReturnPanel, res: PcaResult) -> float:
    """Max abs error of mu + loadings @ factors against the panel (standard PCA)."""
    if res.method != "standard":
        raise BaselineError("reconstruction is defined for standard PCA")
    mu = panel.returns.mean(axis=1, keepdims=True)
    return float(np.max(np.abs(mu + res.loadings @ res.factors - panel.returns)))
