"""Sieve least-squares estimation of the single-factor model r_it = h(f_t * lambda_i) + e_it.

``h`` is approximated by a degree-K polynomial. The coefficients are always
obtained by OLS given the factor path and loadings, so the search is only over
``f`` (length T) and ``lambda`` (length N), both kept in the box [delta, 1].

The fit runs in three phases:

1. leading singular vectors of the T x N return matrix, rescaled into the box;
2. projected descent on (f, lambda) with step control, refitting the
   coefficients after every accepted step (damped Gauss-Newton directions by
   default, plain gradient with Armijo backtracking on request);
3. cyclic coordinate sweeps, where every f_t and then every lambda_i is
   re-optimized by a bounded golden-section search, followed by a refit.

Every accepted step lowers (or keeps) the loss, so the trace is monotone.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .panel import ReturnPanel

SCHEMA_VERSION = 1
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


class FitError(RuntimeError):
    """Numerical failure during estimation (non-finite loss, bad input)."""


@dataclass(frozen=True)
class HflConfig:
    degree: int = 4
    coef_bound: float = 1e6
    box_floor: float = 1e-6
    gd_step: float = 1.0
    gd_max_iters: int = 300
    sweep_max: int = 200
    tol_rel: float = 1e-10
    backtrack_shrink: float = 0.5
    backtrack_armijo: float = 1e-4
    backtrack_max: int = 50
    golden_tol: float = 1e-10
    grid_points: int = 33
    descent: str = "gauss_newton"
    lm_damping: float = 1e-3
    starts: tuple = ("svd", "svd_shift", "subspace")
    seed: int = 0

    def __post_init__(self):
        if int(self.degree) < 0:
            raise ValueError("degree must be >= 0")
        if not 0.0 < self.box_floor < 1.0:
            raise ValueError("box_floor must lie in (0, 1)")
        if not self.coef_bound > 0:
            raise ValueError("coef_bound must be positive")
        if not self.tol_rel > 0:
            raise ValueError("tol_rel must be positive")
        if self.gd_step <= 0 or not 0 < self.backtrack_shrink < 1:
            raise ValueError("invalid line-search parameters")
        if self.grid_points < 3:
            raise ValueError("grid_points must be >= 3")
        if self.gd_max_iters < 0 or self.sweep_max < 0:
            raise ValueError("iteration budgets must be non-negative")
        if self.descent not in ("gauss_newton", "gradient"):
            raise ValueError(f"unknown descent {self.descent!r}")
        object.__setattr__(self, "starts", tuple(self.starts))
        bad = set(self.starts) - {"svd", "svd_shift", "subspace"}
        if bad or not self.starts:
            raise ValueError(f"invalid starts {self.starts!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "HflConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown HflConfig field(s): {sorted(unknown)}")
        if "starts" in known:
            known["starts"] = tuple(known["starts"])
        return cls(**known)


@dataclass
class HflParams:
    coeffs: np.ndarray
    f: np.ndarray
    lam: np.ndarray

    def copy(self) -> "HflParams":
        return HflParams(self.coeffs.copy(), self.f.copy(), self.lam.copy())


@dataclass
class FocDiagnostics:
    mean_residual: float
    resid_fitted_moment: float
    power_moments: np.ndarray

    def max_abs(self) -> float:
        return float(max(abs(self.mean_residual), abs(self.resid_fitted_moment),
                         np.max(np.abs(self.power_moments))))

    def to_dict(self) -> dict:
        return {
            "mean_residual": self.mean_residual,
            "resid_fitted_moment": self.resid_fitted_moment,
            "power_moments": [float(v) for v in self.power_moments],
        }


@dataclass
class HflFit:
    params: HflParams
    fitted: np.ndarray
    loss: float
    trace: list
    foc: FocDiagnostics
    config: HflConfig
    clamped: bool = False
    gd_iters: int = 0
    sweeps: int = 0
    panel_hash: Optional[str] = None
    starts: list = field(default_factory=list)

    @property
    def coeffs(self) -> np.ndarray:
        return self.params.coeffs

    def mean_fitted(self) -> np.ndarray:
        """Per-asset time average of the fitted values."""
        return self.fitted.mean(axis=1)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config": asdict(self.config),
            "coeffs": [float(c) for c in self.params.coeffs],
            "f": [float(v) for v in self.params.f],
            "lambda": [float(v) for v in self.params.lam],
            "loss": float(self.loss),
            "trace": self.trace,
            "foc": self.foc.to_dict(),
            "clamped": self.clamped,
            "gd_iters": self.gd_iters,
            "sweeps": self.sweeps,
            "panel_hash": self.panel_hash,
            "starts": self.starts,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def _returns(panel) -> np.ndarray:
    r = panel.returns if isinstance(panel, ReturnPanel) else np.asarray(panel, dtype=float)
    if r.ndim != 2:
        raise ValueError("expected an N x T return matrix")
    return r


def panel_hash(panel) -> str:
    import hashlib

    r = np.ascontiguousarray(_returns(panel), dtype=np.float64)
    h = hashlib.sha256()
    h.update(str(r.shape).encode())
    h.update(r.tobytes())
    return h.hexdigest()


# -- polynomial pieces -------------------------------------------------------------

def poly_eval(coeffs, x):
    """Evaluate sum_j coeffs[j] * x**j by Horner's rule (x may be an array)."""
    coeffs = np.asarray(coeffs, dtype=float)
    x = np.asarray(x, dtype=float)
    if coeffs.size == 0:
        return np.zeros_like(x)[()]
    out = np.full_like(x, coeffs[-1])
    for c in coeffs[-2::-1]:
        out = out * x + c
    return out[()]


def poly_deriv(coeffs) -> np.ndarray:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size <= 1:
        return np.zeros(1)
    return coeffs[1:] * np.arange(1, coeffs.size)


def loss(panel, params: HflParams) -> float:
    """Mean squared residual (1/NT) sum_it (r_it - h(f_t lambda_i))^2."""
    r = _returns(panel)
    if r.shape != (params.lam.size, params.f.size):
        raise ValueError(
            f"dimension mismatch: returns {r.shape}, lambda {params.lam.size}, f {params.f.size}"
        )
    resid = r - poly_eval(params.coeffs, np.outer(params.lam, params.f))
    return float(np.mean(resid ** 2))


def _loss_arrays(r, coeffs, f, lam) -> float:
    resid = r - poly_eval(coeffs, np.outer(lam, f))
    return float(np.mean(resid ** 2))


# -- phase 1: initialization ----------------------------------------------------

def _orient(v: np.ndarray) -> np.ndarray:
    m = v.mean()
    if m < 0:
        return -v
    if m == 0:
        nz = np.flatnonzero(v)
        if nz.size and v[nz[0]] < 0:
            return -v
    return v


def _to_box(v: np.ndarray, delta: float) -> np.ndarray:
    lo, hi = v.min(), v.max()
    # constant up to round-off (e.g. singular vectors of a constant panel)
    if not hi - lo > 1e-12 * max(abs(lo), abs(hi)):
        return np.ones_like(v)
    return delta + (1.0 - delta) * (v - lo) / (hi - lo)


def init_svd(panel, delta: float = 1e-6):
    """Starting values from the leading singular pair of the T x N return matrix.

    Each singular vector is sign-oriented (non-negative mean; a zero mean makes
    the first nonzero entry positive) and then mapped affinely so its minimum
    becomes ``delta`` and its maximum 1. A vector that is constant up to
    round-off (range below 1e-12 of its magnitude) maps to all ones,
    and so does everything for an all-zero panel.

    Returns ``(f0, lambda0)`` of lengths T and N.
    """
    r = _returns(panel)
    if not np.all(np.isfinite(r)):
        raise FitError("non-finite returns passed to init_svd")
    n, t = r.shape
    try:
        u, s, vt = np.linalg.svd(r.T, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise FitError(f"SVD failed: {exc}") from exc
    if s[0] == 0.0:
        return np.ones(t), np.ones(n)
    f0 = _to_box(_orient(u[:, 0].copy()), delta)
    l0 = _to_box(_orient(vt[0].copy()), delta)
    return f0, l0


# -- coefficient subproblem -----------------------------------------------------

def _design(x: np.ndarray, degree: int) -> np.ndarray:
    return np.vander(x.ravel(), degree + 1, increasing=True)


def refit_coeffs(panel, f, lam, degree: int, bound: float = 1e6, return_info: bool = False):
    """OLS of r_it on (f_t lambda_i)^j, j = 0..degree, then clamp to [-bound, bound].

    Columns are equilibrated before an SVD-based least-squares solve. If the
    design is rank deficient the minimum-norm solution on the original
    coefficient scale is returned instead.
    """
    r = _returns(panel)
    x = np.outer(np.asarray(lam, float), np.asarray(f, float))
    v = _design(x, degree)
    y = r.ravel()
    norms = np.sqrt(np.sum(v * v, axis=0))
    norms[norms == 0] = 1.0
    sol, _, rank, _ = np.linalg.lstsq(v / norms, y, rcond=None)
    deficient = rank < degree + 1
    if deficient:
        coeffs, *_ = np.linalg.lstsq(v, y, rcond=None)
    else:
        coeffs = sol / norms
    clamped = bool(np.any(np.abs(coeffs) > bound))
    if clamped:
        coeffs = np.clip(coeffs, -bound, bound)
    if return_info:
        return coeffs, {"clamped": clamped, "rank_deficient": bool(deficient), "rank": int(rank)}
    return coeffs


# -- gradient -------------------------------------------------------------------

def gradient_fl(panel, params: HflParams):
    """Gradient of the loss with respect to f and lambda, coefficients fixed."""
    r = _returns(panel)
    n, t = r.shape
    x = np.outer(params.lam, params.f)
    resid = r - poly_eval(params.coeffs, x)
    w = resid * poly_eval(poly_deriv(params.coeffs), x)
    scale = -2.0 / (n * t)
    return scale * (params.lam @ w), scale * (w @ params.f)


# -- phase 3: bounded scalar search ------------------------------------------

def _block_objective(r, other, coeffs, v):
    """Column j: sum_k (r[k, j] - h(v[j] * other[k]))^2, evaluated directly."""
    resid = r - poly_eval(coeffs, other[:, None] * v[None, :])
    return np.sum(resid * resid, axis=0)


def _block_poly(r, other, coeffs):
    """Per-column coefficients of the scalar objective as a polynomial in v.

    sum_k (r_kj - sum_p c_p v^p o_k^p)^2 expands to a degree-2K polynomial in
    v whose coefficients need only the moments sum_k r_kj o_k^p and
    sum_k o_k^m, so each evaluation costs O(K) per column instead of O(m K).
    """
    k1 = coeffs.size
    opow = np.vander(other, 2 * k1 - 1, increasing=True)
    cross = r.T @ opow[:, :k1]
    quad = np.convolve(coeffs, coeffs) * opow.sum(axis=0)
    poly = np.tile(quad, (r.shape[1], 1))
    poly[:, :k1] -= 2.0 * coeffs * cross
    poly[:, 0] += np.sum(r * r, axis=0)
    return poly


def _eval_block_poly(poly, v):
    out = poly[:, -1].copy()
    for q in range(poly.shape[1] - 2, -1, -1):
        out = out * v + poly[:, q]
    return out


def _block_minimize(r, other, current, coeffs, lo, hi, grid_points, tol):
    """Minimize each column objective over [lo, hi] independently.

    A coarse grid picks the bracket around the best grid point, then a
    golden-section search (vectorized over columns) refines inside it. The
    current value is kept wherever the search does not improve on it, judged
    by direct evaluation.
    """
    n = current.size
    poly = _block_poly(r, other, coeffs)
    grid = np.linspace(lo, hi, grid_points)
    vals = np.stack([_eval_block_poly(poly, np.full(n, g)) for g in grid])
    best_k = np.argmin(vals, axis=0)
    a = grid[np.maximum(best_k - 1, 0)]
    b = grid[np.minimum(best_k + 1, grid_points - 1)]
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc = _eval_block_poly(poly, c)
    fd = _eval_block_poly(poly, d)
    while np.max(b - a) > tol:
        left = fc < fd
        # minimum in [a, d] where left, else in [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = np.where(left, b - _INVPHI * (b - a), d)
        d_new = np.where(left, c, a + _INVPHI * (b - a))
        fnew = _eval_block_poly(poly, np.where(left, c_new, d_new))
        fc, fd = np.where(left, fnew, fd), np.where(left, fc, fnew)
        c, d = c_new, d_new
    out = current.copy()
    out_val = _block_objective(r, other, coeffs, current)
    for v in (grid[best_k], 0.5 * (a + b)):
        fv = _block_objective(r, other, coeffs, v)
        take = fv < out_val
        out = np.where(take, v, out)
        out_val = np.where(take, fv, out_val)
    return out


# -- phase 1 extras: alternative starting points ---------------------------------

_SHIFT_RATIOS = (1e-6, 0.02, 0.05, 0.1, 0.2, 0.35, 0.5, 0.7)


def _closure_vector(basis: np.ndarray, degree: int, rng, n_starts: int = 12) -> np.ndarray:
    """Vector v in span(basis) whose powers v^2..v^degree also (nearly) lie in it.

    Without noise the row space of the return matrix is spanned by the powers
    of the factor path, so v recovers f up to an affine map.
    """
    from scipy.optimize import minimize

    r = basis.shape[1]
    top = max(degree, 2)

    def objective(a):
        v = basis @ a
        v = v - v.mean()
        v = v / math.sqrt(np.mean(v * v) + 1e-300)
        total, w = 0.0, v
        for _ in range(2, top + 1):
            w = w * v
            res = w - basis @ (basis.T @ w)
            total += (res @ res) / (w @ w)
        return total

    best_x, best_val = None, np.inf
    for _ in range(n_starts):
        res = minimize(objective, rng.standard_normal(r), method="BFGS",
                       options={"gtol": 1e-10, "maxiter": 500})
        if res.fun < best_val:
            best_x, best_val = res.x, res.fun
    v = basis @ best_x
    return v - v.mean()


def _best_shift(r, fh, lh, cfg, signs):
    """Rescale (fh, lh) into the box choosing sign and min/max ratio by OLS loss."""
    best = (np.inf, None, None)
    for sf, sl in signs:
        for rf in _SHIFT_RATIOS:
            f = _to_box(sf * fh, max(rf, cfg.box_floor))
            for rl in _SHIFT_RATIOS:
                lam = _to_box(sl * lh, max(rl, cfg.box_floor))
                c = refit_coeffs(r, f, lam, cfg.degree, cfg.coef_bound)
                val = _loss_arrays(r, c, f, lam)
                if val < best[0]:
                    best = (val, f, lam)
    return best[1], best[2]


def starting_points(panel, cfg: HflConfig) -> list:
    """Candidate ``(name, f0, lambda0)`` triples for the descent phase.

    ``svd`` is :func:`init_svd` unchanged. ``svd_shift`` uses the same singular
    vectors but picks the shift and scale of the box mapping by OLS loss.
    ``subspace`` searches the leading (degree+1)-dimensional singular subspaces
    for vectors closed under powers, which handles non-monotone links where
    the first singular vector is a poor proxy for the factor.
    """
    r = _returns(panel)
    n, t = r.shape
    out = []
    f0, l0 = init_svd(r, cfg.box_floor)
    if "svd" in cfg.starts:
        out.append(("svd", f0, l0))
    if not np.any(r):
        return out or [("svd", f0, l0)]
    u, s, vt = np.linalg.svd(r.T, full_matrices=False)
    if "svd_shift" in cfg.starts:
        fh, lh = _orient(u[:, 0].copy()), _orient(vt[0].copy())
        f1, l1 = _best_shift(r, fh, lh, cfg, [(1, 1)])
        if f1 is not None:
            out.append(("svd_shift", f1, l1))
    if "subspace" in cfg.starts and cfg.degree >= 2:
        rank = int(np.sum(s > s[0] * 1e-9))
        k = min(cfg.degree + 1, rank, n, t)
        if k >= 2:
            rng = np.random.default_rng(cfg.seed)
            fh = _closure_vector(u[:, :k], min(cfg.degree, k - 1), rng)
            lh = _closure_vector(vt[:k].T, min(cfg.degree, k - 1), rng)
            if np.ptp(fh) > 0 and np.ptp(lh) > 0:
                f2, l2 = _best_shift(r, fh, lh, cfg, [(1, 1), (1, -1), (-1, 1), (-1, -1)])
                if f2 is not None:
                    out.append(("subspace", f2, l2))
    return out or [("svd", f0, l0)]


# -- phase 2: descent -------------------------------------------------------------

def _gauss_newton_system(r, coeffs, f, lam):
    """J'J and J'e for the residuals e = r - h(f lambda) in (f, lambda, coeffs).

    The f-f and lambda-lambda blocks are diagonal, so assembly costs O(NTK).
    """
    n, t = r.shape
    k1 = coeffs.size
    x = np.outer(lam, f)
    resid = r - poly_eval(coeffs, x)
    d = poly_eval(poly_deriv(coeffs), x)
    a = d * lam[:, None]
    b = d * f[None, :]
    powers = [np.ones_like(x)]
    for _ in range(1, k1):
        powers.append(powers[-1] * x)
    m = t + n + k1
    jtj = np.zeros((m, m))
    grad = np.zeros(m)
    it, il, ic = np.arange(t), t + np.arange(n), t + n
    jtj[it, it] = np.sum(a * a, axis=0)
    jtj[il, il] = np.sum(b * b, axis=1)
    jtj[t:t + n, :t] = a * b
    jtj[:t, t:t + n] = (a * b).T
    for j in range(k1):
        jtj[:t, ic + j] = np.sum(a * powers[j], axis=0)
        jtj[t:t + n, ic + j] = np.sum(b * powers[j], axis=1)
        for q in range(j, k1):
            jtj[ic + j, ic + q] = jtj[ic + q, ic + j] = np.sum(powers[j] * powers[q])
    jtj[ic:, :ic] = jtj[:ic, ic:].T
    grad[:t] = -np.sum(a * resid, axis=0)
    grad[t:t + n] = -np.sum(b * resid, axis=1)
    for j in range(k1):
        grad[ic + j] = -np.sum(powers[j] * resid)
    return jtj, grad


def _descend(r, cfg, coeffs, f, lam, cur, floor, label, trace):
    """Projected descent on (f, lambda) from a starting point; returns the end state.

    With ``descent='gauss_newton'`` the step direction is the gradient
    preconditioned by a damped Gauss-Newton matrix (free variables only) and
    the damping is increased until the step lowers the loss. With
    ``descent='gradient'`` the raw gradient, scaled by block size, is used
    with Armijo backtracking on the step length.
    """
    n, t = r.shape
    lo, hi = cfg.box_floor, 1.0
    clamped = False
    iters = 0
    step = cfg.gd_step
    mu = cfg.lm_damping
    for it in range(1, cfg.gd_max_iters + 1):
        if cur <= floor:
            break
        accepted = False
        if cfg.descent == "gauss_newton":
            jtj, grad = _gauss_newton_system(r, coeffs, f, lam)
            x = np.concatenate([f, lam])
            gx = grad[:t + n]
            free = np.ones(grad.size, dtype=bool)
            free[:t + n] = ~(((x <= lo) & (gx > 0)) | ((x >= hi) & (gx < 0)))
            sub = jtj[np.ix_(free, free)]
            diag = np.diag(sub).copy()
            diag = np.maximum(diag, 1e-12 * max(diag.max(), 1e-300))
            for _ in range(cfg.backtrack_max):
                delta = np.zeros_like(grad)
                try:
                    delta[free] = np.linalg.solve(sub + mu * np.diag(diag), -grad[free])
                except np.linalg.LinAlgError:
                    mu *= 10.0
                    continue
                f_new = np.clip(f + delta[:t], lo, hi)
                l_new = np.clip(lam + delta[t:t + n], lo, hi)
                c_new = coeffs + delta[t + n:]
                new = _loss_arrays(r, c_new, f_new, l_new)
                if new < cur:
                    accepted = True
                    break
                mu *= 4.0
            if accepted:
                mu = max(mu / 3.0, 1e-15)
                if np.any(np.abs(c_new) > cfg.coef_bound):
                    c_new = np.clip(c_new, -cfg.coef_bound, cfg.coef_bound)
                    new = _loss_arrays(r, c_new, f_new, l_new)
                    accepted = new < cur
        else:
            g_f, g_l = gradient_fl(r, HflParams(coeffs, f, lam))
            d_f, d_l = g_f * t, g_l * n
            c_new = coeffs
            for _ in range(cfg.backtrack_max):
                f_new = np.clip(f - step * d_f, lo, hi)
                l_new = np.clip(lam - step * d_l, lo, hi)
                decrease = g_f @ (f_new - f) + g_l @ (l_new - lam)
                new = _loss_arrays(r, coeffs, f_new, l_new)
                if new <= cur + cfg.backtrack_armijo * decrease and new < cur:
                    accepted = True
                    break
                step *= cfg.backtrack_shrink
            step *= 2.0
        if not accepted:
            break
        f, lam = f_new, l_new
        coeffs, new, c = _refit_if_better(r, cfg, c_new, f, lam, new)
        clamped |= c
        if not math.isfinite(new):
            raise FitError("non-finite loss during descent")
        iters = it
        rel = _rel_improvement(cur, new)
        cur = new
        trace.append({"phase": label, "iter": it, "loss": cur})
        if rel < cfg.tol_rel:
            break
    return coeffs, f, lam, cur, iters, clamped


# -- driver -----------------------------------------------------------------------

def _rel_improvement(old: float, new: float) -> float:
    if old <= 0.0:
        return 0.0
    return (old - new) / old


def _refit_if_better(r, cfg, coeffs, f, lam, cur_loss):
    new, info = refit_coeffs(r, f, lam, cfg.degree, cfg.coef_bound, return_info=True)
    new_loss = _loss_arrays(r, new, f, lam)
    if new_loss <= cur_loss:
        return new, new_loss, info["clamped"]
    return coeffs, cur_loss, info["clamped"]


def fit_hfl(panel, config: Optional[HflConfig] = None, init=None) -> HflFit:
    """Estimate h, f and lambda by sieve least squares.

    Each starting point (see :func:`starting_points`, or ``init=(f0, lambda0)``)
    gets an OLS coefficient fit and a descent phase; the run with the lowest
    loss then goes through the coordinate sweeps.
    """
    cfg = config or HflConfig()
    r = _returns(panel)
    if not np.all(np.isfinite(r)):
        raise FitError("non-finite returns")
    lo, hi = cfg.box_floor, 1.0
    # stop exact fits instead of chasing round-off
    floor = 1e-30 * max(float(np.mean(r * r)), 1e-300)

    if init is None:
        starts = starting_points(r, cfg)
    else:
        starts = [("given", np.clip(np.asarray(init[0], float), lo, hi),
                   np.clip(np.asarray(init[1], float), lo, hi))]

    best = None
    summary = []
    for name, f0, l0 in starts:
        coeffs, info = refit_coeffs(r, f0, l0, cfg.degree, cfg.coef_bound, return_info=True)
        cur = _loss_arrays(r, coeffs, f0, l0)
        if not math.isfinite(cur):
            raise FitError(f"non-finite loss at starting point {name!r}")
        trace = [{"phase": "init", "iter": 0, "loss": cur, "start": name}]
        coeffs, f, lam, cur, iters, clamped = _descend(r, cfg, coeffs, f0, l0, cur, floor, "gd", trace)
        summary.append({"start": name, "init_loss": trace[0]["loss"], "loss": cur})
        if best is None or cur < best[3]:
            best = (coeffs, f, lam, cur, iters, clamped or info["clamped"], trace)
    coeffs, f, lam, cur, gd_iters, clamped, trace = best

    # phase 3: coordinate re-optimization
    sweeps = 0
    for sweep in range(1, cfg.sweep_max + 1):
        if cur <= floor:
            break
        f_new = _block_minimize(r, lam, f, coeffs, lo, hi, cfg.grid_points, cfg.golden_tol)
        l_new = _block_minimize(r.T, f_new, lam, coeffs, lo, hi, cfg.grid_points, cfg.golden_tol)
        new = _loss_arrays(r, coeffs, f_new, l_new)
        if new <= cur:
            f, lam = f_new, l_new
        else:
            new = cur
        coeffs, new, c = _refit_if_better(r, cfg, coeffs, f, lam, new)
        clamped |= c
        if not math.isfinite(new):
            raise FitError("non-finite loss during coordinate sweeps")
        sweeps = sweep
        rel = _rel_improvement(cur, new)
        cur = new
        trace.append({"phase": "sweep", "iter": sweep, "loss": cur})
        if rel < cfg.tol_rel:
            break

    # the last accepted step may have come from the joint Gauss-Newton update;
    # finish on the exact OLS coefficients unless that costs more than round-off
    final, info = refit_coeffs(r, f, lam, cfg.degree, cfg.coef_bound, return_info=True)
    if _loss_arrays(r, final, f, lam) <= cur * (1.0 + 1e-12) + floor:
        coeffs = final
        clamped |= info["clamped"]

    if clamped:
        warnings.warn("coefficient bound was active during the fit", RuntimeWarning)
    params = HflParams(np.asarray(coeffs, float), f, lam)
    fitted = poly_eval(params.coeffs, np.outer(lam, f))
    fit = HflFit(
        params=params,
        fitted=fitted,
        loss=float(np.mean((r - fitted) ** 2)),
        trace=trace,
        foc=None,
        config=cfg,
        clamped=clamped,
        gd_iters=gd_iters,
        sweeps=sweeps,
        panel_hash=panel_hash(r),
        starts=summary,
    )
    fit.foc = foc_diagnostics(r, fit)
    return fit


def foc_diagnostics(panel, fit: HflFit) -> FocDiagnostics:
    """Empirical first-order conditions of the coefficient subproblem.

    With OLS coefficients, the residuals are orthogonal to every power of
    f_t * lambda_i, hence to the fitted values and to the constant.
    """
    r = _returns(panel)
    p = fit.params
    x = np.outer(p.lam, p.f)
    fitted = poly_eval(p.coeffs, x)
    resid = r - fitted
    powers = np.array([np.mean(resid * x ** j) for j in range(p.coeffs.size)])
    return FocDiagnostics(
        mean_residual=float(np.mean(resid)),
        resid_fitted_moment=float(np.mean(resid * fitted)),
        power_moments=powers,
    )


def fit_from_dict(d: dict, panel) -> HflFit:
    """Rebuild an :class:`HflFit` from :meth:`HflFit.to_dict` output for ``panel``.

    Fitted values and FOC moments are recomputed from the stored parameters.
    The stored panel hash must match.
    """
    if d.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported fit schema version {d.get('schema_version')!r}")
    r = _returns(panel)
    h = panel_hash(r)
    if d.get("panel_hash") and d["panel_hash"] != h:
        raise ValueError("fit was produced on a different panel (hash mismatch)")
    params = HflParams(np.asarray(d["coeffs"], float), np.asarray(d["f"], float),
                       np.asarray(d["lambda"], float))
    if r.shape != (params.lam.size, params.f.size):
        raise ValueError("fit dimensions do not match the panel")
    fitted = poly_eval(params.coeffs, np.outer(params.lam, params.f))
    fit = HflFit(params=params, fitted=fitted, loss=float(np.mean((r - fitted) ** 2)),
                 trace=list(d.get("trace", [])), foc=None,
                 config=HflConfig.from_dict(d.get("config", {})),
                 clamped=bool(d.get("clamped", False)), gd_iters=int(d.get("gd_iters", 0)),
                 sweeps=int(d.get("sweeps", 0)), panel_hash=h,
                 starts=list(d.get("starts", [])))
    fit.foc = foc_diagnostics(r, fit)
    return fit
