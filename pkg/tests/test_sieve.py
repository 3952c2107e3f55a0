import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from hflkit.panel import ReturnPanel
from hflkit.sieve import (HflConfig, HflParams, fit_from_dict, fit_hfl, foc_diagnostics,
                          gradient_fl, init_svd, loss, poly_deriv, poly_eval, refit_coeffs,
                          starting_points)
from hflkit.synth import HSpec, simulate_hfl


def _panel(r):
    n, t = r.shape
    return ReturnPanel([f"{k:04d}" for k in range(t)], [f"a{i}" for i in range(n)], r)


def _random_params(rng, n, t, k=4, scale=10.0):
    return HflParams(rng.uniform(-scale, scale, k + 1), rng.uniform(0.05, 1, t),
                     rng.uniform(0.05, 1, n))


# -- polynomial and loss ----------------------------------------------------------

def test_poly_eval_examples(oracles):
    assert poly_eval([1, 2, 3], 0.5) == 2.75
    assert poly_eval([-4.5, 9, 9], 0.0) == -4.5
    o = oracles["poly"]
    assert_allclose(poly_eval(o["coeffs"], o["x"]), o["value"], rtol=0, atol=1e-14)
    c = np.array(o["coeffs"])
    naive = sum(cj * 0.37 ** j for j, cj in enumerate(c))
    assert_allclose(poly_eval(c, 0.37), naive, rtol=0, atol=1e-14)


@settings(max_examples=60, deadline=None)
@given(coeffs=st.lists(st.floats(-10, 10), min_size=1, max_size=8),
       x=st.floats(0, 1))
def test_poly_eval_matches_power_sum(coeffs, x):
    naive = sum(c * x ** j for j, c in enumerate(coeffs))
    assert_allclose(poly_eval(coeffs, x), naive, rtol=1e-12, atol=1e-12)


def test_poly_eval_vectorized_and_deriv():
    x = np.linspace(0, 1, 7)
    assert_allclose(poly_eval([1, 2, 3], x), 1 + 2 * x + 3 * x ** 2)
    assert_allclose(poly_deriv([1, 2, 3]), [2, 6])
    assert_allclose(poly_deriv([5]), [0])


def test_loss_examples(oracles):
    rng = np.random.default_rng(12)
    r = rng.normal(size=(4, 6))
    c = rng.normal(size=5)
    f = rng.uniform(0.1, 1, 6)
    lam = rng.uniform(0.1, 1, 4)
    params = HflParams(c, f, lam)
    assert_allclose(loss(_panel(r), params), oracles["loss"]["loss"], rtol=1e-14)
    exact = _panel(poly_eval(c, np.outer(lam, f)))
    assert loss(exact, params) == 0.0
    zero = HflParams(np.zeros(5), f, lam)
    assert_allclose(loss(_panel(r), zero), np.mean(r ** 2), rtol=1e-15)
    with pytest.raises(ValueError, match="dimension"):
        loss(_panel(r), HflParams(c, f[:5], lam))


def test_scale_quasi_invariance(rng):
    r = rng.normal(size=(6, 8))
    p = HflParams(rng.normal(size=5), rng.uniform(0.4, 0.8, 8), rng.uniform(0.2, 0.5, 6))
    c = 1.6
    q = HflParams(p.coeffs, p.f / c, p.lam * c)
    assert_allclose(loss(_panel(r), q), loss(_panel(r), p), rtol=1e-14)


# -- initialization ------------------------------------------------------------------

def test_init_svd_rank_one(rng):
    u = rng.uniform(0.2, 2.0, 12)
    v = rng.uniform(0.5, 3.0, 9)
    panel = _panel(np.outer(v, u))
    f0, l0 = init_svd(panel, 1e-6)
    assert_allclose([f0.min(), f0.max(), l0.min(), l0.max()], [1e-6, 1, 1e-6, 1])
    assert_allclose(np.corrcoef(f0, u)[0, 1], 1.0, atol=1e-12)
    assert_allclose(np.corrcoef(l0, v)[0, 1], 1.0, atol=1e-12)
    fit = fit_hfl(panel, HflConfig(degree=1))
    assert fit.loss <= 1e-12 * np.mean(panel.returns ** 2)


def test_init_svd_constant_and_sign():
    f0, l0 = init_svd(_panel(np.full((3, 5), 0.02)))
    assert_array_equal(f0, np.ones(5))
    assert_array_equal(l0, np.ones(3))
    r = np.random.default_rng(3).normal(size=(5, 7))
    a = init_svd(_panel(r))
    b = init_svd(_panel(-r))
    assert_allclose(a[0], b[0], atol=1e-12)
    assert_allclose(a[1], b[1], atol=1e-12)
    z = init_svd(_panel(np.zeros((2, 3))))
    assert_array_equal(z[0], np.ones(3))


# -- coefficient refit --------------------------------------------------------------

def test_refit_recovers_coefficients(rng):
    f, lam = rng.uniform(0.05, 1, 30), rng.uniform(0.05, 1, 20)
    c = np.array([0.3, -1.0, 2.0, 0.5, -0.25])
    r = poly_eval(c, np.outer(lam, f))
    assert_allclose(refit_coeffs(r, f, lam, 4), c, atol=1e-8)


def test_refit_degree_zero_is_grand_mean(rng):
    r = rng.normal(size=(5, 6))
    assert_allclose(refit_coeffs(r, rng.uniform(size=6), rng.uniform(size=5), 0),
                    [r.mean()], rtol=1e-14)


def test_refit_rank_deficient_min_norm(rng):
    r = rng.normal(size=(4, 5))
    f, lam = np.full(5, 0.5), np.full(4, 0.8)
    coeffs, info = refit_coeffs(r, f, lam, 3, return_info=True)
    v = np.vander(np.outer(lam, f).ravel(), 4, increasing=True)
    assert info["rank_deficient"] and info["rank"] == 1
    assert_allclose(coeffs, np.linalg.pinv(v) @ r.ravel(), rtol=1e-10)


def test_refit_clamp_reported():
    f, lam = np.linspace(0.1, 1, 10), np.linspace(0.2, 1, 8)
    r = poly_eval([0.0, 50.0], np.outer(lam, f))
    c, info = refit_coeffs(r, f, lam, 1, bound=10.0, return_info=True)
    assert info["clamped"] and c[1] == 10.0


# -- gradient --------------------------------------------------------------------------

def _fd_gradient(r, p, h=1e-6):
    gf = np.zeros_like(p.f)
    gl = np.zeros_like(p.lam)
    for vec, out in ((p.f, gf), (p.lam, gl)):
        for k in range(vec.size):
            old = vec[k]
            vec[k] = old + h
            up = loss(r, p)
            vec[k] = old - h
            dn = loss(r, p)
            vec[k] = old
            out[k] = (up - dn) / (2 * h)
    return gf, gl


@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    r = rng.normal(size=(10, 10))
    p = _random_params(rng, 10, 10)
    gf, gl = gradient_fl(r, p)
    fd_f, fd_l = _fd_gradient(r, p)
    assert_allclose(gf, fd_f, rtol=0, atol=1e-5)
    assert_allclose(gl, fd_l, rtol=0, atol=1e-5)


def test_gradient_zero_at_exact_fit(rng):
    p = _random_params(rng, 6, 7)
    gf, gl = gradient_fl(poly_eval(p.coeffs, np.outer(p.lam, p.f)), p)
    assert_allclose(gf, 0, atol=1e-15)
    assert_allclose(gl, 0, atol=1e-15)


def test_gradient_bilinear_specialization(rng):
    r = rng.normal(size=(5, 4))
    p = HflParams(np.array([0.0, 1.0]), rng.uniform(0.1, 1, 4), rng.uniform(0.1, 1, 5))
    gf, gl = gradient_fl(r, p)
    resid = r - np.outer(p.lam, p.f)
    assert_allclose(gf, -2 / 20 * (p.lam @ resid), rtol=1e-14)
    assert_allclose(gl, -2 / 20 * (resid @ p.f), rtol=1e-14)


# -- full fit --------------------------------------------------------------------------

def test_fit_rank_one_linear_exact(rng):
    panel = _panel(np.outer(rng.uniform(0.1, 1, 15), rng.uniform(0.1, 1, 12)))
    fit = fit_hfl(panel, HflConfig(degree=1))
    assert fit.loss <= 1e-10


def test_fit_zero_panel():
    fit = fit_hfl(_panel(np.zeros((4, 5))))
    assert_array_equal(fit.coeffs, np.zeros(5))
    assert fit.loss == 0.0


def _tangent_oracle_rmse(panel, truth, coeffs, degree=4):
    """RMSE of the least-squares fit linearized at the true parameters.

    The noise is projected on the tangent space of the model at the truth,
    spanned by derivatives in f, lambda and the polynomial coefficients.
    """
    lam, f = truth.lam, truth.f
    n, t = lam.size, f.size
    x = np.outer(lam, f)
    d = poly_eval(poly_deriv(coeffs), x)
    jac = np.zeros((n * t, t + n + degree + 1))
    rows = np.arange(n * t)
    ii, tt = np.divmod(rows, t)
    jac[rows, tt] = (d * lam[:, None]).ravel()
    jac[rows, t + ii] = (d * f[None, :]).ravel()
    jac[:, t + n:] = np.vander(x.ravel(), degree + 1, increasing=True)
    eps = (panel.returns - truth.signal).ravel()
    sol, *_ = np.linalg.lstsq(jac, eps, rcond=None)
    return float(np.sqrt(np.mean((jac @ sol) ** 2)))


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_fit_quadratic_noisy_near_oracle(seed):
    h = HSpec.parse([0.1, 0.5, 1.0])
    _, clean = simulate_hfl(50, 50, h, 0.0, seed=seed)
    panel, truth = simulate_hfl(50, 50, h, 0.5 * clean.signal.std(), seed=seed)
    fit = fit_hfl(panel)
    rmse = np.sqrt(np.mean((fit.fitted - truth.signal) ** 2))
    oracle = _tangent_oracle_rmse(panel, truth, np.array([0.1, 0.5, 1.0, 0.0, 0.0]))
    assert rmse <= 2.0 * oracle
    losses = [e["loss"] for e in fit.trace]
    assert all(b <= a for a, b in zip(losses, losses[1:]))


def test_fit_invariants(fast_cfg):
    panel, _ = simulate_hfl(30, 40, seed=4)
    fit = fit_hfl(panel, fast_cfg)
    p = fit.params
    assert np.all((p.f >= fast_cfg.box_floor) & (p.f <= 1))
    assert np.all((p.lam >= fast_cfg.box_floor) & (p.lam <= 1))
    assert np.all(np.abs(p.coeffs) <= fast_cfg.coef_bound)
    assert_allclose(fit.loss, loss(panel, p), rtol=1e-12)
    losses = [e["loss"] for e in fit.trace]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] <= losses[0]
    assert fit.trace[0]["phase"] == "init"
    scale = np.sqrt(np.mean(panel.returns ** 2))
    assert np.max(np.abs(fit.foc.power_moments)) <= 1e-10 * scale
    assert abs(fit.foc.mean_residual) <= 1e-10 * scale


def test_foc_resid_fitted_is_linear_combination(fast_cfg):
    panel, _ = simulate_hfl(20, 30, seed=5)
    fit = fit_hfl(panel, fast_cfg)
    foc = fit.foc
    assert_allclose(foc.resid_fitted_moment, fit.coeffs @ foc.power_moments, atol=1e-15)
    assert foc.mean_residual == foc.power_moments[0]


def test_foc_detects_perturbed_coefficients(fast_cfg):
    panel, _ = simulate_hfl(20, 30, seed=6)
    fit = fit_hfl(panel, fast_cfg)
    fit.params.coeffs = fit.params.coeffs + np.array([1e-3, 0, 0, 0, 0])
    bad = foc_diagnostics(panel, fit)
    assert abs(bad.mean_residual) > 1e-4


def test_fit_is_deterministic(fast_cfg):
    panel, _ = simulate_hfl(15, 20, seed=7)
    a, b = fit_hfl(panel, fast_cfg), fit_hfl(panel, fast_cfg)
    assert a.to_json() == b.to_json()


def test_fit_json_roundtrip(fast_cfg):
    panel, _ = simulate_hfl(12, 18, seed=8)
    fit = fit_hfl(panel, fast_cfg)
    doc = json.loads(fit.to_json())
    assert doc["schema_version"] == 1
    back = fit_from_dict(doc, panel)
    assert_array_equal(back.fitted, fit.fitted)
    assert back.loss == fit.loss
    other, _ = simulate_hfl(12, 18, seed=9)
    with pytest.raises(ValueError, match="hash"):
        fit_from_dict(doc, other)


def test_gradient_descent_mode_monotone():
    panel, _ = simulate_hfl(15, 20, seed=10)
    cfg = HflConfig(descent="gradient", gd_max_iters=30, sweep_max=5, starts=("svd",))
    fit = fit_hfl(panel, cfg)
    losses = [e["loss"] for e in fit.trace]
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert fit.gd_iters > 0


def test_starting_points_named(fast_cfg):
    panel, _ = simulate_hfl(10, 12, seed=11)
    names = [s[0] for s in starting_points(panel, fast_cfg)]
    assert names == ["svd", "svd_shift", "subspace"]


def test_config_validation():
    with pytest.raises(ValueError):
        HflConfig(box_floor=0.0)
    with pytest.raises(ValueError):
        HflConfig(tol_rel=0.0)
    with pytest.raises(ValueError):
        HflConfig(coef_bound=-1.0)
    with pytest.raises(ValueError, match="unknown"):
        HflConfig.from_dict({"degre": 3})
    assert HflConfig.from_dict({"degree": 3, "starts": ["svd"]}).starts == ("svd",)


def test_clamp_warning():
    f, lam = np.linspace(0.1, 1, 10), np.linspace(0.2, 1, 8)
    r = poly_eval([0.0, 50.0], np.outer(lam, f))
    with pytest.warns(RuntimeWarning, match="bound"):
        fit = fit_hfl(_panel(r), HflConfig(degree=1, coef_bound=10.0, sweep_max=3,
                                           gd_max_iters=5))
    assert fit.clamped
    assert np.all(np.abs(fit.coeffs) <= 10.0)


def test_non_finite_input_raises():
    from hflkit.sieve import FitError

    with pytest.raises(FitError):
        fit_hfl(np.array([[0.0, np.inf], [1.0, 2.0]]))
