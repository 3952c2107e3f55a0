import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hflkit.panel import summarize
from hflkit.sieve import HflConfig, fit_hfl
from hflkit.synth import (HSpec, TARGET_MEAN, TARGET_STD, calibrated_noise_sd,
                          multifactor_signal, recovery_report, simulate_hfl,
                          simulate_multifactor)

NEST_MARGIN = 0.005


def test_same_seed_bit_identical():
    a, ta = simulate_hfl(12, 15, seed=4)
    b, tb = simulate_hfl(12, 15, seed=4)
    assert_array_equal(a.returns, b.returns)
    assert ta.to_json() == tb.to_json()
    c, _ = simulate_hfl(12, 15, seed=5)
    assert not np.array_equal(a.returns, c.returns)
    m1, _ = simulate_multifactor(8, 9, 2, "general", 0.1, seed=1)
    m2, _ = simulate_multifactor(8, 9, 2, "general", 0.1, seed=1)
    assert_array_equal(m1.returns, m2.returns)


def test_truth_reconstructs_panel():
    panel, truth = simulate_hfl(10, 12, seed=2)
    rng = np.random.default_rng(2)
    rng.uniform(size=12), rng.uniform(size=10)
    eps = rng.standard_normal((10, 12))
    assert_allclose(panel.returns, truth.signal + truth.noise_sd * eps, rtol=0, atol=1e-15)
    assert np.all((truth.f >= 0.05) & (truth.f <= 1)) and np.all(truth.lam >= 0.05)
    doc = json.loads(truth.to_json())
    assert doc["generator"] == "hfl" and len(doc["f"]) == 12 and doc["panel_hash"]


def test_linear_h_rank_one():
    panel, _ = simulate_hfl(3, 3, [0.0, 1.0], 0.0, seed=0)
    s = np.linalg.svd(panel.returns, compute_uv=False)
    assert s[0] ** 2 / np.sum(s ** 2) == pytest.approx(1.0, abs=1e-14)


def test_quadratic_noiseless_recovery():
    panel, truth = simulate_hfl(30, 30, [0.1, -0.8, 1.2], 0.0, seed=3)
    fit = fit_hfl(panel, HflConfig(degree=2))
    rep = recovery_report(fit, truth)
    assert rep.mse <= 1e-8
    assert (rep.n_assets, rep.n_months, rep.degree) == (30, 30, 2)


def test_recovery_report_mismatch(fast_cfg):
    panel, truth = simulate_hfl(10, 12, seed=1)
    other, _ = simulate_hfl(10, 12, seed=2)
    fit = fit_hfl(other, fast_cfg)
    with pytest.raises(ValueError, match="panel"):
        recovery_report(fit, truth)


def test_multifactor_linear_rank():
    panel, truth = simulate_multifactor(30, 25, 3, "linear", 0.0, seed=0)
    s = np.linalg.svd(panel.returns, compute_uv=False)
    assert np.all(s[3:] <= 1e-10 * s[0])
    one, t1 = simulate_multifactor(5, 6, 1, "linear", 0.0, seed=0)
    assert_allclose(one.returns, np.outer(t1.extra["z"][:, 0], t1.extra["x"][:, 0]))


def test_multifactor_forms_closed_form(rng):
    x, z = rng.uniform(size=(4, 2)), rng.uniform(size=(3, 2))
    assert_allclose(multifactor_signal(x, z, "single_index"), np.log1p(z @ x.T))
    expect = np.sin(0.5 + 2 * np.outer(z[:, 0], x[:, 0])) * np.sin(0.5 + 2 * np.outer(z[:, 1], x[:, 1]))
    assert_allclose(multifactor_signal(x, z, "general"), expect)
    with pytest.raises(ValueError):
        multifactor_signal(x, z, "cubic")
    with pytest.raises(ValueError):
        simulate_multifactor(3, 3, 0)


def test_nesting_experiment(fast_cfg):
    wins = 0
    for seed in range(20):
        panel, _ = simulate_multifactor(40, 40, 2, "general", 0.05, seed=seed)
        r = panel.returns
        sst = np.sum((r - r.mean()) ** 2)
        fit = fit_hfl(panel, fast_cfg)
        u, s, vt = np.linalg.svd(r, full_matrices=False)
        rank1 = s[0] * np.outer(u[:, 0], vt[0])
        r2_hfl = 1 - np.sum((r - fit.fitted) ** 2) / sst
        r2_lin = 1 - np.sum((r - rank1) ** 2) / sst
        wins += r2_hfl >= r2_lin + NEST_MARGIN
    assert wins >= 16


def test_noise_independence():
    panel, truth = simulate_hfl(200, 200, noise_sd=0.05, seed=9)
    eps = panel.returns - truth.signal
    band = 3 / np.sqrt(eps.size)
    ac_t = np.sum(eps[:, 1:] * eps[:, :-1]) / np.sum(eps ** 2)
    ac_i = np.sum(eps[1:] * eps[:-1]) / np.sum(eps ** 2)
    assert abs(ac_t) <= band and abs(ac_i) <= band


def test_default_calibration_hits_summary_moments():
    means, stds = [], []
    for seed in range(20):
        panel, _ = simulate_hfl(171, 360, seed=seed)
        s = summarize(panel)
        means.append(s.mean_pct["All"])
        stds.append(s.std_pct["All"])
    assert np.mean(means) == pytest.approx(100 * TARGET_MEAN, abs=0.02)
    assert np.mean(stds) == pytest.approx(100 * TARGET_STD, rel=0.005)


def test_hspec_parsing():
    assert HSpec.parse("0.1,1,-0.5").coeffs == (0.1, 1.0, -0.5)
    assert HSpec.parse("log1p").name == "log1p"
    assert HSpec.parse([1, 2])(0.5) == 2.0
    assert HSpec.parse({"kind": "poly", "coeffs": [3]})(0.2) == 3.0
    t1 = HSpec.parse("calibrated")
    assert HSpec.parse(None) == t1
    with pytest.raises(ValueError):
        HSpec.parse("not-a-link")
    with pytest.raises(ValueError):
        HSpec.parse([])
    with pytest.raises(ValueError):
        simulate_hfl(1, 5)
    assert 0 < calibrated_noise_sd(t1) < TARGET_STD
