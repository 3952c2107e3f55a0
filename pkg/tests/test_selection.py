import numpy as np
import pytest
from numpy.testing import assert_allclose

from hflkit.econometrics import add_constant, ols, white_se
from hflkit.selection import (KKT_TOL, P_BUCKETS, SelectionError, Standardizer, abs_t_summary,
                              bucket_shares, cv_lasso, double_selection, fold_ids, kkt_residual,
                              lambda_grid, lambda_max, lasso, p_bucket, soft_threshold)


def _orthonormal_design(rng, n, p):
    q, _ = np.linalg.qr(rng.normal(size=(n, p)) - 0.0)
    q = q - q.mean(axis=0)
    q, _ = np.linalg.qr(q)
    return q * np.sqrt(n)  # mean 0 and z'z/n = I


def _kkt(y, x, res):
    st = Standardizer.fit(x)
    return kkt_residual(st.transform(x), y - y.mean(), res.coef_std[st.keep], res.lam)


def test_lasso_zero_penalty_is_ols(rng):
    x = rng.normal(size=(60, 4))
    y = x @ [1, -2, 0.5, 0] + rng.normal(size=60)
    res = lasso(y, x, 0.0)
    o = ols(y, add_constant(x))
    assert_allclose(res.coef, o.coefficients[1:], atol=1e-8)
    assert res.intercept == pytest.approx(o.coefficients[0], abs=1e-8)


def test_lasso_lambda_max_kills_all(rng):
    x = rng.normal(size=(40, 5))
    y = x[:, 0] + rng.normal(size=40)
    lm = lambda_max(y, x)
    for lam in (lm, 2 * lm):
        res = lasso(y, x, lam)
        assert np.all(res.coef == 0) and res.active.size == 0
    assert lasso(y, x, 0.99 * lm).active.size >= 1


def test_lasso_orthonormal_soft_threshold(rng):
    n = 50
    z = _orthonormal_design(rng, n, 5)
    y = z @ [1.0, -0.5, 0.2, 0.0, 0.05] + 0.3 * rng.normal(size=n)
    b_ols = z.T @ (y - y.mean()) / n
    for lam in (0.0, 0.1, 0.3, 0.7):
        res = lasso(y, z, lam)
        assert_allclose(res.coef_std, soft_threshold(b_ols, lam), rtol=0, atol=1e-10)


def test_lasso_path_lipschitz_on_orthonormal(rng):
    z = _orthonormal_design(rng, 40, 4)
    y = z @ [0.8, -0.4, 0.1, 0.0] + 0.2 * rng.normal(size=40)
    grid = lambda_grid(y, z, n_lambda=30)
    coefs = [lasso(y, z, lam).coef_std for lam in grid]
    for k in range(1, len(grid)):
        assert np.max(np.abs(coefs[k] - coefs[k - 1])) <= (grid[k - 1] - grid[k]) + 1e-10


def test_lasso_matches_reference_solver(oracles):
    rng = np.random.default_rng(17)
    x = rng.normal(size=(80, 6))
    y = x @ [1.5, 0, -0.7, 0, 0, 0.3] + rng.normal(size=80)
    res = lasso(y, x, oracles["lasso"]["lam"])
    assert_allclose(res.coef_std, oracles["lasso"]["coef_std"], atol=1e-8)


def test_lasso_kkt_everywhere(rng):
    for trial in range(10):
        n, p = 30 + 5 * trial, 3 + trial * 3
        x = rng.normal(size=(n, p)) * rng.uniform(0.1, 5, p)
        y = x[:, :2] @ [1, -1] + rng.normal(size=n)
        for lam in lambda_grid(y, x, n_lambda=12):
            res = lasso(y, x, lam)
            assert res.converged
            assert res.kkt_residual <= KKT_TOL
            assert _kkt(y, x, res) <= KKT_TOL


def test_lasso_drops_zero_variance(rng):
    x = np.column_stack([rng.normal(size=20), np.full(20, 3.0), rng.normal(size=20)])
    y = x[:, 0] + 0.1 * rng.normal(size=20)
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        res = lasso(y, x, 0.01)
    assert res.dropped == (1,) and res.coef[1] == 0.0


def test_lasso_negative_lambda(rng):
    with pytest.raises(SelectionError):
        lasso(rng.normal(size=5), rng.normal(size=(5, 2)), -1.0)


def test_fold_ids_seeded_blocks():
    ids = fold_ids(23, 5, seed=3)
    assert sorted(np.bincount(ids)) == [4, 4, 5, 5, 5]
    assert np.array_equal(ids, fold_ids(23, 5, seed=3))
    assert not np.array_equal(ids, fold_ids(23, 5, seed=4))


def test_cv_single_lambda_and_ties(rng):
    x = rng.normal(size=(30, 3))
    y = rng.normal(size=30)
    rep = cv_lasso(y, x, lambdas=[0.05])
    assert rep.chosen == 0.05 and rep.fold_mse.shape == (5, 1)
    big = lambda_max(y, x) * 10
    rep = cv_lasso(y, x, lambdas=[big * 2, big])  # both kill every slope
    assert rep.chosen == big * 2


def test_cv_chooses_minimum(rng):
    x = rng.normal(size=(50, 4))
    y = x[:, 0] + rng.normal(size=50)
    rep = cv_lasso(y, x, seed=1)
    assert rep.mean_mse[rep.chosen_index] == rep.mean_mse.min()
    assert rep.lambdas.size == 100
    assert rep.lambdas[-1] == pytest.approx(1e-4 * rep.lambdas[0])
    with pytest.raises(SelectionError):
        cv_lasso(y[:3], x[:3])


def test_cv_pure_noise_is_sparse():
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(60, 8))
        rep = cv_lasso(rng.normal(size=60), x, seed=seed)
        hits += rep.chosen_index < rep.lambdas.size // 2
    assert hits >= 40


def test_cv_strong_predictor_selected():
    hits = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(60, 8))
        y = 1.0 * x[:, 2] + rng.normal(size=60)
        rep = cv_lasso(y, x, seed=seed)
        hits += 2 in lasso(y, x, rep.chosen).active
    assert hits >= 48


def test_double_selection_no_controls_is_ols(rng):
    y = rng.normal(size=40)
    t = rng.normal(size=40)
    ds = double_selection(y, t, None)
    design = add_constant(t)
    assert ds.coefficient == pytest.approx(ols(y, design).coefficients[1], rel=1e-12)
    assert ds.se == pytest.approx(white_se(y, design, hc1=True)[1], rel=1e-12)
    assert ds.union == ()


def test_double_selection_final_ols_and_permutation(rng):
    n, p = 80, 12
    c = rng.normal(size=(n, p))
    t = c[:, 0] + rng.normal(size=n)
    y = 0.5 * t + c[:, 1] + rng.normal(size=n)
    names = [f"z{j:02d}" for j in range(p)]
    a = double_selection(y, t, c, names, seed=2)
    pos = [names.index(u) for u in a.union]
    design = np.column_stack([np.ones(n), t, c[:, pos]])
    assert a.coefficient == pytest.approx(ols(y, design).coefficients[1], rel=1e-12)
    perm = rng.permutation(p)
    b = double_selection(y, t, c[:, perm], [names[j] for j in perm], seed=2)
    assert a.to_dict() == b.to_dict()
    assert "z01" in a.union and "z00" in a.union


def test_double_selection_always_include(rng):
    n = 50
    c = rng.normal(size=(n, 4))
    ds = double_selection(rng.normal(size=n), rng.normal(size=n), c, list("abcd"),
                          always_include=["c"])
    assert "c" in ds.union
    with pytest.raises(SelectionError):
        double_selection(rng.normal(size=n), rng.normal(size=n), c, list("abcd"),
                         always_include=["q"])


def test_double_selection_union_too_large(rng):
    n = 8
    c = rng.normal(size=(n, 6))
    with pytest.raises(SelectionError, match="union"):
        double_selection(rng.normal(size=n), rng.normal(size=n), c,
                         list("abcdef"), always_include=list("abcdef"), n_folds=2)


def test_buckets_and_t_summary():
    assert [p_bucket(p) for p in (0.01, 0.05, 0.1, 0.11)] == list(P_BUCKETS)
    shares = bucket_shares([0.001, 0.002, 0.2, 0.07])
    assert shares == {"p<=1%": 50.0, "1%<p<=5%": 0.0, "5%<p<=10%": 25.0, "p>10%": 25.0}
    s = abs_t_summary([-2.0, 4.0])
    assert s["mean_abs_t"] == 3.0 and s["sd_abs_t"] == pytest.approx(np.sqrt(2))
