import warnings

import numpy as np
import pytest
from scipy.special import expit

from recordbreak.eda import (ConvergenceError, LogitMLE, SeparationWarning, Table2x2,
                             Table2x2x2, eda_design, empirical_p_hat, exclude_sites,
                             fit_logit_mle, log_odds_ratio, moving_average,
                             nested_model_table, persistence_table, persistence_table3,
                             second_order_lors, yearly_eda)
from recordbreak.records import (N_DAYS, RecordTensor, SimulatedSeriesConfig,
                                 extract_records, simulate_series)


def tensor_from(ind, dist=None):
    ind = np.asarray(ind, dtype=np.int8)
    n = ind.shape[0]
    return RecordTensor(ind, np.zeros_like(ind, dtype=np.int16),
                        coords=np.zeros((n, 2)),
                        dist_coast=np.ones(n) if dist is None else dist)


def brute_tables(v, t):
    """Triple loop over sites and days with the cross-year lag convention."""
    n = v.shape[0]
    flat = v.reshape(n, -1)
    c2 = np.zeros((2, 2), int)
    c3 = np.zeros((2, 2, 2), int)
    for s in range(n):
        for d in range(N_DAYS):
            k = (t - 1) * N_DAYS + d
            j, a, b = flat[s, k], flat[s, k - 1], flat[s, k - 2]
            c2[j, a] += 1
            c3[j, a, b] += 1
    return c2, c3


def test_p_hat_extremes():
    z = np.zeros((2, 3, N_DAYS))
    z[:, 0] = 1
    ten = tensor_from(z)
    assert empirical_p_hat(ten, 2) == 0.0
    z[:, 2] = 1
    assert empirical_p_hat(tensor_from(z), 3) == 1.0
    with pytest.raises(ValueError):
        empirical_p_hat(ten, 1)


def test_p_hat_crm_law():
    panel = simulate_series(SimulatedSeriesConfig(T=10, replicates=100, seed=2))
    ten = extract_records(panel)
    for t in (2, 5, 10):
        se = np.sqrt((1 / t) * (1 - 1 / t) / (100 * N_DAYS))
        assert abs(empirical_p_hat(ten, t) - 1 / t) < 4 * se


def test_ties_count_as_zero():
    ind = np.zeros((1, 3, N_DAYS), np.int8)
    ind[:, 0] = 1
    tie = np.zeros_like(ind, dtype=np.int16)
    tie[0, 1, :] = 2
    ten = RecordTensor(ind, tie)
    assert empirical_p_hat(ten, 2) == 0.0


def test_all_zero_table():
    z = np.zeros((3, 4, N_DAYS))
    tab = persistence_table(tensor_from(z), 2)
    assert tab.counts[0, 0] == 365 * 3 and tab.total == 365 * 3


def test_alternating_pattern():
    z = np.zeros((1, 3, N_DAYS), np.int8)
    z.reshape(-1)[::2] = 1
    tab = persistence_table(tensor_from(z), 2)
    assert tab.counts[1, 1] == 0
    assert abs(int(tab.counts[0, 1]) - int(tab.counts[1, 0])) <= 1


def test_tables_match_brute_force():
    rng = np.random.default_rng(0)
    v = rng.integers(0, 2, (3, 4, N_DAYS)).astype(np.int8)
    ten = tensor_from(v)
    for t in (2, 3, 4):
        c2, c3 = brute_tables(v, t)
        assert np.array_equal(persistence_table(ten, t).counts, c2)
        t3 = persistence_table3(ten, t)
        assert np.array_equal(t3.counts, c3)
        assert np.array_equal(t3.collapse().counts, c2)


def test_lor_formulas():
    assert log_odds_ratio(Table2x2(np.zeros((2, 2)))) == 0.0
    assert log_odds_ratio(Table2x2(np.full((2, 2), 7))) == 0.0
    tab = Table2x2(np.array([[100, 5], [4, 3]]))  # n00, n01 / n10, n11
    assert log_odds_ratio(tab) == pytest.approx(np.log(3.5 * 100.5 / (5.5 * 4.5)), rel=1e-14)


def test_lor_symmetries():
    rng = np.random.default_rng(1)
    c = rng.integers(0, 50, (2, 2))
    lor = log_odds_ratio(Table2x2(c))
    assert log_odds_ratio(Table2x2(c.T)) == pytest.approx(lor, abs=1e-12)
    assert log_odds_ratio(Table2x2(c[::-1, ::-1])) == pytest.approx(lor, abs=1e-12)
    assert log_odds_ratio(Table2x2(c[::-1])) == pytest.approx(-lor, abs=1e-12)


def test_second_order_lors():
    assert second_order_lors(Table2x2x2(np.zeros((2, 2, 2)))) == (0.0, 0.0)
    rng = np.random.default_rng(2)
    c = rng.integers(0, 40, (2, 2, 2))
    r, n = second_order_lors(Table2x2x2(c))
    m = c + 0.5
    assert r == pytest.approx(np.log(m[1, 1, 1] * m[0, 0, 1] / (m[0, 1, 1] * m[1, 0, 1])))
    assert n == pytest.approx(np.log(m[1, 1, 0] * m[0, 0, 0] / (m[0, 1, 0] * m[1, 0, 0])))


def test_table_validation():
    with pytest.raises(ValueError):
        Table2x2(np.array([[1, -1], [0, 0]]))
    with pytest.raises(ValueError):
        Table2x2x2(np.zeros((2, 2)))


def test_yearly_eda_keys():
    panel = simulate_series(SimulatedSeriesConfig(T=6, replicates=2, seed=1))
    out = yearly_eda(extract_records(panel))
    assert list(out) == ["t", "p_hat", "lor1", "lor_..1", "lor_..0"]
    assert out["t"].tolist() == [2, 3, 4, 5, 6]


def test_moving_average():
    assert np.allclose(moving_average([1, 2, 3, 4, 5], 3), [1.5, 2, 3, 4, 4.5])


def test_logit_intercept_balanced():
    y = np.array([0, 1] * 50)
    fit = fit_logit_mle(np.ones((100, 1)), y)
    assert abs(fit.coef[0]) < 1e-12 and fit.converged
    assert fit.aic == pytest.approx(-2 * fit.loglik + 2)


def test_logit_offset_only_dof_zero():
    rng = np.random.default_rng(3)
    t = rng.integers(2, 40, 2000)
    y = (rng.random(2000) < 1 / t).astype(float)
    fit = fit_logit_mle(np.zeros((2000, 0)), y, offset=-np.log(t - 1))
    assert fit.dof == 0 and fit.aic == -2 * fit.loglik


def test_logit_recovers_truth_and_gradient():
    rng = np.random.default_rng(4)
    X = np.column_stack([np.ones(20000), rng.normal(size=(20000, 3))])
    beta = np.array([-1.0, 0.5, -0.8, 0.2])
    y = (rng.random(20000) < expit(X @ beta)).astype(float)
    fit = fit_logit_mle(X, y)
    assert np.all(np.abs(fit.coef - beta) < 3 * fit.se)
    grad = X.T @ (y - expit(X @ fit.coef))
    assert np.max(np.abs(grad)) < 1e-8


def test_logit_aic_drops_with_active_covariate():
    rng = np.random.default_rng(5)
    x = rng.normal(size=20000)
    y = (rng.random(20000) < expit(-0.5 + 0.3 * x)).astype(float)
    small = fit_logit_mle(np.ones((20000, 1)), y)
    big = fit_logit_mle(np.column_stack([np.ones(20000), x]), y)
    assert big.aic < small.aic


def test_logit_separation_flagged():
    x = np.linspace(-1, 1, 40)
    y = (x > 0).astype(float)
    with pytest.warns(SeparationWarning):
        fit = fit_logit_mle(np.column_stack([np.ones(40), x]), y)
    assert fit.separated and not fit.converged


def test_logit_nonconvergence_and_rank():
    rng = np.random.default_rng(6)
    X = np.column_stack([np.ones(200), rng.normal(size=200)])
    y = (rng.random(200) < 0.4).astype(float)
    with pytest.raises(ConvergenceError):
        fit_logit_mle(X, y, max_iter=1, tol=0.0)
    with pytest.raises(ValueError):
        fit_logit_mle(np.column_stack([X, X[:, 1]]), y)


def test_logit_estimator():
    rng = np.random.default_rng(7)
    X = np.column_stack([np.ones(500), rng.normal(size=500)])
    y = (rng.random(500) < expit(X @ [0.2, 1.0])).astype(int)
    est = LogitMLE().fit(X, y)
    p = est.predict_proba(X)
    assert p.shape == (500, 2) and np.allclose(p.sum(1), 1)
    assert set(np.unique(est.predict(X))) <= {0, 1}


def test_nested_table_shape_and_aic():
    panel = simulate_series(SimulatedSeriesConfig(model="ldm", drift=0.05, T=10, replicates=4,
                                                  seed=8))
    rows = nested_model_table(extract_records(panel))
    names = [r[0] for r in rows]
    assert names[0] == "Stationary" and names[-1] == "Cubic trend"
    dofs = [r[1].dof for r in rows]
    assert dofs == [0, 2, 3, 5, 9, 15, 18, 21, 4]
    for _, fit in rows:
        assert fit.aic == pytest.approx(-2 * fit.loglik + 2 * fit.dof)


def test_eda_design_and_exclude_sites():
    panel = simulate_series(SimulatedSeriesConfig(T=5, replicates=3, seed=9))
    ten = extract_records(panel)
    X, y, t = eda_design(ten)
    assert X.shape == (4 * N_DAYS * 3, 21) and y.shape == t.shape == (X.shape[0],)
    sub = exclude_sites(ten, ["S0001"])
    assert list(sub.sites) == ["S0000", "S0002"]
    with pytest.raises(KeyError):
        exclude_sites(ten, ["nope"])
