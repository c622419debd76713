import numpy as np
import pytest
from scipy import stats

from recordbreak.samplers import (KS_MEAN, AdaptiveRWState, FactorizationError,
                                  adaptive_rw_step, ks_cdf, robust_cholesky, sample_gamma,
                                  sample_inverse_gamma, sample_ks, sample_mvn,
                                  sample_mvn_precision, sample_truncated_normal)

GOF_ALPHA = 1e-3


def test_ks_cdf_matches_scipy():
    x = np.linspace(0.05, 3.0, 200)
    assert np.allclose(ks_cdf(x), stats.kstwobign.cdf(x), atol=1e-13)


def test_ks_mean_and_sup_distance():
    rng = np.random.default_rng(11)
    k = sample_ks(rng, size=1_000_000)
    assert np.all(k > 0)
    assert abs(k.mean() - KS_MEAN) < 0.002
    assert abs(KS_MEAN - 0.8687) < 1e-4
    res = stats.kstest(k, stats.kstwobign.cdf)
    assert res.statistic < 0.002
    assert res.pvalue > GOF_ALPHA


def test_ks_scalar_and_replay():
    a = sample_ks(np.random.default_rng(3), size=10)
    b = sample_ks(np.random.default_rng(3), size=10)
    assert np.array_equal(a, b)
    assert isinstance(sample_ks(np.random.default_rng(0)), float)


def test_tn_half_normal_mean():
    rng = np.random.default_rng(5)
    z = sample_truncated_normal(np.zeros(1_000_000), 1.0, 0.0, np.inf, rng)
    assert np.all(z > 0)
    assert abs(z.mean() - np.sqrt(2 / np.pi)) < 0.003


def test_tn_untruncated_moments():
    rng = np.random.default_rng(6)
    z = sample_truncated_normal(np.full(200_000, 2.0), 9.0, -np.inf, np.inf, rng)
    assert abs(z.mean() - 2.0) < 0.03 and abs(z.var() - 9.0) < 0.15


def test_tn_far_tail_mills_ratio():
    rng = np.random.default_rng(7)
    z = sample_truncated_normal(np.zeros(200_000), 1.0, 5.0, np.inf, rng)
    assert np.all(z >= 5)
    mills = stats.norm.pdf(5) / stats.norm.sf(5)
    assert abs(z.mean() - mills) < 0.01


@pytest.mark.parametrize("a,b", [(0.0, np.inf), (-np.inf, 0.0), (0.2, 0.9), (1.5, 1.7),
                                 (3.0, np.inf), (-6.0, -5.5), (-1.0, 4.0)])
def test_tn_gof(a, b):
    rng = np.random.default_rng(8)
    z = sample_truncated_normal(np.zeros(200_000), 1.0, a, b, rng)
    assert np.all((z >= a) & (z <= b))
    assert stats.kstest(z, stats.truncnorm(a, b).cdf).pvalue > GOF_ALPHA


def test_tn_shifted_scaled_gof():
    rng = np.random.default_rng(9)
    mu, sd = 1.3, 0.7
    z = sample_truncated_normal(np.full(100_000, mu), sd ** 2, 0.0, np.inf, rng)
    ref = stats.truncnorm((0 - mu) / sd, np.inf, loc=mu, scale=sd)
    assert stats.kstest(z, ref.cdf).pvalue > GOF_ALPHA


def test_tn_errors_and_shape():
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError):
        sample_truncated_normal(0.0, 0.0, 0.0, 1.0, rng)
    with pytest.raises(ValueError):
        sample_truncated_normal(0.0, 1.0, 1.0, 1.0, rng)
    with pytest.raises(ValueError):
        sample_truncated_normal(0.0, 1.0, 40.0, np.inf, rng)
    out = sample_truncated_normal(np.zeros((3, 4)), 1.0, 0.0, np.inf, rng)
    assert out.shape == (3, 4)
    assert isinstance(sample_truncated_normal(0.0, 1.0, 0.0, np.inf, rng), float)


def test_mvn_covariance():
    rng = np.random.default_rng(10)
    A = rng.normal(size=(4, 4))
    cov = A @ A.T + np.eye(4)
    mean = np.arange(4.0)
    draws = np.array([sample_mvn(mean, cov, rng) for _ in range(100_000)])
    err = np.linalg.norm(np.cov(draws.T) - cov) / np.linalg.norm(cov)
    assert err < 0.02
    assert np.allclose(draws.mean(0), mean, atol=0.05)


def test_mvn_degenerate_and_scalar():
    rng = np.random.default_rng(1)
    x = sample_mvn([3.0, -1.0], np.eye(2) * 1e-12, rng)
    assert np.allclose(x, [3.0, -1.0], atol=1e-4)
    a = sample_mvn([0.5], [[4.0]], np.random.default_rng(2))
    b = 0.5 + 2.0 * np.random.default_rng(2).standard_normal(1)
    assert np.allclose(a, b)


def test_mvn_precision_moments():
    rng = np.random.default_rng(12)
    Q = np.array([[2.0, 0.5], [0.5, 1.0]])
    b = np.array([1.0, -1.0])
    x = sample_mvn_precision(np.broadcast_to(b, (200_000, 2)),
                             np.broadcast_to(Q, (200_000, 2, 2)), rng)
    assert np.allclose(x.mean(0), np.linalg.solve(Q, b), atol=0.01)
    assert np.allclose(np.cov(x.T), np.linalg.inv(Q), atol=0.01)


def test_robust_cholesky_jitter_and_failure():
    S = np.ones((3, 3))  # rank one, fixed by jitter
    L = robust_cholesky(S, "rank-one")
    assert np.allclose(L @ L.T, S, atol=1e-5)
    with pytest.raises(FactorizationError, match="bad matrix"):
        robust_cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]), "bad matrix")


def test_gamma_moments_and_scaling():
    rng = np.random.default_rng(13)
    g = sample_gamma(2.0, 1.0, rng, size=1_000_000)
    assert np.all(g > 0) and abs(g.mean() - 2.0) < 0.01
    a = sample_gamma(3.0, 4.0, np.random.default_rng(1), size=5)
    b = sample_gamma(3.0, 1.0, np.random.default_rng(1), size=5)
    assert np.allclose(a * 4.0, b)
    with pytest.raises(ValueError):
        sample_gamma(0.0, 1.0, rng)


def test_gamma_and_inverse_gamma_gof():
    rng = np.random.default_rng(14)
    g = sample_gamma(2.5, 3.0, rng, size=1_000_000)
    assert stats.kstest(g, stats.gamma(2.5, scale=1 / 3.0).cdf).pvalue > GOF_ALPHA
    ig = sample_inverse_gamma(2.0, 300.0, rng, size=1_000_000)
    assert stats.kstest(ig, stats.invgamma(2.0, scale=300.0).cdf).pvalue > GOF_ALPHA


def _run(state, logp, n, rng, freeze_at=None):
    out = np.empty(n)
    for i in range(n):
        adaptive_rw_step(state, logp, rng)
        if freeze_at is not None and i == freeze_at:
            state.freeze()
        out[i] = state.value
    return out


def test_rw_flat_target_always_accepts():
    rng = np.random.default_rng(0)
    st = AdaptiveRWState(value=1.0, log_sd=1.0, log_scale=False)
    _run(st, lambda x: 0.0, 500, rng)
    assert st.acceptance_rate == 1.0


def test_rw_adaptation_on_normal():
    rng = np.random.default_rng(1)
    st = AdaptiveRWState(value=0.0, log_sd=np.log(0.05), log_scale=False)
    _run(st, lambda x: -0.5 * x * x, 30_000, rng, freeze_at=20_000)
    assert 0.25 < st.acceptance_rate < 0.45


@pytest.mark.parametrize("name,logp,dist", [
    ("lognormal", lambda x: -np.log(x) - 0.5 * np.log(x) ** 2, stats.lognorm(1.0)),
    ("gamma", lambda x: 2.0 * np.log(x) - 2.0 * x, stats.gamma(3.0, scale=0.5)),
    ("exponential", lambda x: -x, stats.expon()),
])
def test_rw_frozen_targets(name, logp, dist):
    rng = np.random.default_rng(2)
    st = AdaptiveRWState(value=1.0, log_sd=np.log(0.5))
    x = _run(st, logp, 200_000, rng, freeze_at=5_000)[5_000::20]
    for q in (0.1, 0.5, 0.9):
        assert abs(np.mean(x <= dist.ppf(q)) - q) < 0.02, name


def test_rw_nonfinite_current_raises():
    st = AdaptiveRWState(value=1.0)
    with pytest.raises(ValueError):
        adaptive_rw_step(st, lambda x: -np.inf, np.random.default_rng(0))


def test_rw_linalg_error_is_rejection():
    def target(x):
        if x > 1.0:
            raise np.linalg.LinAlgError("singular")
        return 0.0
    st = AdaptiveRWState(value=1.0, log_sd=np.log(0.5))
    _run(st, target, 200, np.random.default_rng(0))
    assert st.value <= 1.0


def test_effective_range_prior_quantiles():
    q = stats.invgamma(2.0, scale=300.0).ppf([0.05, 0.95])
    assert abs(q[0] - 63.2) < 0.1 and abs(q[1] - 844.2) < 0.1
