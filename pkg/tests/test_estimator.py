import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drank.errors import (
    DegenerateDesignError,
    DomainError,
    InsufficientTableError,
    RankDeficiencyError,
)
from drank.estimator import (
    Estimate,
    RankedSample,
    VarianceComponents,
    asymptotic_variance,
    fit_lse,
    fit_modified,
    fit_multiple,
    lse_batch,
    test_rho_zero,
    variance_components,
)
from drank.scores import ScoreTable, build_score_table, mos_exact
from drank.simulation import replicate_responses


@pytest.fixture(scope="module")
def normal4():
    return build_score_table("normal", 4)


NORMAL50 = build_score_table("normal", 50)


@pytest.fixture(scope="module")
def normal50():
    return NORMAL50


def uniform_moments_table(n):
    """Uniform scores with closed-form variances and covariances, all n ranks."""
    pos = n - np.arange(n)
    alpha = np.sqrt(12) * (pos / (n + 1) - 0.5)
    r = np.minimum.outer(pos, pos)
    s = np.maximum.outer(pos, pos)
    beta = 12 * r * (n - s + 1) / ((n + 1) ** 2 * (n + 2))
    return ScoreTable(n=n, m=n, alpha=alpha, method="exact_quadrature", sigma2=np.diag(beta).copy(),
                      beta=beta)


# -- RankedSample --------------------------------------------------------------

def test_ranked_sample_plugins():
    s = RankedSample([3.0, 1.0], [2.0, 6.0])
    assert (s.n, s.m) == (4, 2)
    assert s.mu_hat == 3.0
    assert s.sigma_hat == pytest.approx(math.sqrt((0 + 4 + 1 + 9) / 4))


def test_ranked_sample_rejects_constant():
    with pytest.raises(DomainError):
        RankedSample([1.0, 1.0], [1.0])


def test_censor_moves_ranks_to_rest():
    s = RankedSample.from_ranked([5.0, 4.0, 3.0, 2.0, 1.0], 4)
    c = s.censor(2)
    assert c.m == 2 and c.n == 5
    assert c.mu_hat == s.mu_hat and c.sigma_hat == s.sigma_hat
    assert sorted(c.y_rest) == [1.0, 2.0, 3.0]


# -- fit_lse -------------------------------------------------------------------

def test_hand_example(normal4):
    a1, a2 = mos_exact("normal", 4, 4), mos_exact("normal", 3, 4)
    assert a1 == pytest.approx(1.0294, abs=5e-5) and a2 == pytest.approx(0.2970, abs=5e-5)
    s = RankedSample([-2.0, -0.5], [0.5, 2.0])
    sig = math.sqrt((4 + 0.25 + 0.25 + 4) / 4)
    want = (a1 * -2.0 + a2 * -0.5) / (sig * (a1 * a1 + a2 * a2))
    assert fit_lse(s, normal4).rho_hat == pytest.approx(want, rel=1e-14)


def test_hand_example_modified(normal4):
    a1, a2 = mos_exact("normal", 4, 4), mos_exact("normal", 3, 4)
    s = RankedSample([-2.0, -0.5], [0.5, 2.0])
    sig = math.sqrt(8.5 / 4)
    abar = -(a1 + a2) / 2
    num = a1 * -2.0 + a2 * -0.5 + 2 * abar * (1.25 - 0.0)
    den = a1 * a1 + a2 * a2 + 2 * abar * abar
    assert fit_modified(s, normal4).rho_hat == pytest.approx(num / (sig * den), rel=1e-14)


def perfect_fit_sample(table, m):
    """Top-m responses equal to mu_hat + sigma_hat * alpha for the sample's own plug-ins."""
    a = table.alpha[:m]
    k = table.n - m
    u = -a.sum() / k
    v = math.sqrt((table.n - a @ a - k * u * u) / k)
    w = np.where(np.arange(k) % 2 == 0, 1.0, -1.0)
    s = RankedSample(a, u + v * w)
    assert s.mu_hat == pytest.approx(0, abs=1e-14) and s.sigma_hat == pytest.approx(1, abs=1e-14)
    return s


def test_perfect_fit_gives_one():
    t = build_score_table("normal", 500, 50)
    s = perfect_fit_sample(t, 50)
    est = fit_lse(s, t)
    assert est.rho_hat == pytest.approx(1.0, abs=1e-13)
    assert est.p_value < 1e-10


def test_flat_top_gives_zero(normal50):
    s = RankedSample(np.zeros(10), np.r_[np.ones(20), -np.ones(20)])
    est = fit_lse(s, normal50)
    assert est.rho_hat == 0.0
    assert est.p_value == 1.0


def test_unbounded_estimate_is_flagged(normal50):
    a = normal50.alpha[:3]
    s = RankedSample(10 * a, np.r_[np.full(23, 0.1), np.full(24, -0.1)])
    est = fit_lse(s, normal50)
    assert abs(est.rho_hat) > 1 and est.exceeds_unit


def test_degenerate_design():
    t = ScoreTable(n=3, m=1, alpha=[0.0], method="exact_quadrature")
    with pytest.raises(DegenerateDesignError):
        fit_lse(RankedSample([1.0], [0.0, 2.0]), t)


def test_table_sample_mismatch(normal50):
    with pytest.raises(DomainError):
        fit_lse(RankedSample([1.0, 2.0], [0.0]), normal50)
    with pytest.raises(InsufficientTableError):
        fit_lse(RankedSample(np.arange(12.0), np.zeros(38)), normal50.head(10))


@given(seed=st.integers(0, 10_000), m=st.integers(2, 50))
@settings(max_examples=60, deadline=None)
def test_normal_equation_identity(seed, m):
    y = np.random.default_rng(seed).standard_normal(50)
    s = RankedSample.from_ranked(y, m)
    est = fit_lse(s, NORMAL50)
    a = NORMAL50.alpha[:m]
    assert abs(math.fsum(a * (s.std_top - est.rho_hat * a))) < 1e-12


@given(seed=st.integers(0, 10_000), rel_shift=st.floats(-100, 100), scale=st.floats(1e-3, 1e3))
@settings(max_examples=100, deadline=None)
def test_affine_equivariance(seed, rel_shift, scale):
    # |shift| <= 100 * scale keeps the rounding of the transformed inputs below 1e-12
    shift = rel_shift * scale
    y = np.random.default_rng(seed).standard_normal(50)
    r1 = fit_lse(RankedSample.from_ranked(y, 20), NORMAL50).rho_hat
    r2 = fit_lse(RankedSample.from_ranked(shift + scale * y, 20), NORMAL50).rho_hat
    assert abs(r1 - r2) <= 1e-12 * max(1.0, abs(r1))


@given(seed=st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_modified_equals_lse_when_fully_ranked(seed):
    y = np.random.default_rng(seed).standard_normal(50)
    s = RankedSample.from_ranked(y)
    assert fit_modified(s, NORMAL50).rho_hat == fit_lse(s, NORMAL50).rho_hat


def test_modified_zero_case(normal50):
    # top block orthogonal to the scores and unranked block at the mean
    a = normal50.alpha[:4]
    q, _ = np.linalg.qr(np.column_stack([np.ones(4), a]))
    d = np.array([1.0, -2.0, 0.5, 3.0])
    d -= q @ (q.T @ d)
    rest = np.where(np.arange(46) % 2 == 0, 1.0, -1.0)
    s = RankedSample(d, rest)
    assert abs(math.fsum(a * (s.y_top - s.mu_hat))) < 1e-14
    assert s.y_rest.mean() == pytest.approx(s.mu_hat, abs=1e-15)
    assert fit_modified(s, normal50).rho_hat == pytest.approx(0.0, abs=1e-14)


# -- variance formulas ---------------------------------------------------------

def test_variance_components_against_double_loop():
    n = 10
    t = uniform_moments_table(n)
    psi1 = psi2 = phi = 0.0
    for i in range(n):
        psi1 += t.alpha[i] ** 2 * t.sigma2[i]
        phi += t.alpha[i] ** 2
        for j in range(n):
            psi2 += t.alpha[i] * t.alpha[j] * t.beta[i, j] ** 2
    got = variance_components(t, 1.0)
    assert got.psi1 == pytest.approx(psi1 / n, abs=1e-12)
    assert got.psi2 == pytest.approx(psi2 / n, abs=1e-12)
    assert got.phi == pytest.approx(phi / n, abs=1e-12)
    p1 = variance_components(t, 1.0, psi2_beta_power=1)
    assert p1.psi2 == pytest.approx(t.alpha @ t.beta @ t.alpha / n, abs=1e-12)


def test_variance_components_zero_scores():
    t = uniform_moments_table(6)
    t.alpha = np.zeros(6)
    assert variance_components(t, 1.0) == VarianceComponents(0.0, 0.0, 0.0)


def test_phi_nondecreasing_in_s():
    t = uniform_moments_table(20)
    phis = [variance_components(t, k / 20).phi for k in range(0, 21)]
    assert all(b >= a for a, b in zip(phis, phis[1:]))


def test_variance_components_need_moments(normal50):
    with pytest.raises(InsufficientTableError):
        variance_components(normal50, 0.2)


def test_asymptotic_variance_algebra():
    c = VarianceComponents(psi1=0.4, psi2=0.3, phi=0.5)
    assert asymptotic_variance(c, 0.0, 1.0) == pytest.approx(0.4 / 0.25)
    first = lambda sy: asymptotic_variance(c, 0.0, sy)
    assert first(2.0) == pytest.approx(first(1.0) / 4)
    assert asymptotic_variance(c, 0.5, 1.0) == pytest.approx((0.4 + 0.25 * 0.3) / 0.25)
    with pytest.raises(DegenerateDesignError):
        asymptotic_variance(VarianceComponents(1, 1, 0), 0.1, 1)


# -- test of rho = 0 -------------------------------------------------------------

def _estimate(rho_hat, phi, n=100):
    return Estimate(rho_hat=rho_hat, s=0.1, n=n, m=10,
                    variance_components=VarianceComponents(0.0, 0.0, phi),
                    asym_var=0.0, std_err=0.0, t_stat=0.0, p_value=1.0, method="lse")


def test_p_value_examples():
    assert test_rho_zero(_estimate(0.0, 0.3)) == 1.0
    z = 1.959964
    phi = 0.25
    rho = z / (math.sqrt(100) * math.sqrt(phi))
    assert test_rho_zero(_estimate(rho, phi)) == pytest.approx(0.05, abs=1e-6)
    two = test_rho_zero(_estimate(rho, phi))
    assert test_rho_zero(_estimate(rho, phi), "greater") == pytest.approx(two / 2)
    with pytest.raises(DomainError):
        test_rho_zero(_estimate(rho, phi), "less")


def test_estimate_json_roundtrip(normal50):
    y = np.random.default_rng(1).standard_normal(50)
    est = fit_lse(RankedSample.from_ranked(y, 10), normal50)
    d = json.loads(est.to_json())
    assert d["rho_hat"] == est.rho_hat
    assert set(d["variance_components"]) == {"psi1", "psi2", "phi"}
    assert d["method"] == "lse"
    assert 0 <= est.p_value <= 1


def test_standard_error_conventions():
    t = build_score_table("normal", 200, 20, moments=True, reps=5000, seed=3)
    y = np.random.default_rng(2).standard_normal(200)
    s = RankedSample.from_ranked(y, 20)
    cond = fit_lse(s, t)
    os_ = fit_lse(s, t, sigma2_convention="order_stat")
    ratio = cond.variance_components.psi1 / os_.variance_components.psi1
    assert ratio > 3  # the conditional reading is far larger than order-statistic variances
    no_beta = fit_lse(s, build_score_table("normal", 200, 20))
    assert math.isnan(no_beta.std_err)
    assert no_beta.p_value == cond.p_value


# -- Monte Carlo properties ----------------------------------------------------

def test_null_variance_matches_inverse_phi():
    n, m = 2000, 100
    a = build_score_table("normal", n, m).alpha
    Y = replicate_responses("normal", n, 0.0, 2000, seed=21)
    mu, sd = Y.mean(axis=1), Y.std(axis=1)
    T = math.sqrt(n) * lse_batch(Y[:, :m], mu, sd, a)
    phi = (a @ a) / n
    assert abs(T.var() * phi - 1) < 0.10


def test_bias_controlled_and_mse_falls_with_n():
    out = {}
    for n, m in [(500, 25), (2000, 100)]:
        a = build_score_table("gamma(3,3)", n, m).alpha
        Y = replicate_responses("gamma(3,3)", n, 0.7, 1000, seed=8)
        e = lse_batch(Y[:, :m], Y.mean(axis=1), Y.std(axis=1), a) - 0.7
        assert abs(e.mean()) < 3 * e.std(ddof=1) / math.sqrt(e.size)
        out[n] = np.mean(e * e)
    assert out[2000] < 0.6 * out[500]


def test_modified_not_more_variable_under_null():
    n, m = 500, 20
    t = build_score_table("normal", n, m)
    Y = replicate_responses("normal", n, 0.0, 2000, seed=5)
    lse = np.empty(len(Y))
    mod = np.empty(len(Y))
    for i, y in enumerate(Y):
        s = RankedSample.from_ranked(y, m)
        lse[i] = fit_lse(s, t).rho_hat
        mod[i] = fit_modified(s, t).rho_hat
    assert mod.var() <= 1.05 * lse.var()


# -- multiple regression -------------------------------------------------------

def test_multiple_without_covariates(normal50):
    y = np.random.default_rng(3).standard_normal(50)
    s = RankedSample.from_ranked(y, 15)
    delta, eta = fit_multiple(s, np.empty((15, 0)), normal50, centering="mu_hat")
    assert eta.size == 0
    assert delta / s.sigma_hat == pytest.approx(fit_lse(s, normal50).rho_hat, rel=1e-12)
    delta_top, _ = fit_multiple(s, np.empty((15, 0)), normal50)
    a = normal50.alpha[:15]
    assert delta_top == pytest.approx(a @ (s.y_top - s.y_top.mean()) / (a @ a), rel=1e-12)


def test_multiple_orthogonal_covariate(normal50):
    rng = np.random.default_rng(4)
    s = RankedSample.from_ranked(rng.standard_normal(50), 15)
    a = normal50.alpha[:15]
    basis = np.column_stack([np.ones(15), a, s.y_top])
    q, _ = np.linalg.qr(basis)
    z = rng.standard_normal(15)
    z -= q @ (q.T @ z)
    _, eta = fit_multiple(s, z[:, None], normal50)
    assert eta[0] == pytest.approx(0.0, abs=1e-12)


def test_multiple_rank_deficiency_names_block(normal50):
    rng = np.random.default_rng(5)
    s = RankedSample.from_ranked(rng.standard_normal(50), 15)
    z = rng.standard_normal(15)
    with pytest.raises(RankDeficiencyError, match="covariate block.*size_copy"):
        fit_multiple(s, np.column_stack([z, 2 * z]), normal50, names=["size", "size_copy"])
    # with all ranks observed the scores are centred, so a covariate equal to them is collinear
    full = RankedSample.from_ranked(rng.standard_normal(50))
    with pytest.raises(RankDeficiencyError, match="cross block"):
        fit_multiple(full, (3 * normal50.alpha + 1)[:, None], normal50)


def test_multiple_recovers_coefficients():
    n, m, reps = 2000, 100, 500
    beta1, eta_true = 0.6, np.array([0.8, -0.5])
    t = build_score_table("normal", n, m)
    rng = np.random.default_rng(9)
    est = np.empty((reps, 3))
    for i in range(reps):
        x = rng.standard_normal(n)
        z = rng.standard_normal((n, 2))
        y = beta1 * x + z @ eta_true + rng.standard_normal(n)
        order = np.argsort(-x)
        s = RankedSample(y[order[:m]], y[order[m:]])
        d, e = fit_multiple(s, z[order[:m]], t, centering="mu_hat")
        est[i] = [d, *e]
    truth = np.r_[beta1, eta_true]
    mc_se = est.std(axis=0, ddof=1) / math.sqrt(reps)
    assert np.all(np.abs(est.mean(axis=0) - truth) < 3 * mc_se)
