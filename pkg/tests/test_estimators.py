import math
import warnings

import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cidecay._validation import DesignError, EstimationError
from cidecay.estimators import (
    ConfidenceInterval,
    EffectEstimate,
    PrePostEstimator,
    RatioEffectEstimator,
    check_panel,
    confidence_interval,
    daily_estimates,
    delete_one_bucket_replicates,
    estimate_theta,
    estimate_theta_prepost,
    estimate_theta_prepost_bucketed,
    estimate_variance_jackknife,
    estimate_variance_plugin,
    jackknife_variance,
    z_quantile,
)
from cidecay.formulas import VarianceComponents, asymptotic_variance_additive
from cidecay.model import (
    ExperimentDesign,
    MetricPanel,
    ModelParams,
    PrePeriodPanel,
    aggregate_buckets,
    default_ratio_params,
    simulate,
)
from cidecay.serialization import panel_to_frame


def params(a2=6.0, e2=4.0, theta=0.0, **kw):
    return ModelParams(theta=theta, sigma=VarianceComponents(a2, e2), **kw)


@pytest.fixture(scope="module")
def panel_pre():
    return simulate(params(theta=0.02), ExperimentDesign(2000, 5, 4), 11)


@pytest.fixture(scope="module")
def ratio_panel():
    return simulate(default_ratio_params(), ExperimentDesign(2000, 4), 12)[0]


# -- point estimates -------------------------------------------------------

def test_theta_exact_lift():
    rng = np.random.default_rng(0)
    c = rng.uniform(1.0, 2.0, size=(50, 3))
    panel = MetricPanel(values=np.stack([1.1 * c, c]))
    assert estimate_theta(panel).theta_hat == pytest.approx(0.1, rel=1e-13)
    same = MetricPanel(values=np.stack([c, c]))
    assert estimate_theta(same).theta_hat == 0.0


def test_theta_on_simulated_data():
    panel, _ = simulate(params(theta=0.02), ExperimentDesign(100_000, 7), 1)
    est = estimate_theta(panel)
    assert abs(est.theta_hat - 0.02) < 4 * math.sqrt(estimate_variance_plugin(panel))


def test_ratio_theta_double_ratio():
    num = np.array([[[2.0, 4.0]], [[1.0, 1.0]]])
    den = np.array([[[1.0, 1.0]], [[2.0, 2.0]]])
    panel = MetricPanel(numerator=np.repeat(num, 3, axis=1), denominator=np.repeat(den, 3, axis=1))
    # (3 / 1) / (1 / 2) - 1
    assert estimate_theta(panel).theta_hat == pytest.approx(5.0)


def test_zero_control_mean_is_error():
    v = np.ones((2, 4, 2))
    v[1] = 0.0
    with pytest.raises(EstimationError):
        estimate_theta(MetricPanel(values=v))
    with pytest.raises(EstimationError):
        estimate_theta(MetricPanel(numerator=np.ones((2, 4, 2)), denominator=np.zeros((2, 4, 2))))


# -- plug-in variance ------------------------------------------------------

def test_plugin_constant_panel_is_zero():
    assert estimate_variance_plugin(MetricPanel(values=np.full((2, 10, 3), 4.0))) == 0.0


def test_plugin_direct_substitution():
    rng = np.random.default_rng(1)
    u = rng.normal(0.0, 1.0, size=(40, 1))
    u = u - u.mean() + 5.0  # arm mean exactly 5
    values = np.stack([u, u[::-1]])
    s2 = np.var(u, ddof=1)
    expected = 2 * s2 / (40 * 25.0)
    assert estimate_variance_plugin(MetricPanel(values=values)) == pytest.approx(expected, rel=1e-12)


def test_plugin_pools_within_arm_variances():
    rng = np.random.default_rng(2)
    u = rng.normal(10.0, 1.0, size=(2, 30))
    m = u.mean(axis=1)
    s2 = (np.var(u[0], ddof=1) + np.var(u[1], ddof=1)) / 2
    theta = m[0] / m[1] - 1
    expected = (theta + 1) ** 2 * s2 * (m[0] ** -2 + m[1] ** -2) / 30
    assert estimate_variance_plugin(MetricPanel(values=u[:, :, None])) == pytest.approx(expected, rel=1e-12)


def test_plugin_ratio_matches_linearization(ratio_panel):
    un, ud = ratio_panel.user_means()
    mn, md = un.mean(axis=1), ud.mean(axis=1)
    theta = (mn[0] / md[0]) / (mn[1] / md[1]) - 1
    total = 0.0
    for j in (0, 1):
        lin = un[j] / mn[j] - ud[j] / md[j]
        total += lin.var(ddof=1)
    # pooled moments differ from per-arm ones only through the arm means
    s_n = (np.var(un[0], ddof=1) + np.var(un[1], ddof=1)) / 2
    s_d = (np.var(ud[0], ddof=1) + np.var(ud[1], ddof=1)) / 2
    s_nd = (np.cov(un[0], ud[0])[0, 1] + np.cov(un[1], ud[1])[0, 1]) / 2
    bracket = sum(s_n / mn[j] ** 2 + s_d / md[j] ** 2 - 2 * s_nd / (mn[j] * md[j]) for j in (0, 1))
    N = un.shape[1]
    got = estimate_variance_plugin(ratio_panel)
    assert got == pytest.approx((theta + 1) ** 2 * bracket / N, rel=1e-12)
    assert got == pytest.approx((theta + 1) ** 2 * total / N, rel=0.05)


# -- jackknife -------------------------------------------------------------

def test_jackknife_matches_brute_force(panel_pre):
    panel, _ = panel_pre
    Z, seed = 10, 3
    assign = aggregate_buckets(panel, None, Z, seed).assignment
    reps = []
    for k in range(Z):
        keep = [assign[j] != k for j in (0, 1)]
        n = min(keep[0].sum(), keep[1].sum())
        # equal bucket sizes here, so both arms keep the same count
        v = np.stack([panel.values[j][keep[j]][:n] for j in (0, 1)])
        reps.append(estimate_theta(MetricPanel(values=v)).theta_hat)
    got = delete_one_bucket_replicates(panel, Z, seed)
    assert np.allclose(got, reps, rtol=0, atol=1e-13)
    assert estimate_variance_jackknife(panel, Z, seed) == pytest.approx(jackknife_variance(reps), rel=1e-9)


def test_jackknife_linear_statistic_identity():
    rng = np.random.default_rng(4)
    Z, per = 10, 7
    values = rng.normal(3.0, 1.0, size=(2, Z * per, 1))
    panel = MetricPanel(values=values)
    b = aggregate_buckets(panel, None, Z, 0)

    def diff(totals, counts):
        means = totals[0] / counts
        return means[0] - means[1]

    reps = delete_one_bucket_replicates(panel, Z, 0, statistic=diff)
    bucket_means = b.panel.values[:, :, 0] / b.counts
    d = bucket_means[0] - bucket_means[1]
    assert jackknife_variance(reps) == pytest.approx(np.var(d, ddof=1) / Z, rel=1e-12)


def test_jackknife_invariant_panel_zero():
    v = np.full((2, 50, 2), 3.0)
    assert estimate_variance_jackknife(MetricPanel(values=v), 10, 0) == pytest.approx(0.0, abs=1e-30)


def test_jackknife_errors():
    with pytest.raises(DesignError):
        estimate_variance_jackknife(MetricPanel(values=np.ones((2, 5, 1))), 6, 0)
    with pytest.raises(DesignError):
        jackknife_variance([1.0])


def test_jackknife_ratio_metric_close_to_plugin(ratio_panel):
    jk = estimate_variance_jackknife(ratio_panel, 50, 1)
    pl = estimate_variance_plugin(ratio_panel)
    assert 0.6 < jk / pl < 1.4


def test_jackknife_to_plugin_ratio_monte_carlo():
    p = params(theta=0.02, daily_means_c=(100.0,))
    ratios = []
    for r in range(200):
        panel, _ = simulate(p, ExperimentDesign(5000, 3), 1000 + r)
        ratios.append(estimate_variance_jackknife(panel, 100, r) / estimate_variance_plugin(panel))
    assert 0.9 <= np.mean(ratios) <= 1.1


# -- intervals -------------------------------------------------------------

def test_z_quantile():
    assert z_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-12)
    assert z_quantile(0.5) == 0.0
    assert z_quantile(0.025) == pytest.approx(-z_quantile(0.975), rel=1e-15)


def test_confidence_interval_examples():
    est = EffectEstimate(0.1, 0.0, 10, 1)
    ci = confidence_interval(est)
    assert ci.lower == ci.upper == 0.1
    ci = confidence_interval(EffectEstimate(0.0, 1.0, 10, 1), 0.05)
    assert ci.width == pytest.approx(2 * 1.959964, abs=1e-5)
    assert ci.contains(0.0) and not ci.contains(2.0)
    with pytest.raises(EstimationError):
        confidence_interval(EffectEstimate(0.0, None, 10, 1))
    with pytest.raises(ValueError):
        confidence_interval(EffectEstimate(0.0, 1.0, 10, 1), 1.5)


@given(st.floats(0.001, 0.5), st.floats(1e-8, 10.0))
def test_ci_width_form(alpha, var):
    ci = confidence_interval(EffectEstimate(0.3, var, 10, 1), alpha)
    assert ci.width == pytest.approx(2 * z_quantile(1 - alpha / 2) * math.sqrt(var), rel=1e-12)


# -- invariances -----------------------------------------------------------

@given(st.floats(0.01, 1e4))
def test_scale_invariance(c):
    panel, pre = simulate(params(theta=0.05), ExperimentDesign(200, 3, 2), 3)
    base, scaled = estimate_theta(panel), estimate_theta(panel.scaled(c))
    assert scaled.theta_hat == pytest.approx(base.theta_hat, rel=1e-9, abs=1e-12)
    assert estimate_variance_plugin(panel.scaled(c)) == pytest.approx(estimate_variance_plugin(panel), rel=1e-9)
    pp = estimate_theta_prepost(panel, pre)
    pps = estimate_theta_prepost(panel.scaled(c), PrePeriodPanel(pre.pre_mean * c))
    assert pps.theta_hat == pytest.approx(pp.theta_hat, rel=1e-9, abs=1e-12)
    assert pps.variance_hat == pytest.approx(pp.variance_hat, rel=1e-9)


def test_arm_exchange(panel_pre, ratio_panel):
    panel, pre = panel_pre
    for p in (panel, ratio_panel):
        t = estimate_theta(p).theta_hat
        assert estimate_theta(p.swap_arms()).theta_hat == pytest.approx(1 / (1 + t) - 1, rel=1e-12)
    t = estimate_theta_prepost(panel, pre).theta_hat
    assert estimate_theta_prepost(panel.swap_arms(), pre.swap_arms()).theta_hat == pytest.approx(1 / (1 + t) - 1, rel=1e-12)


# -- pre-post --------------------------------------------------------------

def test_prepost_perfect_correlation_full_adjustment():
    rng = np.random.default_rng(5)
    u = rng.normal(10.0, 2.0, size=(2, 100))
    panel = MetricPanel(values=u[:, :, None])
    est = estimate_theta_prepost(panel, PrePeriodPanel(u.copy()))
    xbar = u.mean(axis=1)
    m = xbar - (xbar - xbar.mean())
    assert est.lambda_hat == pytest.approx(1.0, rel=1e-12)
    assert est.theta_hat == pytest.approx(m[0] / m[1] - 1, abs=1e-12)
    assert est.variance_hat == pytest.approx(0.0, abs=1e-15)


def test_prepost_independent_pre_matches_plain():
    panel, pre = simulate(params(0.0, 10.0, theta=0.02), ExperimentDesign(100_000, 3, 3), 6)
    pp = estimate_theta_prepost(panel, pre)
    plain = estimate_theta(panel).with_variance(estimate_variance_plugin(panel), "plugin")
    assert abs(pp.lambda_hat) < 0.02
    assert abs(pp.theta_hat - plain.theta_hat) < 4 * math.sqrt(pp.variance_hat + plain.variance_hat)


def test_prepost_constant_pre_falls_back():
    panel, _ = simulate(params(), ExperimentDesign(100, 3), 1)
    with pytest.warns(RuntimeWarning, match="zero variance"):
        est = estimate_theta_prepost(panel, PrePeriodPanel(np.full((2, 100), 7.0)))
    assert est.fallback
    assert est.theta_hat == estimate_theta(panel).theta_hat
    assert est.variance_hat == pytest.approx(estimate_variance_plugin(panel), rel=1e-12)


def test_prepost_mismatched_users():
    panel, pre = simulate(params(), ExperimentDesign(100, 3, 2), 1)
    with pytest.raises(EstimationError):
        estimate_theta_prepost(panel, PrePeriodPanel(pre.pre_mean[:, :50]))
    ids = np.tile(np.arange(100), (2, 1))
    p1 = MetricPanel(values=panel.values, user_ids=ids)
    p2 = PrePeriodPanel(pre.pre_mean, user_ids=ids + 1)
    with pytest.raises(EstimationError, match="different users"):
        estimate_theta_prepost(p1, p2)
    with pytest.raises(EstimationError):
        estimate_theta_prepost(simulate(default_ratio_params(), ExperimentDesign(10, 2), 0)[0], pre)


def test_prepost_bucketed_equals_user_level_when_z_is_n(panel_pre):
    panel, pre = panel_pre
    user = estimate_theta_prepost(panel, pre)
    b = estimate_theta_prepost_bucketed(aggregate_buckets(panel, pre, panel.n_per_arm, 9))
    assert b.theta_hat == pytest.approx(user.theta_hat, rel=1e-10, abs=1e-13)
    assert b.variance_hat == pytest.approx(user.variance_hat, rel=1e-10)
    assert b.n_per_arm == panel.n_per_arm


def test_prepost_bucket_scale_invariance(panel_pre):
    panel, pre = panel_pre
    b = aggregate_buckets(panel, pre, 20, 1)
    base = estimate_theta_prepost_bucketed(b)
    c = 3.7
    scaled = type(b)(b.panel.scaled(c), PrePeriodPanel(b.pre.pre_mean * c), b.counts, b.assignment)
    assert estimate_theta_prepost_bucketed(scaled).theta_hat == pytest.approx(base.theta_hat, rel=1e-10)


def test_prepost_bucketed_errors(panel_pre):
    panel, pre = panel_pre
    with pytest.raises(EstimationError):
        estimate_theta_prepost_bucketed(aggregate_buckets(panel, None, 10, 0))


# -- per-day estimates -----------------------------------------------------

def test_daily_estimates_match_head(panel_pre, ratio_panel):
    panel, pre = panel_pre
    d = daily_estimates(panel, pre)
    for T in range(1, panel.t_days + 1):
        head = panel.head(T)
        assert d["theta"][T - 1] == pytest.approx(estimate_theta(head).theta_hat, rel=1e-10, abs=1e-14)
        assert d["variance"][T - 1] == pytest.approx(estimate_variance_plugin(head), rel=1e-10)
        pp = estimate_theta_prepost(head, pre)
        assert d["theta_pp"][T - 1] == pytest.approx(pp.theta_hat, rel=1e-10, abs=1e-14)
        assert d["variance_pp"][T - 1] == pytest.approx(pp.variance_hat, rel=1e-10)
        assert d["lambda_pp"][T - 1] == pytest.approx(pp.lambda_hat, rel=1e-10)
    d = daily_estimates(ratio_panel)
    for T in (1, 4):
        assert d["variance"][T - 1] == pytest.approx(estimate_variance_plugin(ratio_panel.head(T)), rel=1e-10)


# -- input coercion --------------------------------------------------------

def test_check_panel_inputs(panel_pre, ratio_panel):
    panel, _ = panel_pre
    assert check_panel(panel) is panel
    assert np.array_equal(check_panel(panel.values).values, panel.values)
    r = check_panel((ratio_panel.numerator, ratio_panel.denominator))
    assert r.is_ratio
    small = panel.head(2)
    small = MetricPanel(values=small.values[:, :5])
    back = check_panel(panel_to_frame(small))
    assert np.allclose(back.values, small.values)


# -- sklearn-style wrappers ------------------------------------------------

def test_ratio_estimator_api(ratio_panel):
    est = RatioEffectEstimator(alpha=0.1)
    assert est.get_params()["alpha"] == 0.1
    assert clone(est).get_params() == est.get_params()
    with pytest.raises(NotFittedError):
        est.summary()
    assert est.fit(ratio_panel) is est
    s = est.summary()
    assert set(s) == {"theta_hat", "variance_hat", "ci_lower", "ci_upper", "alpha",
                      "n_per_arm", "t_days", "method", "variance_method"}
    assert s["ci_lower"] < est.theta_ < s["ci_upper"]
    jk = RatioEffectEstimator(variance_method="jackknife", n_buckets=20).fit(ratio_panel)
    assert jk.theta_ == est.theta_ and jk.variance_ != est.variance_
    with pytest.raises(ValueError):
        RatioEffectEstimator(variance_method="bootstrap").fit(ratio_panel)


def test_prepost_estimator_api(panel_pre):
    panel, pre = panel_pre
    est = PrePostEstimator().fit(panel, pre)
    direct = estimate_theta_prepost(panel, pre)
    assert est.theta_ == direct.theta_hat and est.variance_ == direct.variance_hat
    assert est.summary()["method"] == "prepost"
    bucketed = PrePostEstimator(n_buckets=50, random_state=1).fit(panel, pre.pre_mean)
    assert bucketed.estimate_.n_per_arm == panel.n_per_arm
    assert clone(bucketed).get_params()["n_buckets"] == 50
