"""Ratio treatment-effect estimators, their variances and confidence intervals.

The ``_plain_*`` and ``_prepost_*`` kernels operate on user-level time
averages with shape ``(2, N)`` or ``(2, N, K)``; a trailing axis evaluates
many durations at once (the Monte Carlo harness passes cumulative means).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, replace
from statistics import NormalDist
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import DesignError, EstimationError, check_alpha
from .model import CONTROL, TREATMENT, BucketedPanels, MetricPanel, PrePeriodPanel, aggregate_buckets

__all__ = [
    "EffectEstimate",
    "ConfidenceInterval",
    "z_quantile",
    "estimate_theta",
    "estimate_variance_plugin",
    "estimate_variance_jackknife",
    "delete_one_bucket_replicates",
    "jackknife_variance",
    "confidence_interval",
    "estimate_theta_prepost",
    "estimate_theta_prepost_bucketed",
    "check_panel",
    "check_pre",
    "daily_estimates",
    "RatioEffectEstimator",
    "PrePostEstimator",
]


@dataclass(frozen=True)
class EffectEstimate:
    """Point estimate of the ratio effect and, once computed, its variance.

    ``variance_hat`` is already divided by the number of units per arm, so
    ``sqrt(variance_hat)`` is the standard error.
    """

    theta_hat: float
    variance_hat: Optional[float]
    n_per_arm: int
    t_days: int
    method: str = "plain"
    variance_method: Optional[str] = None
    lambda_hat: Optional[float] = None
    fallback: bool = False

    def with_variance(self, variance_hat, variance_method):
        return EffectEstimate(
            self.theta_hat, float(variance_hat), self.n_per_arm, self.t_days,
            self.method, variance_method, self.lambda_hat, self.fallback,
        )

    def to_dict(self, ci=None):
        """JSON-ready mapping, including CI endpoints when ``ci`` is given."""
        return {
            "theta_hat": self.theta_hat,
            "variance_hat": self.variance_hat,
            "ci_lower": None if ci is None else ci.lower,
            "ci_upper": None if ci is None else ci.upper,
            "alpha": None if ci is None else ci.alpha,
            "n_per_arm": self.n_per_arm,
            "t_days": self.t_days,
            "method": self.method,
            "variance_method": self.variance_method,
        }


@dataclass(frozen=True)
class ConfidenceInterval:
    lower: float
    upper: float
    alpha: float

    @property
    def width(self):
        return self.upper - self.lower

    def contains(self, value):
        return self.lower <= value <= self.upper

    def as_dict(self):
        return asdict(self)


def z_quantile(p):
    """Standard normal quantile (stdlib inverse CDF, accurate to ~1e-16)."""
    return NormalDist().inv_cdf(p)


# -- kernels ---------------------------------------------------------------

def _arm_means(u):
    return u.mean(axis=1)


def _pooled_moment(x, y):
    """Within-arm covariance of ``x`` and ``y`` pooled over both arms (ddof=1 per arm)."""
    xc = x - x.mean(axis=1, keepdims=True)
    yc = y - y.mean(axis=1, keepdims=True)
    n = x.shape[1]
    return (xc * yc).sum(axis=1).sum(axis=0) / (2 * (n - 1))


def _plain_additive_from(m, s2, n):
    if np.any(m[CONTROL] == 0.0):
        raise EstimationError("control mean is zero")
    theta = m[TREATMENT] / m[CONTROL] - 1.0
    var = (theta + 1.0) ** 2 * s2 * (m[TREATMENT] ** -2.0 + m[CONTROL] ** -2.0) / n
    return theta, var


def _plain_ratio_from(mn, md, s_n, s_d, s_nd, n):
    if np.any(md == 0.0) or np.any(mn[CONTROL] == 0.0):
        raise EstimationError("zero control numerator or zero denominator average")
    theta = (mn[TREATMENT] / md[TREATMENT]) / (mn[CONTROL] / md[CONTROL]) - 1.0
    bracket = s_n / mn**2 + s_d / md**2 - 2.0 * s_nd / (mn * md)
    var = (theta + 1.0) ** 2 * np.maximum(bracket.sum(axis=0), 0.0) / n
    return theta, var


def _prepost_additive_from(xbar, m_u, s_x2, s_u2, s_xu, n):
    denom = np.sqrt(s_x2 * s_u2)
    lam = np.divide(s_xu, denom, out=np.zeros_like(np.asarray(s_xu, dtype=float)), where=denom > 0)
    beta = s_xu / s_x2
    m = m_u - beta * (xbar - xbar.mean(axis=0))
    if np.any(m[CONTROL] == 0.0):
        raise EstimationError("adjusted control mean is zero")
    theta = m[TREATMENT] / m[CONTROL] - 1.0
    lam2 = lam**2
    bracket = (1.0 - lam2 / 2.0) * (m[TREATMENT] ** -2.0 + m[CONTROL] ** -2.0) - lam2 / (m[TREATMENT] * m[CONTROL])
    var = s_u2 * (theta + 1.0) ** 2 * bracket / n
    return theta, var, lam


def _plain_additive(u):
    return _plain_additive_from(_arm_means(u), _pooled_moment(u, u), u.shape[1])


def _plain_ratio(un, ud):
    return _plain_ratio_from(
        _arm_means(un), _arm_means(ud),
        _pooled_moment(un, un), _pooled_moment(ud, ud), _pooled_moment(un, ud),
        un.shape[1],
    )


def _prepost_additive(x, u):
    """Pre-post estimate from pre-period means ``x`` (2, N) and post means ``u``.

    Returns ``theta, var, lambda`` broadcast over trailing axes of ``u``.
    """
    if u.ndim == 3:
        x = x[:, :, None]
    return _prepost_additive_from(
        _arm_means(x), _arm_means(u),
        _pooled_moment(x, x), _pooled_moment(u, u), _pooled_moment(x, u),
        u.shape[1],
    )


class _DailyMoments:
    """Moments of the users' cumulative averages over days ``1..T``, for every ``T``.

    Built from the pooled within-arm covariance matrix of the daily values:
    the variance of a ``T``-day average is the sum of that matrix's leading
    ``T x T`` block divided by ``T**2``. Equal to centering the cumulative
    averages directly, at the cost of one matrix product.
    """

    def __init__(self, arrays):
        self.n = arrays[0].shape[1]
        T = arrays[0].shape[2]
        self.days = np.arange(1, T + 1)
        daily = [a.mean(axis=1) for a in arrays]
        self.means = [np.cumsum(d, axis=1) / self.days for d in daily]
        self.centered = [a - d[:, None, :] for a, d in zip(arrays, daily)]

    def cross(self, i, j):
        ci, cj = self.centered[i], self.centered[j]
        c = sum(ci[arm].T @ cj[arm] for arm in (TREATMENT, CONTROL)) / (2 * (self.n - 1))
        return np.diag(c.cumsum(axis=0).cumsum(axis=1)) / self.days**2

    def with_pre(self, x, i=0):
        xc = x - x.mean(axis=1, keepdims=True)
        c = sum(xc[arm] @ self.centered[i][arm] for arm in (TREATMENT, CONTROL)) / (2 * (self.n - 1))
        return np.cumsum(c) / self.days


def daily_estimates(panel, pre=None):
    """Plain (and pre-post) estimates using days ``1..T``, for every ``T``.

    Returns a dict of arrays over ``T = 1..t_days``: ``theta`` and
    ``variance`` always, plus ``theta_pp``, ``variance_pp`` and
    ``lambda_pp`` when a pre-period is given. Each entry equals what the
    single-duration estimators return on ``panel.head(T)``.
    """
    panel = check_panel(panel)
    if panel.n_per_arm < 2:
        raise EstimationError("at least 2 users per arm are needed")
    mom = _DailyMoments(panel.arrays())
    n = mom.n
    if panel.is_ratio:
        if pre is not None:
            raise EstimationError("pre-post adjustment is implemented for additive metrics only")
        theta, var = _plain_ratio_from(mom.means[0], mom.means[1], mom.cross(0, 0), mom.cross(1, 1), mom.cross(0, 1), n)
        return {"theta": theta, "variance": var}
    s_u2 = mom.cross(0, 0)
    theta, var = _plain_additive_from(mom.means[0], s_u2, n)
    out = {"theta": theta, "variance": var}
    if pre is not None:
        x = check_pre(pre, panel).pre_mean
        s_x2 = _pooled_moment(x, x)
        if s_x2 <= 0.0:
            raise EstimationError("pre-period has zero variance")
        xbar = _arm_means(x)[:, None]
        theta_pp, var_pp, lam = _prepost_additive_from(xbar, mom.means[0], s_x2, s_u2, mom.with_pre(x), n)
        out.update(theta_pp=theta_pp, variance_pp=var_pp, lambda_pp=lam)
    return out


# -- public estimators -----------------------------------------------------

def check_panel(X):
    """Coerce ``X`` to a :class:`MetricPanel`.

    Accepts a panel, a ``(2, N, T)`` array (additive metric), a pair of such
    arrays (numerator, denominator) or a long-format DataFrame with the CSV
    column names.
    """
    if isinstance(X, MetricPanel):
        return X
    if isinstance(X, tuple) and len(X) == 2:
        return MetricPanel(numerator=X[0], denominator=X[1])
    if hasattr(X, "columns"):
        from .serialization import panel_from_frame

        return panel_from_frame(X)
    return MetricPanel(values=np.asarray(X, dtype=float))


def check_pre(pre, panel=None):
    if not isinstance(pre, PrePeriodPanel):
        pre = PrePeriodPanel(np.asarray(pre, dtype=float))
    if panel is not None:
        if pre.n_per_arm != panel.n_per_arm:
            raise EstimationError(
                f"pre-period covers {pre.n_per_arm} users per arm, panel covers {panel.n_per_arm}"
            )
        if (
            pre.user_ids is not None
            and panel.user_ids is not None
            and not np.array_equal(pre.user_ids, panel.user_ids)
        ):
            raise EstimationError("pre-period and panel cover different users")
    return pre


def _plain(panel):
    if panel.is_ratio:
        un, ud = panel.user_means()
        return _plain_ratio(un, ud)
    return _plain_additive(panel.user_means())


def estimate_theta(panel):
    """Plain estimate ``mean_r / mean_c - 1`` (double ratio for ratio metrics)."""
    panel = check_panel(panel)
    theta, _ = _plain(panel)
    return EffectEstimate(float(theta), None, panel.n_per_arm, panel.t_days)


def estimate_variance_plugin(panel):
    """Delta-method variance of :func:`estimate_theta` with sample moments plugged in.

    The variance of user time averages (and, for ratio metrics, the
    numerator/denominator covariance) is pooled across arms; means stay per
    arm. Returns the variance of ``theta_hat`` itself, i.e. divided by ``N``.
    """
    panel = check_panel(panel)
    if panel.n_per_arm < 2:
        raise EstimationError("at least 2 users per arm are needed")
    _, var = _plain(panel)
    return float(var)


def delete_one_bucket_replicates(panel, Z, seed, statistic=None):
    """Statistic recomputed with each of ``Z`` random user buckets left out.

    Bucket ``k`` of both arms is removed together. ``statistic`` maps
    ``(totals, counts)`` to an array of ``Z`` values, where ``totals`` is a
    tuple with one ``(2, Z)`` array of left-out user-day sums per panel
    array and ``counts`` holds the matching ``(2, Z)`` user counts. The
    default is the plain ratio effect.
    """
    panel = check_panel(panel)
    buckets = aggregate_buckets(panel, None, Z, seed)
    sums = tuple(a.sum(axis=2) for a in buckets.panel.arrays())
    counts = buckets.counts
    loo_totals = tuple(s.sum(axis=1, keepdims=True) - s for s in sums)
    loo_counts = counts.sum(axis=1, keepdims=True) - counts
    if statistic is None:
        statistic = _loo_theta
    return np.asarray(statistic(loo_totals, loo_counts), dtype=float)


def _loo_theta(totals, counts):
    if len(totals) == 2:
        n, d = totals
        return (n[TREATMENT] / d[TREATMENT]) / (n[CONTROL] / d[CONTROL]) - 1.0
    means = totals[0] / counts
    return means[TREATMENT] / means[CONTROL] - 1.0


def jackknife_variance(replicates):
    """Delete-one jackknife variance ``(Z - 1) / Z * sum((r - mean(r))**2)``."""
    r = np.asarray(replicates, dtype=float)
    z = r.size
    if z < 2:
        raise DesignError("the jackknife needs at least 2 replicates")
    return float((z - 1) / z * np.sum((r - r.mean()) ** 2))


def estimate_variance_jackknife(panel, Z, seed):
    """Delete-one-bucket jackknife variance of the plain ratio estimate."""
    return jackknife_variance(delete_one_bucket_replicates(panel, Z, seed))


def confidence_interval(est, alpha=0.05):
    """Two-sided level-``alpha`` normal interval ``theta_hat +/- z * se``."""
    alpha = check_alpha(alpha)
    if est.variance_hat is None:
        raise EstimationError("estimate has no variance; compute one first")
    half = z_quantile(1.0 - alpha / 2.0) * math.sqrt(max(est.variance_hat, 0.0))
    return ConfidenceInterval(est.theta_hat - half, est.theta_hat + half, alpha)


def estimate_theta_prepost(panel, pre):
    """Pre-post adjusted estimate for an additive metric.

    Adjusts each arm mean by the pooled regression of in-experiment user
    averages on pre-period averages, then plugs the estimated pre-post
    correlation into the asymptotic variance. A constant pre-period falls
    back to the plain estimator with ``fallback=True``.
    """
    panel = check_panel(panel)
    if panel.is_ratio:
        raise EstimationError("pre-post adjustment is implemented for additive metrics only")
    pre = check_pre(pre, panel)
    x = pre.pre_mean
    u = panel.user_means()
    if _pooled_moment(x, x) <= 0.0:
        warnings.warn("pre-period has zero variance; using the plain estimator", RuntimeWarning, stacklevel=2)
        theta, var = _plain_additive(u)
        return EffectEstimate(float(theta), float(var), panel.n_per_arm, panel.t_days,
                              "prepost", "plugin", 0.0, True)
    theta, var, lam = _prepost_additive(x, u)
    return EffectEstimate(float(theta), float(var), panel.n_per_arm, panel.t_days,
                          "prepost", "plugin", float(lam))


def estimate_theta_prepost_bucketed(bucketed):
    """Pre-post estimator applied to bucket totals from :func:`aggregate_buckets`."""
    if not isinstance(bucketed, BucketedPanels) or bucketed.pre is None:
        raise EstimationError("expected BucketedPanels with a bucketed pre-period")
    if bucketed.n_buckets < 2:
        raise DesignError("at least 2 buckets per arm are needed")
    est = estimate_theta_prepost(bucketed.panel, bucketed.pre)
    # variance is already per bucket; report the user count per arm
    return replace(est, n_per_arm=int(bucketed.counts[TREATMENT].sum()))


# -- sklearn-style wrappers ------------------------------------------------

class RatioEffectEstimator(BaseEstimator):
    """Plain ratio effect with a plug-in or jackknife confidence interval.

    Parameters
    ----------
    alpha : float
        Significance level of the interval.
    variance_method : {"plugin", "jackknife"}
    n_buckets : int
        Bucket count for the jackknife.
    random_state : int
        Seed of the jackknife bucket assignment.
    """

    def __init__(self, alpha=0.05, variance_method="plugin", n_buckets=100, random_state=0):
        self.alpha = alpha
        self.variance_method = variance_method
        self.n_buckets = n_buckets
        self.random_state = random_state

    def fit(self, X, y=None):
        panel = check_panel(X)
        est = estimate_theta(panel)
        if self.variance_method == "plugin":
            var = estimate_variance_plugin(panel)
        elif self.variance_method == "jackknife":
            var = estimate_variance_jackknife(panel, self.n_buckets, self.random_state)
        else:
            raise ValueError(f"unknown variance_method {self.variance_method!r}")
        self.estimate_ = est.with_variance(var, self.variance_method)
        self.ci_ = confidence_interval(self.estimate_, self.alpha)
        self.theta_ = self.estimate_.theta_hat
        self.variance_ = self.estimate_.variance_hat
        return self

    def summary(self):
        check_is_fitted(self, "estimate_")
        return self.estimate_.to_dict(self.ci_)


class PrePostEstimator(BaseEstimator):
    """Pre-post adjusted ratio effect; ``fit(panel, pre)``.

    With ``n_buckets`` set, users are first summed into random buckets so
    the normal approximation holds for skewed metrics.
    """

    def __init__(self, alpha=0.05, n_buckets=None, random_state=0):
        self.alpha = alpha
        self.n_buckets = n_buckets
        self.random_state = random_state

    def fit(self, X, pre):
        panel = check_panel(X)
        pre = check_pre(pre, panel)
        if self.n_buckets is None:
            est = estimate_theta_prepost(panel, pre)
        else:
            est = estimate_theta_prepost_bucketed(
                aggregate_buckets(panel, pre, self.n_buckets, self.random_state)
            )
        self.estimate_ = est
        self.ci_ = confidence_interval(est, self.alpha)
        self.theta_ = est.theta_hat
        self.variance_ = est.variance_hat
        self.lambda_ = est.lambda_hat
        return self

    def summary(self):
        check_is_fitted(self, "estimate_")
        return self.estimate_.to_dict(self.ci_)
