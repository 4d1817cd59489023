"""Closed-form CI-width decay, asymptotic variances and UTC definitions.

Everything here is pure arithmetic on scalars: no randomness and no data.
Day counts are exact integers and the UTC ``rho`` is a plain float that is
validated to lie in ``[0, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from ._validation import (
    DomainError,
    check_days,
    check_nonnegative,
    check_nonzero,
    check_rho,
)

__all__ = [
    "VarianceComponents",
    "RatioVarianceComponents",
    "ci_width_ratio",
    "limiting_width_ratio",
    "pre_post_correlation",
    "ci_width_ratio_prepost",
    "prepost_limiting_width_ratio",
    "asymptotic_variance_additive",
    "asymptotic_variance_ratio_metric",
    "utc_additive",
    "utc_ratio_metric",
    "utc_ratio_metric_linearized",
    "prepost_variance",
    "relative_efficiency",
]


@dataclass(frozen=True)
class VarianceComponents:
    """Variance of the persistent user effect and of the daily error.

    Attributes
    ----------
    sigma_a2 : float
        Variance of the user random effect (temporal variance).
    sigma_e2 : float
        Variance of a single day's error term.
    """

    sigma_a2: float
    sigma_e2: float

    def __post_init__(self):
        a = check_nonnegative(self.sigma_a2, "sigma_a2")
        e = check_nonnegative(self.sigma_e2, "sigma_e2")
        if a + e <= 0.0:
            raise DomainError("sigma_a2 + sigma_e2 must be > 0")

    def time_averaged(self, T):
        """Variance of a user's average over ``T`` days, ``sigma_a2 + sigma_e2 / T``."""
        T = check_days(T)
        return self.sigma_a2 + self.sigma_e2 / T


def _check_psd_block(var_n, var_d, cov, label):
    var_n = check_nonnegative(var_n, f"{label} numerator variance")
    var_d = check_nonnegative(var_d, f"{label} denominator variance")
    cov = float(cov)
    det = var_n * var_d - cov * cov
    # tolerate rounding in exactly singular blocks
    if det < -1e-12 * max(1.0, var_n * var_d):
        raise DomainError(f"{label} covariance block is not positive semidefinite")


@dataclass(frozen=True)
class RatioVarianceComponents:
    """Second moments of a numerator/denominator pair in one arm.

    The ``sigma_a*`` entries describe the user random effects, the
    ``sigma_e*`` entries the single-day errors; ``mbar_n`` and ``mbar_d``
    are the superpopulation means of numerator and denominator.
    """

    sigma_a2_n: float
    sigma_a2_d: float
    sigma_a_nd: float
    sigma_e2_n: float
    sigma_e2_d: float
    sigma_e_nd: float
    mbar_n: float
    mbar_d: float

    def __post_init__(self):
        _check_psd_block(self.sigma_a2_n, self.sigma_a2_d, self.sigma_a_nd, "random-effect")
        _check_psd_block(self.sigma_e2_n, self.sigma_e2_d, self.sigma_e_nd, "error")
        check_nonzero(self.mbar_d, "mbar_d")
        check_nonzero(self.mbar_n, "mbar_n")

    def with_means(self, mbar_n, mbar_d):
        return replace(self, mbar_n=mbar_n, mbar_d=mbar_d)

    def time_averaged(self, T):
        """Return ``(var_n, var_d, cov_nd)`` of a user's ``T``-day averages."""
        T = check_days(T)
        return (
            self.sigma_a2_n + self.sigma_e2_n / T,
            self.sigma_a2_d + self.sigma_e2_d / T,
            self.sigma_a_nd + self.sigma_e_nd / T,
        )


def ci_width_ratio(T, rho):
    """Ratio ``|CI(T; N)| / |CI(1; N)|`` of a user experiment of fixed size.

    Parameters
    ----------
    T : int
        Experiment duration in days, ``T >= 1``.
    rho : float
        User-specific temporal correlation in ``[0, 1]``.

    Returns
    -------
    float
        ``sqrt(1/T + rho * (T - 1) / T)``, between ``1/sqrt(T)`` and 1.
    """
    T = check_days(T)
    rho = check_rho(rho)
    return math.sqrt(1.0 / T + rho * (T - 1) / T)


def limiting_width_ratio(rho):
    """Width ratio as ``T`` grows without bound: ``sqrt(rho)``."""
    return math.sqrt(check_rho(rho))


def pre_post_correlation(T, T0, rho):
    """Correlation between a user's ``T0``-day pre-period mean and ``T``-day in-experiment mean.

    Defined as exactly 0 when ``rho == 0`` instead of evaluating the
    expression, which divides by ``rho``.
    """
    T = check_days(T)
    T0 = check_days(T0, "T0")
    rho = check_rho(rho)
    if rho == 0.0:
        return 0.0
    # multiplied through by rho: rho + (1 - rho) rounds to 1, so lambda(1, 1, rho) == rho exactly
    e = 1.0 - rho
    return rho / math.sqrt((rho + e / T0) * (rho + e / T))


def ci_width_ratio_prepost(T, T0, rho):
    """Decay ratio of the pre-post adjusted CI width relative to its own day-1 width.

    ``rho = 1`` is rejected because the day-1 normalizer ``1 - lambda(1)^2``
    is zero.
    """
    T = check_days(T)
    T0 = check_days(T0, "T0")
    rho = check_rho(rho, allow_one=False)
    lam_t = pre_post_correlation(T, T0, rho)
    lam_1 = pre_post_correlation(1, T0, rho)
    return ci_width_ratio(T, rho) * math.sqrt((1.0 - lam_t**2) / (1.0 - lam_1**2))


def prepost_limiting_width_ratio(T0, rho):
    """Limit of :func:`ci_width_ratio_prepost` as ``T`` grows without bound."""
    T0 = check_days(T0, "T0")
    rho = check_rho(rho, allow_one=False)
    if rho == 0.0:
        return 0.0
    lam_inf2 = 1.0 / (1.0 + (1.0 - rho) / (rho * T0))
    lam_1 = pre_post_correlation(1, T0, rho)
    return math.sqrt(rho) * math.sqrt((1.0 - lam_inf2) / (1.0 - lam_1**2))


def asymptotic_variance_additive(theta, sigma, mbar_r, mbar_c, T):
    """Asymptotic variance of ``sqrt(N) * (theta_hat - theta)`` for an additive metric.

    Parameters
    ----------
    theta : float
        Ratio treatment effect.
    sigma : VarianceComponents
        Shared variance components of both arms.
    mbar_r, mbar_c : float
        Treatment and control means averaged over the ``T`` experiment days.
    T : int
        Experiment duration in days.
    """
    mbar_r = check_nonzero(mbar_r, "mbar_r")
    mbar_c = check_nonzero(mbar_c, "mbar_c")
    s2 = sigma.time_averaged(T)
    return (theta + 1.0) ** 2 * s2 * (mbar_r**-2 + mbar_c**-2)


def _ratio_bracket(comps, T):
    var_n, var_d, cov = comps.time_averaged(T)
    mn, md = comps.mbar_n, comps.mbar_d
    return var_n / mn**2 + var_d / md**2 - 2.0 * cov / (mn * md)


def asymptotic_variance_ratio_metric(theta, comps_r, comps_c, T):
    """Delta-method asymptotic variance of the double-ratio estimator.

    ``comps_r`` and ``comps_c`` carry each arm's covariances and means; the
    time-averaged covariances are ``sigma_a + sigma_e / T``.
    """
    T = check_days(T)
    bracket = _ratio_bracket(comps_r, T) + _ratio_bracket(comps_c, T)
    # cancellation in the bracket can leave a tiny negative residue
    return (theta + 1.0) ** 2 * max(bracket, 0.0)


def utc_additive(sigma):
    """UTC of an additive metric, ``sigma_a2 / (sigma_a2 + sigma_e2)``."""
    return sigma.sigma_a2 / (sigma.sigma_a2 + sigma.sigma_e2)


def utc_ratio_metric(comps):
    """UTC of a ratio metric defined through the sum ``a_n + a_d``.

    This is the day-to-day correlation of ``a_n + a_d`` for the same user.
    It coincides with :func:`utc_ratio_metric_linearized` when numerator
    and denominator share a mean and their covariances vanish; in general
    the linearized version is the one that makes the decay formula exact.
    """
    num = comps.sigma_a2_n + comps.sigma_a2_d + 2.0 * comps.sigma_a_nd
    den = num + comps.sigma_e2_n + comps.sigma_e2_d + 2.0 * comps.sigma_e_nd
    if den <= 0.0:
        raise DomainError("total variance of numerator + denominator must be > 0")
    return min(max(num / den, 0.0), 1.0)


def utc_ratio_metric_linearized(comps):
    """UTC of a ratio metric computed on its delta-method linearization.

    Uses ``a_n / mbar_n - a_d / mbar_d``, so that the decay ratio of
    :func:`asymptotic_variance_ratio_metric` (with equal arm means) equals
    ``ci_width_ratio(T, rho) ** 2`` exactly.
    """
    mn, md = comps.mbar_n, comps.mbar_d
    a = comps.sigma_a2_n / mn**2 + comps.sigma_a2_d / md**2 - 2.0 * comps.sigma_a_nd / (mn * md)
    e = comps.sigma_e2_n / mn**2 + comps.sigma_e2_d / md**2 - 2.0 * comps.sigma_e_nd / (mn * md)
    a, e = max(a, 0.0), max(e, 0.0)
    if a + e <= 0.0:
        raise DomainError("linearized ratio metric has zero variance")
    return a / (a + e)


def prepost_variance(theta, sigma2_T, lambda_, mbar_r, mbar_c):
    """Asymptotic variance of the pre-post adjusted estimator.

    Parameters
    ----------
    theta : float
        Ratio treatment effect.
    sigma2_T : float
        Variance of a user's in-experiment average.
    lambda_ : float
        Pre-post correlation; only its square enters.
    mbar_r, mbar_c : float
        Arm means.
    """
    mbar_r = check_nonzero(mbar_r, "mbar_r")
    mbar_c = check_nonzero(mbar_c, "mbar_c")
    sigma2_T = check_nonnegative(sigma2_T, "sigma2_T")
    lam2 = float(lambda_) ** 2
    if lam2 > 1.0:
        raise DomainError(f"|lambda| must be <= 1, got {lambda_!r}")
    bracket = (1.0 - lam2 / 2.0) * (mbar_r**-2 + mbar_c**-2) - lam2 / (mbar_r * mbar_c)
    return sigma2_T * (theta + 1.0) ** 2 * bracket


def relative_efficiency(lambda_):
    """Variance ratio ``V_PP / V`` under the null: ``1 - lambda^2``."""
    lam = float(lambda_)
    if not 0.0 <= lam <= 1.0:
        raise DomainError(f"lambda must lie in [0, 1], got {lambda_!r}")
    return 1.0 - lam * lam
