"""Synthetic panels from the two-component mixed effects model.

A metric value is ``a[u, t, j] = m[t, j] + alpha[u, j] + e[u, t, j]``: a
day/arm fixed effect, a persistent user effect and an independent daily
error. User experiments keep ``alpha`` for every day (and the pre-period);
user-day experiments redraw it every day.

Arrays use the arm axis first with index 0 for treatment and 1 for control.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._validation import DesignError, DomainError, check_days
from .formulas import (
    RatioVarianceComponents,
    VarianceComponents,
    utc_additive,
    utc_ratio_metric_linearized,
)

ARMS = ("treatment", "control")
TREATMENT, CONTROL = 0, 1

ERROR_DISTRIBUTIONS = ("gaussian", "lognormal")
DIVERSIONS = ("user", "user-day")

# log-scale sd of the shifted-lognormal errors; skewness is about 6.2
LOGNORMAL_SHAPE = 1.0
# users per independently seeded random stream
_BLOCK_SIZE = 4096


@dataclass(frozen=True)
class ModelParams:
    """Ground-truth generative parameters.

    Attributes
    ----------
    theta : float
        Ratio treatment effect, ``> -1``.
    daily_means_c : tuple of float
        Control-arm daily means for days ``-T0..-1, 1..T`` in that order.
        A single value is broadcast to every day. Ignored for ratio metrics,
        whose means come from ``ratio_part``.
    sigma : VarianceComponents or None
        Variance components of an additive metric.
    ratio_part : RatioVarianceComponents or None
        Control-arm moments of a numerator/denominator pair. When set, a
        ratio metric is generated and the treatment numerator mean is scaled
        by ``theta + 1``.
    error_distribution : {"gaussian", "lognormal"}
        Distribution of the daily errors (lognormal is shifted to mean 0 and
        scaled to variance ``sigma_e2``).
    """

    theta: float
    daily_means_c: tuple = (100.0,)
    sigma: Optional[VarianceComponents] = None
    ratio_part: Optional[RatioVarianceComponents] = None
    error_distribution: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "daily_means_c", tuple(float(m) for m in np.atleast_1d(self.daily_means_c)))
        if not self.theta > -1.0:
            raise DomainError(f"theta must be > -1, got {self.theta!r}")
        if self.ratio_part is None:
            if self.sigma is None:
                raise DomainError("an additive metric needs variance components `sigma`")
            if not self.daily_means_c or min(self.daily_means_c) <= 0.0:
                raise DomainError("daily means must all be strictly positive")
        elif self.ratio_part.mbar_n <= 0.0 or self.ratio_part.mbar_d <= 0.0:
            raise DomainError("ratio-metric means must be strictly positive")
        if self.error_distribution not in ERROR_DISTRIBUTIONS:
            raise DomainError(f"error_distribution must be one of {ERROR_DISTRIBUTIONS}")
        if self.ratio_part is not None and self.error_distribution != "gaussian":
            raise DomainError("ratio metrics support Gaussian errors only")

    @property
    def is_ratio(self):
        return self.ratio_part is not None

    @property
    def rho(self):
        """Ground-truth UTC of the generated metric."""
        if self.is_ratio:
            return utc_ratio_metric_linearized(self.ratio_part)
        return utc_additive(self.sigma)

    def control_means(self, design):
        """Daily control means as an array of length ``T0 + T``."""
        n_days = design.t0_days + design.t_days
        m = np.asarray(self.daily_means_c, dtype=float)
        if m.size == 1:
            return np.full(n_days, m[0])
        if m.size != n_days:
            raise DesignError(
                f"daily_means_c has {m.size} entries, the design needs T0 + T = {n_days}"
            )
        return m

    def arm_means(self, design):
        """Treatment and control means averaged over the experiment days."""
        if self.is_ratio:
            raise DomainError("arm_means is defined for additive metrics")
        mbar_c = float(self.control_means(design)[design.t0_days:].mean())
        return (1.0 + self.theta) * mbar_c, mbar_c

    def ratio_components(self):
        """Treatment-arm and control-arm moments of a ratio metric."""
        rp = self.ratio_part
        return rp.with_means((1.0 + self.theta) * rp.mbar_n, rp.mbar_d), rp


@dataclass(frozen=True)
class ExperimentDesign:
    n_per_arm: int
    t_days: int
    t0_days: int = 0
    diversion: str = "user"
    buckets: Optional[int] = None

    def __post_init__(self):
        n = check_days(self.n_per_arm, "n_per_arm", minimum=2)
        check_days(self.t_days, "t_days")
        check_days(self.t0_days, "t0_days", minimum=0)
        if self.diversion not in DIVERSIONS:
            raise DesignError(f"diversion must be one of {DIVERSIONS}, got {self.diversion!r}")
        if self.diversion == "user-day" and self.t0_days > 0:
            raise DesignError("a pre-period needs persistent users; use diversion='user'")
        if self.buckets is not None:
            z = check_days(self.buckets, "buckets", minimum=2)
            if z > n:
                raise DesignError(f"buckets ({z}) cannot exceed n_per_arm ({n})")


@dataclass
class MetricPanel:
    """User x day x arm observations of one experiment.

    Either ``values`` (additive metric) or both ``numerator`` and
    ``denominator`` (ratio metric) are set, each of shape ``(2, N, T)``.
    """

    values: Optional[np.ndarray] = None
    numerator: Optional[np.ndarray] = None
    denominator: Optional[np.ndarray] = None
    user_ids: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if self.values is not None:
            if self.numerator is not None or self.denominator is not None:
                raise DomainError("a panel is either additive or ratio, not both")
            self.values = _as_panel_array(self.values, "values")
        else:
            if self.numerator is None or self.denominator is None:
                raise DomainError("a ratio panel needs numerator and denominator")
            self.numerator = _as_panel_array(self.numerator, "numerator")
            self.denominator = _as_panel_array(self.denominator, "denominator")
            if self.numerator.shape != self.denominator.shape:
                raise DomainError("numerator and denominator shapes differ")
        if self.user_ids is not None:
            self.user_ids = _check_user_ids(self.user_ids, self.shape[1])

    @property
    def is_ratio(self):
        return self.values is None

    @property
    def shape(self):
        return (self.numerator if self.is_ratio else self.values).shape

    @property
    def n_per_arm(self):
        return self.shape[1]

    @property
    def t_days(self):
        return self.shape[2]

    def arrays(self):
        return (self.numerator, self.denominator) if self.is_ratio else (self.values,)

    def _map(self, fn, keep_ids=True):
        ids = self.user_ids if keep_ids else None
        if self.is_ratio:
            return MetricPanel(numerator=fn(self.numerator), denominator=fn(self.denominator), user_ids=ids)
        return MetricPanel(values=fn(self.values), user_ids=ids)

    def head(self, T):
        """Panel restricted to the first ``T`` days."""
        T = check_days(T)
        if T > self.t_days:
            raise DomainError(f"panel has only {self.t_days} days")
        return self._map(lambda a: a[:, :, :T])

    def swap_arms(self):
        swapped = self._map(lambda a: a[::-1], keep_ids=False)
        if self.user_ids is not None:
            swapped.user_ids = self.user_ids[::-1]
        return swapped

    def scaled(self, c):
        return self._map(lambda a: a * c)

    def user_means(self):
        """Per-user time averages, shape ``(2, N)`` per array."""
        out = tuple(a.mean(axis=2) for a in self.arrays())
        return out if self.is_ratio else out[0]

    def cumulative_user_means(self):
        """Per-user averages over days ``1..T`` for every ``T``, shape ``(2, N, T)``."""
        days = np.arange(1, self.t_days + 1)
        out = tuple(np.cumsum(a, axis=2) / days for a in self.arrays())
        return out if self.is_ratio else out[0]


@dataclass
class PrePeriodPanel:
    """Per-user pre-period averages ``X``, shape ``(2, N)``."""

    pre_mean: np.ndarray
    t0_days: Optional[int] = None
    user_ids: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        x = np.asarray(self.pre_mean, dtype=float)
        if x.ndim != 2 or x.shape[0] != 2:
            raise DomainError(f"pre_mean must have shape (2, N), got {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError("pre_mean contains non-finite values")
        self.pre_mean = x
        if self.user_ids is not None:
            self.user_ids = _check_user_ids(self.user_ids, x.shape[1])

    @property
    def n_per_arm(self):
        return self.pre_mean.shape[1]

    def swap_arms(self):
        ids = None if self.user_ids is None else self.user_ids[::-1]
        return PrePeriodPanel(self.pre_mean[::-1], self.t0_days, ids)


@dataclass
class BucketedPanels:
    """Bucket totals of a panel (and its pre-period), ``Z`` buckets per arm."""

    panel: MetricPanel
    pre: Optional[PrePeriodPanel]
    counts: np.ndarray
    assignment: np.ndarray = field(repr=False)

    @property
    def n_buckets(self):
        return self.counts.shape[1]


def _check_user_ids(ids, n):
    ids = np.asarray(ids)
    if ids.shape != (2, n):
        raise DomainError(f"user_ids must have shape (2, {n}), got {ids.shape}")
    return ids


def _as_panel_array(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim != 3 or a.shape[0] != 2:
        raise DomainError(f"{name} must have shape (2, N, T), got {a.shape}")
    if a.shape[1] < 1 or a.shape[2] < 1:
        raise DomainError(f"{name} must have at least one user and one day")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite values")
    return a


def weekly_daily_means(t_days, t0_days=0, base=100.0, amplitude=0.1, period=7):
    """Daily means ``base * (1 + amplitude * sin(2 pi t / period))``.

    Days run ``-t0_days..-1`` then ``1..t_days``; there is no day 0.
    """
    days = np.concatenate([np.arange(-t0_days, 0), np.arange(1, t_days + 1)])
    return tuple(base * (1.0 + amplitude * np.sin(2.0 * np.pi * days / period)))


def default_params(t_days=14, t0_days=0):
    """The reference scenario: ``theta = 0.02``, weekly means, ``rho = 0.6``."""
    return ModelParams(
        theta=0.02,
        daily_means_c=weekly_daily_means(t_days, t0_days),
        sigma=VarianceComponents(6.0, 4.0),
    )


def default_ratio_params(theta=0.02):
    """Correlated numerator/denominator scenario used for ratio-metric checks."""
    return ModelParams(
        theta=theta,
        ratio_part=RatioVarianceComponents(
            sigma_a2_n=4.0,
            sigma_a2_d=2.0,
            sigma_a_nd=1.5,
            sigma_e2_n=6.0,
            sigma_e2_d=3.0,
            sigma_e_nd=2.0,
            mbar_n=10.0,
            mbar_d=20.0,
        ),
    )


def _lognormal_errors(z, sigma_e):
    s = LOGNORMAL_SHAPE
    scale = math.sqrt(math.expm1(s * s) * math.exp(s * s))
    return sigma_e * (np.exp(s * z) - math.exp(s * s / 2.0)) / scale


def _factor_2x2(var_n, var_d, cov):
    """Lower-triangular ``L`` with ``L @ L.T`` equal to a PSD 2x2 block."""
    l11 = math.sqrt(var_n)
    l21 = cov / l11 if l11 > 0.0 else 0.0
    l22 = math.sqrt(max(var_d - l21 * l21, 0.0))
    return np.array([[l11, 0.0], [l21, l22]])


def _block_rng(seed, arm, block):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(arm, block))))


def simulate(params, design, seed):
    """Generate one experiment.

    Parameters
    ----------
    params : ModelParams
    design : ExperimentDesign
    seed : int
        Non-negative seed; equal inputs give bit-identical panels.

    Returns
    -------
    panel : MetricPanel
    pre : PrePeriodPanel or None
        Pre-period averages when ``design.t0_days > 0``.
    """
    if params.is_ratio and design.t0_days > 0:
        raise DesignError("pre-period data is supported for additive metrics only")
    seed = int(seed)
    if seed < 0:
        raise DomainError("seed must be non-negative")
    if params.is_ratio:
        return _simulate_ratio(params, design, seed), None
    return _simulate_additive(params, design, seed)


def _simulate_additive(params, design, seed):
    N, T, T0 = design.n_per_arm, design.t_days, design.t0_days
    m_c = params.control_means(design)
    sd_a = math.sqrt(params.sigma.sigma_a2)
    sd_e = math.sqrt(params.sigma.sigma_e2)
    user_day = design.diversion == "user-day"
    lognormal = params.error_distribution == "lognormal"

    values = np.empty((2, N, T))
    pre = np.empty((2, N)) if T0 > 0 else None
    for arm in (TREATMENT, CONTROL):
        means = m_c.copy()
        if arm == TREATMENT:
            # no treatment before day 1
            means[T0:] *= 1.0 + params.theta
        for block, start in enumerate(range(0, N, _BLOCK_SIZE)):
            stop = min(start + _BLOCK_SIZE, N)
            rng = _block_rng(seed, arm, block)
            n = stop - start
            if user_day:
                alpha = sd_a * rng.standard_normal((n, T))
            else:
                alpha = sd_a * rng.standard_normal((n, 1))
            z = rng.standard_normal((n, T0 + T))
            err = _lognormal_errors(z, sd_e) if lognormal else sd_e * z
            a = means + alpha + err
            values[arm, start:stop] = a[:, T0:]
            if pre is not None:
                pre[arm, start:stop] = a[:, :T0].mean(axis=1)
    panel = MetricPanel(values=values)
    return panel, (PrePeriodPanel(pre, T0) if pre is not None else None)


def _simulate_ratio(params, design, seed):
    N, T = design.n_per_arm, design.t_days
    rp = params.ratio_part
    l_a = _factor_2x2(rp.sigma_a2_n, rp.sigma_a2_d, rp.sigma_a_nd)
    l_e = _factor_2x2(rp.sigma_e2_n, rp.sigma_e2_d, rp.sigma_e_nd)
    user_day = design.diversion == "user-day"

    num = np.empty((2, N, T))
    den = np.empty((2, N, T))
    for arm in (TREATMENT, CONTROL):
        m_n = rp.mbar_n * ((1.0 + params.theta) if arm == TREATMENT else 1.0)
        m_d = rp.mbar_d
        for block, start in enumerate(range(0, N, _BLOCK_SIZE)):
            stop = min(start + _BLOCK_SIZE, N)
            rng = _block_rng(seed, arm, block)
            n = stop - start
            za = rng.standard_normal((2, n, T if user_day else 1))
            ze = rng.standard_normal((2, n, T))
            num[arm, start:stop] = m_n + l_a[0, 0] * za[0] + l_e[0, 0] * ze[0]
            den[arm, start:stop] = (m_d + l_a[1, 0] * za[0] + l_a[1, 1] * za[1]
                                    + l_e[1, 0] * ze[0] + l_e[1, 1] * ze[1])
    return MetricPanel(numerator=num, denominator=den)


def aggregate_buckets(panel, pre, Z, seed):
    """Sum users into ``Z`` random buckets per arm.

    Users are assigned by a seeded permutation, so bucket sizes differ by at
    most one and ``Z == N`` puts exactly one user in every bucket. A user's
    bucket is the same on every day and in the pre-period.
    """
    N, T = panel.n_per_arm, panel.t_days
    Z = check_days(Z, "buckets", minimum=1)
    if Z < 2:
        raise DesignError("at least 2 buckets per arm are needed")
    if Z > N:
        raise DesignError(f"buckets ({Z}) cannot exceed n_per_arm ({N})")
    if pre is not None and pre.n_per_arm != N:
        raise DesignError("pre-period and panel cover different user sets")

    assignment = np.empty((2, N), dtype=np.int64)
    counts = np.empty((2, Z))
    for arm in (TREATMENT, CONTROL):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(0xB0C, arm))))
        assignment[arm, rng.permutation(N)] = np.arange(N) % Z
        counts[arm] = np.bincount(assignment[arm], minlength=Z)

    def bucket_sum(a):
        out = np.empty((2, Z, a.shape[2]))
        for arm in (TREATMENT, CONTROL):
            idx = (assignment[arm][:, None] * a.shape[2] + np.arange(a.shape[2])).ravel()
            out[arm] = np.bincount(idx, weights=a[arm].ravel(), minlength=Z * a.shape[2]).reshape(Z, -1)
        return out

    bucketed = panel._map(bucket_sum, keep_ids=False)
    bucketed_pre = None
    if pre is not None:
        bucketed_pre = PrePeriodPanel(bucket_sum(pre.pre_mean[:, :, None])[:, :, 0], pre.t0_days)
    return BucketedPanels(bucketed, bucketed_pre, counts, assignment)
