"""Estimating the user-specific temporal correlation from historical experiments.

Two routes: sample correlations of the same users' values on different days
(needs user-level panels), or inverting the width-decay formula on the
daily CI widths that past experiments reported.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import DomainError, EstimationError, check_days
from .formulas import ci_width_ratio
from .model import MetricPanel

__all__ = [
    "UTCEstimate",
    "WidthSeries",
    "estimate_utc_from_panel",
    "estimate_utc_from_panels",
    "utc_from_width_pair",
    "estimate_utc_from_widths",
    "pool_utc_estimates",
    "UTCEstimator",
]


@dataclass(frozen=True)
class UTCEstimate:
    """Estimated UTC with its provenance.

    ``clamped_fraction`` is the share of raw estimates that fell outside
    ``[0, 1]`` and were clamped (0 or 1 for a single panel estimate).
    """

    rho_hat: float
    method: str
    n_experiments: int = 1
    max_lag: Optional[int] = None
    weight: float = 1.0
    clamped_fraction: float = 0.0

    @property
    def clamped(self):
        return self.clamped_fraction > 0.0

    def to_dict(self):
        return {
            "rho_hat": self.rho_hat,
            "method": self.method,
            "n_experiments": self.n_experiments,
            "max_lag": self.max_lag,
            "clamped_fraction": self.clamped_fraction,
        }


@dataclass(frozen=True)
class WidthSeries:
    """Daily CI widths of one past experiment; must include day 1."""

    days: tuple
    widths: tuple
    experiment_id: str = "0"

    def __post_init__(self):
        days = tuple(check_days(d, "day") for d in self.days)
        widths = tuple(float(w) for w in self.widths)
        if len(days) != len(widths):
            raise DomainError("days and widths differ in length")
        if any(b <= a for a, b in zip(days, days[1:])):
            raise DomainError(f"experiment {self.experiment_id}: days must be strictly increasing")
        if not days or days[0] != 1:
            raise DomainError(f"experiment {self.experiment_id}: a day-1 width is required")
        if any(not (w > 0.0 and math.isfinite(w)) for w in widths):
            raise DomainError(f"experiment {self.experiment_id}: widths must be positive")
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "widths", widths)

    def normalized(self):
        """Widths divided by the day-1 width."""
        return tuple(w / self.widths[0] for w in self.widths)

    def scaled(self, c):
        return WidthSeries(self.days, tuple(w * c for w in self.widths), self.experiment_id)


def _clamp(x):
    return min(max(x, 0.0), 1.0)


def _linearized_ratio_values(panel):
    # a_n / mbar_n - a_d / mbar_d with per-arm means: the delta-method linearization
    mn = panel.numerator.mean(axis=(1, 2), keepdims=True)
    md = panel.denominator.mean(axis=(1, 2), keepdims=True)
    return panel.numerator / mn - panel.denominator / md


def estimate_utc_from_panel(panel, max_lag=None):
    """Average pairwise day-to-day correlation of the same users' values.

    Values are centered per arm and day, then correlations across all
    ``2N`` users are computed for every pair ``t < t'`` with
    ``t' - t <= max_lag`` (all pairs when ``max_lag`` is None). Days without
    cross-user variance are skipped. Ratio metrics use their linearized
    per-user value.
    """
    if not isinstance(panel, MetricPanel):
        raise TypeError("expected a MetricPanel")
    if panel.t_days < 2:
        raise EstimationError("at least 2 days are needed")
    if panel.n_per_arm < 3:
        raise EstimationError("at least 3 users per arm are needed")
    if max_lag is not None:
        max_lag = check_days(max_lag, "max_lag")

    a = _linearized_ratio_values(panel) if panel.is_ratio else panel.values
    centered = (a - a.mean(axis=1, keepdims=True)).reshape(-1, panel.t_days)
    cov = centered.T @ centered
    var = np.diag(cov).copy()
    # rounding can leave ~1e-30 on constant days
    scale = max(float(var.max()), 1e-300)
    ok = var > 1e-12 * scale

    t = panel.t_days
    i, j = np.triu_indices(t, k=1)
    keep = ok[i] & ok[j]
    if max_lag is not None:
        keep &= (j - i) <= max_lag
    if not keep.any():
        raise EstimationError("no admissible day pairs with nonzero variance")
    i, j = i[keep], j[keep]
    corr = cov[i, j] / np.sqrt(var[i] * var[j])
    raw = math.fsum(corr.tolist()) / corr.size
    rho = _clamp(raw)
    return UTCEstimate(
        rho_hat=rho,
        method="panel",
        n_experiments=1,
        max_lag=max_lag,
        weight=float(2 * panel.n_per_arm),
        clamped_fraction=float(rho != raw),
    )


def estimate_utc_from_panels(panels, max_lag=None, weighted=True):
    """Per-experiment panel estimates pooled, by default weighted by sample size."""
    estimates = [estimate_utc_from_panel(p, max_lag) for p in panels]
    weights = [e.weight for e in estimates] if weighted else None
    return pool_utc_estimates(estimates, weights)


def utc_from_width_pair(t1, w1, t2, w2):
    """Solve the decay formula for ``rho`` given CI widths on two days.

    Returns the unclamped solution, or NaN when the two widths carry no
    information about ``rho`` (vanishing denominator).
    """
    t1 = check_days(t1, "t1")
    t2 = check_days(t2, "t2")
    if t1 == t2:
        raise DomainError("the two days must differ")
    if t1 > t2:
        t1, w1, t2, w2 = t2, w2, t1, w1
    if not (w1 > 0.0 and w2 > 0.0):
        raise DomainError("widths must be positive")
    r2 = (w2 / w1) ** 2
    denom = r2 * (t1 - 1) / t1 - (t2 - 1) / t2
    if abs(denom) < 1e-14:
        return math.nan
    return (1.0 / t2 - r2 / t1) / denom


def estimate_utc_from_widths(series):
    """Mean of clamped pair estimates within each experiment, then across experiments."""
    series = list(series)
    per_experiment = []
    n_pairs = n_clamped = 0
    for s in series:
        if len(s.days) < 2:
            continue
        vals = []
        for a in range(len(s.days)):
            for b in range(a + 1, len(s.days)):
                raw = utc_from_width_pair(s.days[a], s.widths[a], s.days[b], s.widths[b])
                if math.isnan(raw):
                    continue
                rho = _clamp(raw)
                n_clamped += rho != raw
                vals.append(rho)
        if vals:
            n_pairs += len(vals)
            per_experiment.append(math.fsum(vals) / len(vals))
    if not per_experiment:
        raise EstimationError("no valid day pairs in any width series")
    return UTCEstimate(
        rho_hat=_clamp(math.fsum(per_experiment) / len(per_experiment)),
        method="widths",
        n_experiments=len(per_experiment),
        weight=float(len(per_experiment)),
        clamped_fraction=n_clamped / n_pairs,
    )


def pool_utc_estimates(estimates, weights=None):
    """Weighted mean of UTC estimates, clamped to ``[0, 1]``."""
    estimates = list(estimates)
    if not estimates:
        raise EstimationError("nothing to pool")
    if weights is None:
        w = [1.0] * len(estimates)
    else:
        w = [float(x) for x in weights]
        if len(w) != len(estimates) or any(not x > 0.0 for x in w):
            raise DomainError("weights must be positive and match the estimates")
    total = math.fsum(w)
    rho = math.fsum(x * e.rho_hat for x, e in zip(w, estimates)) / total
    methods = {e.method for e in estimates}
    lags = {e.max_lag for e in estimates}
    return UTCEstimate(
        rho_hat=_clamp(rho),
        method=methods.pop() if len(methods) == 1 else "pooled",
        n_experiments=sum(e.n_experiments for e in estimates),
        max_lag=lags.pop() if len(lags) == 1 else None,
        weight=total,
        clamped_fraction=math.fsum(x * e.clamped_fraction for x, e in zip(w, estimates)) / total,
    )


class UTCEstimator(BaseEstimator):
    """Fit the UTC on historical experiments and predict normalized CI widths.

    Parameters
    ----------
    method : {"panel", "widths"}
        ``fit`` takes a sequence of :class:`MetricPanel` or of
        :class:`WidthSeries` accordingly.
    max_lag : int or None
        Largest day lag used by the panel method.
    weighted : bool
        Weight panel estimates by their sample sizes when pooling.
    """

    def __init__(self, method="panel", max_lag=None, weighted=True):
        self.method = method
        self.max_lag = max_lag
        self.weighted = weighted

    def fit(self, X, y=None):
        if isinstance(X, (MetricPanel, WidthSeries)):
            X = [X]
        if self.method == "panel":
            est = estimate_utc_from_panels(X, self.max_lag, self.weighted)
        elif self.method == "widths":
            est = estimate_utc_from_widths(X)
        else:
            raise ValueError(f"unknown method {self.method!r}")
        self.estimate_ = est
        self.rho_ = est.rho_hat
        return self

    def predict(self, T):
        """Predicted ``|CI(T)| / |CI(1)|`` for each duration in ``T``."""
        check_is_fitted(self, "rho_")
        days = np.atleast_1d(T)
        return np.array([ci_width_ratio(int(t), self.rho_) for t in days])
