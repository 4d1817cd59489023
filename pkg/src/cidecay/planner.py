"""Duration, size and diversion-type planning from a UTC estimate."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

from ._validation import DomainError, check_days, check_positive, check_rho
from .formulas import (
    ci_width_ratio,
    ci_width_ratio_prepost,
    limiting_width_ratio,
    pre_post_correlation,
    prepost_limiting_width_ratio,
)

__all__ = [
    "PlanQuery",
    "DurationPlan",
    "DesignComparison",
    "required_duration",
    "required_size_multiplier",
    "compare_designs",
    "power_curve",
]


@dataclass(frozen=True)
class PlanQuery:
    """A planning question.

    ``day1_width`` is the day-1 CI width at the contemplated size; with a
    pre-period (``t0 > 0``) it is the day-1 width of the pre-post interval.
    """

    rho: float
    day1_width: float
    target_width: float
    t0: int = 0
    max_t: int = 365

    def __post_init__(self):
        check_rho(self.rho)
        check_positive(self.day1_width, "day1_width")
        check_positive(self.target_width, "target_width")
        check_days(self.t0, "t0", minimum=0)
        check_days(self.max_t, "max_t")
        if self.t0 > 0 and self.rho == 1.0:
            raise DomainError("rho = 1 is degenerate for pre-post planning")

    def decay(self, T):
        if self.t0 > 0:
            return ci_width_ratio_prepost(T, self.t0, self.rho)
        return ci_width_ratio(T, self.rho)

    def floor_ratio(self):
        if self.t0 > 0:
            return prepost_limiting_width_ratio(self.t0, self.rho)
        return limiting_width_ratio(self.rho)


@dataclass(frozen=True)
class DurationPlan:
    """Outcome of :func:`required_duration`.

    ``t_days`` is None when the target cannot be met; ``reason`` is then
    ``"floor"`` (below the limiting width for any duration) or ``"horizon"``
    (reachable, but only after ``max_t``). ``floor_width`` is the width
    approached as the duration grows.
    """

    t_days: Optional[int]
    floor_width: float
    reason: Optional[str] = None

    @property
    def feasible(self):
        return self.t_days is not None


def required_duration(query):
    """Smallest whole number of days whose predicted width meets the target."""
    q = query
    floor_width = q.day1_width * q.floor_ratio()
    if q.target_width >= q.day1_width:
        return DurationPlan(1, floor_width)
    if q.target_width <= floor_width:
        return DurationPlan(None, floor_width, "floor")

    def ok(T):
        return q.day1_width * q.decay(T) <= q.target_width

    if q.t0 == 0:
        # closed form: rho + (1 - rho) / T <= r^2
        r2 = (q.target_width / q.day1_width) ** 2
        guess = max(1, math.ceil((1.0 - q.rho) / (r2 - q.rho) - 1e-9))
        if guess > q.max_t and not ok(q.max_t):
            return DurationPlan(None, floor_width, "horizon")
        T = min(guess, q.max_t)
        while not ok(T):
            T += 1
        while T > 1 and ok(T - 1):
            T -= 1
    else:
        if not ok(q.max_t):
            return DurationPlan(None, floor_width, "horizon")
        lo, hi = 1, q.max_t
        while lo < hi:
            mid = (lo + hi) // 2
            if ok(mid):
                hi = mid
            else:
                lo = mid + 1
        T = lo
    if T > q.max_t:
        return DurationPlan(None, floor_width, "horizon")
    return DurationPlan(T, floor_width)


def required_size_multiplier(current_width, target_width):
    """Factor by which ``N`` must grow at fixed duration: ``(current / target)**2``."""
    current_width = check_positive(current_width, "current_width")
    target_width = check_positive(target_width, "target_width")
    return (current_width / target_width) ** 2


@dataclass(frozen=True)
class DesignComparison:
    """Standard errors of three designs relative to the day-1 plain user SE.

    ``se_user_prepost`` is None when ``rho = 1``. ``crossover_t`` is the
    first day on which the user-day design is strictly more precise than
    the user design with pre-post adjustment.
    """

    t: tuple
    se_user_plain: tuple
    se_user_prepost: Optional[tuple]
    se_userday: tuple
    crossover_t: Optional[int]
    rho: float
    t0: int

    @property
    def equivalent(self):
        """True when user and user-day designs coincide (``rho = 0``)."""
        return self.rho == 0.0

    def rows(self):
        pp = self.se_user_prepost or (None,) * len(self.t)
        return list(zip(self.t, self.se_user_plain, pp, self.se_userday))

    def to_dict(self):
        return {"rho": self.rho, "t0": self.t0, "max_t": self.t[-1], "crossover_t": self.crossover_t}


def _crossover(t, prepost, userday):
    for day, pp, ud in zip(t, prepost, userday):
        if ud < pp:
            return day
    return None


def compare_designs(rho, t0, max_t):
    """User plain vs user with pre-post adjustment vs user-day, for ``T = 1..max_t``."""
    rho = check_rho(rho)
    t0 = check_days(t0, "t0")
    max_t = check_days(max_t, "max_t")
    t = tuple(range(1, max_t + 1))
    plain = tuple(ci_width_ratio(T, rho) for T in t)
    userday = tuple(ci_width_ratio(T, 0.0) for T in t)
    if rho == 1.0:
        return DesignComparison(t, plain, None, userday, None, rho, t0)
    prepost = tuple(
        p * math.sqrt(1.0 - pre_post_correlation(T, t0, rho) ** 2) for T, p in zip(t, plain)
    )
    return DesignComparison(t, plain, prepost, userday, _crossover(t, prepost, userday), rho, t0)


def power_curve(query):
    """Predicted CI width for every duration ``1..max_t``, as ``(T, width)`` rows."""
    return [(T, query.day1_width * query.decay(T)) for T in range(1, query.max_t + 1)]
