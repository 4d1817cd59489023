"""Input validation helpers shared across modules."""

from __future__ import annotations

import math
import operator


class DomainError(ValueError):
    """A numeric argument lies outside the domain of a formula."""


class DesignError(ValueError):
    """An experiment design is inconsistent (bucket counts, diversion, ...)."""


class EstimationError(ValueError):
    """A statistic cannot be computed from the supplied data."""


def check_days(value, name="T", minimum=1):
    """Return ``value`` as an ``int`` day count, rejecting non-integers."""
    if isinstance(value, bool):
        raise DomainError(f"{name} must be an integer day count, got {value!r}")
    try:
        days = operator.index(value)
    except TypeError:
        if isinstance(value, float) and value.is_integer():
            days = int(value)
        else:
            raise DomainError(f"{name} must be an integer day count, got {value!r}") from None
    if days < minimum:
        raise DomainError(f"{name} must be >= {minimum}, got {days}")
    return days


def check_rho(rho, name="rho", allow_one=True):
    rho = float(rho)
    if not math.isfinite(rho) or rho < 0.0 or rho > 1.0:
        raise DomainError(f"{name} must lie in [0, 1], got {rho!r}")
    if not allow_one and rho == 1.0:
        raise DomainError(
            f"{name} = 1 is a degenerate model (deterministic user effect); "
            "the pre-post normalizer 1 - lambda(1)^2 vanishes"
        )
    return rho


def check_nonzero(value, name):
    value = float(value)
    if value == 0.0 or not math.isfinite(value):
        raise DomainError(f"{name} must be finite and nonzero, got {value!r}")
    return value


def check_positive(value, name):
    value = float(value)
    if not (value > 0.0 and math.isfinite(value)):
        raise DomainError(f"{name} must be finite and > 0, got {value!r}")
    return value


def check_nonnegative(value, name):
    value = float(value)
    if not (value >= 0.0 and math.isfinite(value)):
        raise DomainError(f"{name} must be finite and >= 0, got {value!r}")
    return value


def check_alpha(alpha):
    alpha = float(alpha)
    if not 0.0 < alpha < 1.0:
        raise DomainError(f"alpha must lie in (0, 1), got {alpha!r}")
    return alpha
