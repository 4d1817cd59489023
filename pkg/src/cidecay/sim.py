"""Monte Carlo harness checking the closed-form predictions on simulated experiments.

Each replication simulates one experiment and evaluates the estimators on
the data of days ``1..T`` for every ``T`` up to the design length, which is
how a running experiment reports its daily CIs. Replication ``r`` draws from
a seed derived from ``(seed, r)``, and results are collected in replication
order, so reports do not depend on the number of worker threads.
"""

from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import pandas as pd

from ._validation import DomainError, EstimationError, check_alpha, check_days, check_rho
from .estimators import daily_estimates, z_quantile
from .formulas import (
    VarianceComponents,
    asymptotic_variance_additive,
    asymptotic_variance_ratio_metric,
    ci_width_ratio,
    ci_width_ratio_prepost,
    pre_post_correlation,
    prepost_variance,
)
from .model import ExperimentDesign, ModelParams, aggregate_buckets, simulate
from .planner import DesignComparison, _crossover
from .utc import WidthSeries, estimate_utc_from_panels, estimate_utc_from_widths

logger = logging.getLogger(__name__)

MIN_VALIDATE_REPLICATIONS = 30
METHODS = ("plain", "prepost")
_KEYS = ("theta", "variance", "theta_pp", "variance_pp", "lambda_pp")


@dataclass(frozen=True)
class SimConfig:
    """What to simulate and how to judge it.

    ``prediction_rho`` overrides the ground-truth UTC used for predictions
    (useful as a negative control). ``max_width_gap`` and
    ``coverage_tolerance`` are the pass thresholds of :func:`check_report`;
    a None tolerance means four binomial standard errors, at least 0.015.
    """

    params: ModelParams
    design: ExperimentDesign
    replications: int = 500
    alpha: float = 0.05
    seed: int = 0
    method: str = "plain"
    prediction_rho: Optional[float] = None
    max_width_gap: float = 0.02
    coverage_tolerance: Optional[float] = None
    threads: Optional[int] = None
    outputs: tuple = ("decay", "coverage")

    def __post_init__(self):
        check_days(self.replications, "replications")
        check_alpha(self.alpha)
        if self.method not in METHODS:
            raise DomainError(f"method must be one of {METHODS}")
        if self.method == "prepost" and self.design.t0_days == 0:
            raise DomainError("method 'prepost' needs t0_days > 0")
        if self.prediction_rho is not None:
            check_rho(self.prediction_rho, "prediction_rho")

    @property
    def rho(self):
        return self.params.rho if self.prediction_rho is None else self.prediction_rho

    @property
    def effective_coverage_tolerance(self):
        if self.coverage_tolerance is not None:
            return self.coverage_tolerance
        p = 1.0 - self.alpha
        return max(0.015, 4.0 * math.sqrt(p * (1.0 - p) / self.replications))


@dataclass
class ReplicationResults:
    """Per-replication, per-duration estimates; arrays have shape ``(R, T)``."""

    t: np.ndarray
    theta: np.ndarray
    variance: np.ndarray
    theta_pp: Optional[np.ndarray] = None
    variance_pp: Optional[np.ndarray] = None
    lambda_pp: Optional[np.ndarray] = None
    n_failed: int = 0

    @property
    def replications(self):
        return self.theta.shape[0]


def replication_seed(seed, index, stream=0):
    ss = np.random.SeedSequence(int(seed), spawn_key=(int(index), int(stream)))
    return int(ss.generate_state(1, np.uint64)[0])


def _one_replication(config, index):
    seed = replication_seed(config.seed, index)
    panel, pre = simulate(config.params, config.design, seed)
    if config.design.buckets is not None:
        b = aggregate_buckets(panel, pre, config.design.buckets, seed)
        panel, pre = b.panel, b.pre
    est = daily_estimates(panel, pre)
    arr = np.vstack([est[k] for k in _KEYS if k in est])
    if not np.all(np.isfinite(arr)) or np.any(arr[1] < 0):
        raise EstimationError("non-finite or negative estimate")
    return arr


def _run_indexed(fn, n, threads):
    threads = threads or os.cpu_count() or 1
    if threads <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def run_replications(config):
    """Simulate ``config.replications`` experiments and collect daily estimates."""

    def safe(i):
        try:
            return _one_replication(config, i)
        except EstimationError as exc:
            logger.debug("replication %d failed: %s", i, exc)
            return None

    results = _run_indexed(safe, config.replications, config.threads)
    good = [r for r in results if r is not None]
    n_failed = len(results) - len(good)
    T = config.design.t_days
    if not good:
        raise EstimationError(f"all {n_failed} replications failed")
    stack = np.stack(good)  # (R, k, T)
    res = ReplicationResults(np.arange(1, T + 1), stack[:, 0], stack[:, 1], n_failed=n_failed)
    if stack.shape[1] == 5:
        res.theta_pp, res.variance_pp, res.lambda_pp = stack[:, 2], stack[:, 3], stack[:, 4]
    return res


# -- predictions -----------------------------------------------------------

def _arm_means_through(params, design, T):
    m_c = params.control_means(design)[design.t0_days:design.t0_days + T].mean()
    return (1.0 + params.theta) * m_c, m_c


def predicted_nvar(params, design, T, method="plain"):
    """``N * Var(theta_hat)`` predicted by the asymptotic formulas for duration ``T``."""
    if params.is_ratio:
        if method != "plain":
            raise DomainError("pre-post predictions exist for additive metrics only")
        comps_r, comps_c = params.ratio_components()
        return asymptotic_variance_ratio_metric(params.theta, comps_r, comps_c, T)
    sigma = params.sigma
    if design.diversion == "user-day":
        sigma = VarianceComponents(0.0, sigma.sigma_a2 + sigma.sigma_e2)
    m_r, m_c = _arm_means_through(params, design, T)
    if method == "prepost":
        lam = pre_post_correlation(T, design.t0_days, params.rho)
        return prepost_variance(params.theta, sigma.time_averaged(T), lam, m_r, m_c)
    return asymptotic_variance_additive(params.theta, sigma, m_r, m_c, T)


def _predicted_width(config, T):
    rho = 0.0 if config.design.diversion == "user-day" else config.rho
    if config.method == "prepost":
        return ci_width_ratio_prepost(T, config.design.t0_days, rho)
    return ci_width_ratio(T, rho)


# -- reports ---------------------------------------------------------------

@dataclass
class DecayReport:
    """Empirical vs predicted CI-width decay, per duration ``T``.

    ``empirical_width`` is the replication mean of each experiment's CI
    width on day ``T`` divided by its own day-1 width.
    """

    t: np.ndarray
    empirical_width: np.ndarray
    predicted_width: np.ndarray
    coverage: np.ndarray
    empirical_nvar: np.ndarray
    predicted_nvar: np.ndarray
    mean_nvar_hat: np.ndarray
    replications: int
    n_failed: int
    rho: float
    method: str

    @property
    def abs_gap(self):
        return np.abs(self.empirical_width - self.predicted_width)

    @property
    def rel_gap(self):
        return (self.empirical_width - self.predicted_width) / self.predicted_width

    @property
    def nvar_rel_error(self):
        return self.empirical_nvar / self.predicted_nvar - 1.0

    def to_frame(self):
        return pd.DataFrame({
            "t": self.t,
            "empirical_width": self.empirical_width,
            "predicted_width": self.predicted_width,
            "rel_gap": self.rel_gap,
            "coverage": self.coverage,
        })

    def summary(self):
        gap = self.abs_gap
        worst = int(np.argmax(gap))
        return {
            "method": self.method,
            "rho": self.rho,
            "replications": self.replications,
            "n_failed": self.n_failed,
            "max_abs_gap": float(gap[worst]),
            "worst_t": int(self.t[worst]),
            "min_coverage": float(self.coverage.min()),
            "max_coverage": float(self.coverage.max()),
            "empirical_nvar": self.empirical_nvar.tolist(),
            "predicted_nvar": self.predicted_nvar.tolist(),
        }


def _select(results, method):
    if method == "prepost":
        if results.theta_pp is None:
            raise DomainError("replications carry no pre-post estimates")
        return results.theta_pp, results.variance_pp
    return results.theta, results.variance


def coverage_of(theta, variance, truth, alpha):
    """Fraction of replications whose interval covers ``truth``, per column."""
    half = z_quantile(1.0 - alpha / 2.0) * np.sqrt(variance)
    return np.mean(np.abs(theta - truth) <= half, axis=0)


def summarize_decay(results, config, method=None):
    method = method or config.method
    cfg = replace(config, method=method)
    theta, var = _select(results, method)
    n = config.design.n_per_arm
    width = np.sqrt(var / var[:, :1])
    t = results.t
    return DecayReport(
        t=t,
        empirical_width=width.mean(axis=0),
        predicted_width=np.array([_predicted_width(cfg, int(T)) for T in t]),
        coverage=coverage_of(theta, var, config.params.theta, config.alpha),
        empirical_nvar=n * theta.var(axis=0, ddof=1),
        predicted_nvar=np.array([predicted_nvar(config.params, config.design, int(T), method) for T in t]),
        mean_nvar_hat=n * var.mean(axis=0),
        replications=results.replications,
        n_failed=results.n_failed,
        rho=cfg.rho,
        method=method,
    )


def run_decay_study(config):
    """Empirical daily CI-width decay against the closed-form prediction."""
    return summarize_decay(run_replications(config), config)


@dataclass
class CoverageReport:
    t: np.ndarray
    coverage_plain: np.ndarray
    coverage_prepost: Optional[np.ndarray]
    alpha: float
    replications: int
    n_failed: int

    def to_frame(self):
        d = {"t": self.t, "coverage_plain": self.coverage_plain}
        if self.coverage_prepost is not None:
            d["coverage_prepost"] = self.coverage_prepost
        return pd.DataFrame(d)


def summarize_coverage(results, config):
    truth, alpha = config.params.theta, config.alpha
    pp = None
    if results.theta_pp is not None:
        pp = coverage_of(results.theta_pp, results.variance_pp, truth, alpha)
    return CoverageReport(
        results.t,
        coverage_of(results.theta, results.variance, truth, alpha),
        pp,
        alpha,
        results.replications,
        results.n_failed,
    )


def run_coverage_study(config):
    """Per-duration coverage of the level-``alpha`` intervals of ``theta``."""
    return summarize_coverage(run_replications(config), config)


def prepost_efficiency(results, config):
    """Empirical ``Var(theta_pp) / Var(theta)`` and the predicted ``1 - lambda(T)^2``."""
    if results.theta_pp is None:
        raise DomainError("replications carry no pre-post estimates")
    emp = results.theta_pp.var(axis=0, ddof=1) / results.theta.var(axis=0, ddof=1)
    lam = np.array([pre_post_correlation(int(T), config.design.t0_days, config.params.rho) for T in results.t])
    return emp, 1.0 - lam**2


def check_report(report, config):
    """Judge a decay report: returns ``(ok, messages)``."""
    msgs = []
    gap = report.abs_gap
    worst = int(np.argmax(gap))
    if gap[worst] > config.max_width_gap:
        msgs.append(
            f"width gap {gap[worst]:.4g} at T={int(report.t[worst])} exceeds {config.max_width_gap:.4g}"
        )
    target = 1.0 - config.alpha
    tol = config.effective_coverage_tolerance
    cov_err = np.abs(report.coverage - target)
    worst_c = int(np.argmax(cov_err))
    if cov_err[worst_c] > tol:
        msgs.append(
            f"coverage {report.coverage[worst_c]:.4g} at T={int(report.t[worst_c])} "
            f"is more than {tol:.4g} from {target:.4g}"
        )
    return not msgs, msgs


# -- design study ----------------------------------------------------------

@dataclass
class DesignStudy:
    """Empirical counterpart of :func:`cidecay.planner.compare_designs`.

    ``comparison`` holds replication means of the estimated standard errors,
    normalized by the day-1 plain user-design value; ``mc_sd_*`` are the
    Monte Carlo standard deviations of the estimates, normalized the same way.
    """

    comparison: DesignComparison
    mc_sd_user_plain: np.ndarray
    mc_sd_user_prepost: np.ndarray
    mc_sd_userday: np.ndarray
    replications: int
    mc_crossover_t: Optional[int] = None


def run_design_study(rho, t0, n, replications, seed, max_t=20, total_variance=10.0,
                     mean=100.0, threads=None):
    """User experiment with pre-post adjustment vs user-day experiment of equal size."""
    rho = check_rho(rho)
    if not 0.0 < rho < 1.0:
        raise DomainError("the design study needs 0 < rho < 1")
    params = ModelParams(
        theta=0.0,
        daily_means_c=(mean,),
        sigma=VarianceComponents(rho * total_variance, (1.0 - rho) * total_variance),
    )
    user = ExperimentDesign(n, max_t, t0, "user")
    userday = ExperimentDesign(n, max_t, 0, "user-day")

    def one(i):
        s = replication_seed(seed, i)
        panel, pre = simulate(params, user, s)
        est = daily_estimates(panel, pre)
        ud_panel, _ = simulate(params, userday, replication_seed(seed, i, stream=1))
        ud = daily_estimates(ud_panel)
        return np.vstack([est["theta"], est["variance"], est["theta_pp"], est["variance_pp"],
                          ud["theta"], ud["variance"]])

    stack = np.stack(_run_indexed(one, replications, threads))
    se = np.sqrt(stack[:, [1, 3, 5]]).mean(axis=0)
    norm = se[0, 0]
    sd = stack[:, [0, 2, 4]].std(axis=0, ddof=1)
    t = tuple(range(1, max_t + 1))
    plain, prepost, ud = (tuple(float(v) for v in row / norm) for row in se)
    comparison = DesignComparison(t, plain, prepost, ud, _crossover(t, prepost, ud), rho, t0)
    sd_norm = sd[0, 0]
    return DesignStudy(
        comparison,
        sd[0] / sd_norm,
        sd[1] / sd_norm,
        sd[2] / sd_norm,
        replications,
        _crossover(t, sd[1], sd[2]),
    )


# -- UTC studies -----------------------------------------------------------

def daily_ci_widths(panel, alpha=0.05, experiment_id="0"):
    """Plug-in CI width reported at the end of each day ``1..T``."""
    var = daily_estimates(panel)["variance"]
    z = z_quantile(1.0 - alpha / 2.0)
    return WidthSeries(tuple(range(1, panel.t_days + 1)), tuple(2.0 * z * np.sqrt(var)), str(experiment_id))


def simulate_experiments(params, design, n_experiments, seed, threads=None):
    """Independent simulated experiments (panels only)."""
    return _run_indexed(
        lambda i: simulate(params, design, replication_seed(seed, i))[0], n_experiments, threads
    )


@dataclass
class HoldoutReport:
    """UTC fitted on one batch of experiments, tested on another."""

    rho_panel: float
    rho_widths: float
    t: np.ndarray
    heldout_width: np.ndarray
    predicted_width: np.ndarray
    n_fit: int
    n_holdout: int
    method: str = "widths"

    @property
    def max_abs_gap(self):
        return float(np.max(np.abs(self.heldout_width - self.predicted_width)))


def run_holdout_study(params, design, n_fit, n_holdout, seed, alpha=0.05, method="widths",
                      max_lag=None, threads=None):
    """Estimate the UTC on ``n_fit`` experiments, predict the decay of ``n_holdout`` others.

    Both estimators are computed on the fitting batch; ``method`` picks the
    one used for the prediction.
    """
    fit_panels = simulate_experiments(params, design, n_fit, seed, threads)
    rho_panel = estimate_utc_from_panels(fit_panels, max_lag).rho_hat
    rho_widths = estimate_utc_from_widths(
        [daily_ci_widths(p, alpha, i) for i, p in enumerate(fit_panels)]
    ).rho_hat
    del fit_panels
    rng_seed = replication_seed(seed, 0, stream=2)
    held = _run_indexed(
        lambda i: daily_ci_widths(simulate(params, design, replication_seed(rng_seed, i))[0], alpha).normalized(),
        n_holdout,
        threads,
    )
    rho = rho_widths if method == "widths" else rho_panel
    t = np.arange(1, design.t_days + 1)
    return HoldoutReport(
        rho_panel,
        rho_widths,
        t,
        np.mean(np.array(held), axis=0),
        np.array([ci_width_ratio(int(T), rho) for T in t]),
        n_fit,
        n_holdout,
        method,
    )


def sim_config_from_dict(d):
    """Parse a validation document: model/design keys plus harness settings."""
    from .serialization import ConfigError, config_from_dict

    params, design, seed = config_from_dict(d)
    extra = {}
    for key, cast in (("replications", int), ("alpha", float), ("method", str),
                      ("prediction_rho", float), ("max_width_gap", float),
                      ("coverage_tolerance", float)):
        if d.get(key) is not None:
            try:
                extra[key] = cast(d[key])
            except (TypeError, ValueError):
                raise ConfigError(f"field '{key}': invalid value {d[key]!r}") from None
    try:
        return SimConfig(params=params, design=design, seed=seed, **extra)
    except DomainError as exc:
        raise ConfigError(str(exc)) from None
