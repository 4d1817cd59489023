"""Confidence-interval width decay and duration planning for user-level A/B experiments."""

__version__ = "0.1.0"

from ._validation import DesignError, DomainError, EstimationError
from .estimators import (
    ConfidenceInterval,
    EffectEstimate,
    PrePostEstimator,
    RatioEffectEstimator,
    confidence_interval,
    estimate_theta,
    estimate_theta_prepost,
    estimate_theta_prepost_bucketed,
    estimate_variance_jackknife,
    estimate_variance_plugin,
)
from .formulas import (
    RatioVarianceComponents,
    VarianceComponents,
    asymptotic_variance_additive,
    asymptotic_variance_ratio_metric,
    ci_width_ratio,
    ci_width_ratio_prepost,
    limiting_width_ratio,
    pre_post_correlation,
    prepost_variance,
    relative_efficiency,
    utc_additive,
    utc_ratio_metric,
    utc_ratio_metric_linearized,
)
from .model import ExperimentDesign, MetricPanel, ModelParams, PrePeriodPanel, aggregate_buckets, simulate
from .planner import PlanQuery, compare_designs, power_curve, required_duration, required_size_multiplier
from .sim import SimConfig, run_coverage_study, run_decay_study, run_design_study
from .utc import (
    UTCEstimate,
    UTCEstimator,
    WidthSeries,
    estimate_utc_from_panel,
    estimate_utc_from_panels,
    estimate_utc_from_widths,
    utc_from_width_pair,
)
