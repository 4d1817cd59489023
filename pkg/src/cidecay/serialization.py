"""CSV and JSON file formats.

Panels are long-format CSV (``user_id,day,arm,value`` or
``user_id,day,arm,numerator,denominator``), pre-periods
``user_id,arm,pre_mean``, width series ``experiment_id,day,ci_width``.
Model and design parameters share one JSON document.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pandas as pd

from ._validation import DesignError, DomainError
from .formulas import RatioVarianceComponents, VarianceComponents
from .model import ARMS, ExperimentDesign, MetricPanel, ModelParams, PrePeriodPanel
from .utc import WidthSeries

PANEL_COLUMNS = ["user_id", "day", "arm", "value"]
RATIO_PANEL_COLUMNS = ["user_id", "day", "arm", "numerator", "denominator"]
PRE_COLUMNS = ["user_id", "arm", "pre_mean"]
WIDTH_COLUMNS = ["experiment_id", "day", "ci_width"]

CONFIG_KEYS = (
    "theta", "daily_means_c", "sigma_a2", "sigma_e2", "ratio_part", "error_distribution",
    "n_per_arm", "t_days", "t0_days", "diversion", "buckets", "seed",
)
RATIO_KEYS = (
    "sigma_a2_n", "sigma_a2_d", "sigma_a_nd", "sigma_e2_n", "sigma_e2_d", "sigma_e_nd",
    "mbar_n", "mbar_d",
)


class ConfigError(DomainError):
    """Malformed configuration document; the message names the field."""


def _to_csv(frame, path):
    frame.to_csv(path, index=False, lineterminator="\n")


def _read_csv(path, **kw):
    # the default C parser may be off by one ulp; artifacts must round-trip
    return pd.read_csv(path, float_precision="round_trip", **kw)


# -- panels ----------------------------------------------------------------

def panel_to_frame(panel):
    _, N, T = panel.shape
    ids = panel.user_ids if panel.user_ids is not None else np.tile(np.arange(N), (2, 1))
    cols = {
        "user_id": np.repeat(ids.ravel(), T),
        "day": np.tile(np.arange(1, T + 1), 2 * N),
        "arm": np.repeat(np.array(ARMS), N * T),
    }
    if panel.is_ratio:
        cols["numerator"] = panel.numerator.ravel()
        cols["denominator"] = panel.denominator.ravel()
    else:
        cols["value"] = panel.values.ravel()
    return pd.DataFrame(cols)


def _arm_codes(arm):
    codes = pd.Categorical(arm, categories=list(ARMS)).codes
    if (codes < 0).any():
        bad = sorted(set(arm[codes < 0].astype(str)))[:3]
        raise DomainError(f"arm must be 'treatment' or 'control', got {bad}")
    return codes


def panel_from_frame(frame):
    """Rebuild a rectangular :class:`MetricPanel` from long format.

    Users are ordered by ``user_id`` within each arm; every user must have
    exactly one row for each day ``1..T``.
    """
    cols = list(frame.columns)
    if set(RATIO_PANEL_COLUMNS) <= set(cols):
        value_cols = ["numerator", "denominator"]
    elif set(PANEL_COLUMNS) <= set(cols):
        value_cols = ["value"]
    else:
        raise DomainError(f"panel columns must be {PANEL_COLUMNS} or {RATIO_PANEL_COLUMNS}, got {cols}")
    if frame.empty:
        raise DomainError("panel is empty")
    frame = frame.assign(_arm=_arm_codes(frame["arm"].to_numpy()))
    frame = frame.sort_values(["_arm", "user_id", "day"], kind="stable")
    T = int(frame["day"].max())
    if frame["day"].min() != 1 or frame["day"].nunique() != T:
        raise DomainError("days must run 1..T without gaps")
    counts = frame.groupby("_arm")["user_id"].nunique()
    if len(counts) != 2 or counts.iloc[0] != counts.iloc[1]:
        raise DomainError("both arms must contain the same number of users")
    N = int(counts.iloc[0])
    if len(frame) != 2 * N * T or frame.duplicated(["_arm", "user_id", "day"]).any():
        raise DomainError("panel is not rectangular: every (user, day, arm) cell must appear once")
    arrays = {c: frame[c].to_numpy(dtype=float).reshape(2, N, T) for c in value_cols}
    ids = frame["user_id"].to_numpy()[::T].reshape(2, N)
    if value_cols == ["value"]:
        return MetricPanel(values=arrays["value"], user_ids=ids)
    return MetricPanel(numerator=arrays["numerator"], denominator=arrays["denominator"], user_ids=ids)


def write_panel_csv(panel, path):
    _to_csv(panel_to_frame(panel), path)


def read_panel_csv(path):
    return panel_from_frame(_read_csv(path))


def pre_to_frame(pre):
    N = pre.n_per_arm
    ids = pre.user_ids if pre.user_ids is not None else np.tile(np.arange(N), (2, 1))
    return pd.DataFrame({
        "user_id": ids.ravel(),
        "arm": np.repeat(np.array(ARMS), N),
        "pre_mean": pre.pre_mean.ravel(),
    })


def pre_from_frame(frame):
    if list(frame.columns)[:3] != PRE_COLUMNS:
        raise DomainError(f"pre-period columns must be {PRE_COLUMNS}")
    frame = frame.assign(_arm=_arm_codes(frame["arm"].to_numpy()))
    frame = frame.sort_values(["_arm", "user_id"], kind="stable")
    if frame.duplicated(["_arm", "user_id"]).any():
        raise DomainError("duplicate pre-period rows")
    sizes = frame.groupby("_arm").size()
    if len(sizes) != 2 or sizes.iloc[0] != sizes.iloc[1]:
        raise DomainError("both arms must contain the same number of users")
    N = int(sizes.iloc[0])
    return PrePeriodPanel(
        frame["pre_mean"].to_numpy(dtype=float).reshape(2, N),
        user_ids=frame["user_id"].to_numpy().reshape(2, N),
    )


def write_pre_csv(pre, path):
    _to_csv(pre_to_frame(pre), path)


def read_pre_csv(path):
    return pre_from_frame(_read_csv(path))


# -- width series ----------------------------------------------------------

def width_series_to_frame(series):
    rows = [(s.experiment_id, d, w) for s in series for d, w in zip(s.days, s.widths)]
    return pd.DataFrame(rows, columns=WIDTH_COLUMNS)


def width_series_from_frame(frame):
    if list(frame.columns)[:3] != WIDTH_COLUMNS:
        raise DomainError(f"width series columns must be {WIDTH_COLUMNS}")
    if frame.empty:
        raise DomainError("width series file is empty")
    out = []
    for exp_id, group in frame.groupby("experiment_id", sort=False):
        group = group.sort_values("day")
        out.append(WidthSeries(tuple(group["day"].astype(int)), tuple(group["ci_width"].astype(float)), str(exp_id)))
    return out


def write_width_series_csv(series, path):
    _to_csv(width_series_to_frame(series), path)


def read_width_series_csv(path):
    return width_series_from_frame(_read_csv(path, dtype={"experiment_id": str}))


# -- JSON documents --------------------------------------------------------

def _number(d, key, *, allow_none=False):
    v = d.get(key)
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise ConfigError(f"field '{key}': expected a finite number, got {v!r}")
    return v


def _integer(d, key, *, allow_none=False):
    v = d.get(key)
    if v is None and allow_none:
        return None
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"field '{key}': expected an integer, got {v!r}")
    return v


def config_from_dict(d):
    """Parse a parameter document into ``(ModelParams, ExperimentDesign, seed)``.

    Field-level problems raise :class:`ConfigError` naming the field.
    """
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    missing = [k for k in ("theta", "n_per_arm", "t_days", "seed") if k not in d]
    if missing:
        raise ConfigError(f"missing fields: {', '.join(missing)}")

    ratio = d.get("ratio_part")
    ratio_part = None
    if ratio is not None:
        if not isinstance(ratio, dict):
            raise ConfigError("field 'ratio_part': expected an object or null")
        try:
            ratio_part = RatioVarianceComponents(**{k: _number(ratio, k) for k in RATIO_KEYS})
        except ConfigError as exc:
            raise ConfigError(f"ratio_part: {exc}") from None
        except DomainError as exc:
            raise ConfigError(f"field 'ratio_part': {exc}") from None

    sigma = None
    a2 = _number(d, "sigma_a2", allow_none=ratio_part is not None)
    e2 = _number(d, "sigma_e2", allow_none=ratio_part is not None)
    if a2 is not None or e2 is not None:
        for key, v in (("sigma_a2", a2), ("sigma_e2", e2)):
            if v is None or v < 0:
                raise ConfigError(f"field '{key}': must be a number >= 0, got {v!r}")
        try:
            sigma = VarianceComponents(a2, e2)
        except DomainError as exc:
            raise ConfigError(f"fields 'sigma_a2'/'sigma_e2': {exc}") from None

    means = d.get("daily_means_c", 100.0)
    if isinstance(means, (int, float)) and not isinstance(means, bool):
        means = [means]
    if not isinstance(means, list) or not means or not all(
        isinstance(m, (int, float)) and not isinstance(m, bool) for m in means
    ):
        raise ConfigError("field 'daily_means_c': expected a number or a non-empty list of numbers")

    seed = _integer(d, "seed")
    if seed < 0:
        raise ConfigError("field 'seed': must be >= 0")

    def build(label, fn):
        try:
            return fn()
        except (DomainError, DesignError) as exc:
            raise ConfigError(f"{label}: {exc}") from None

    params = build("model parameters", lambda: ModelParams(
        theta=_number(d, "theta"),
        daily_means_c=tuple(means),
        sigma=sigma,
        ratio_part=ratio_part,
        error_distribution=d.get("error_distribution", "gaussian"),
    ))
    design = build("design", lambda: ExperimentDesign(
        n_per_arm=_integer(d, "n_per_arm"),
        t_days=_integer(d, "t_days"),
        t0_days=_integer(d, "t0_days", allow_none=True) or 0,
        diversion=d.get("diversion", "user"),
        buckets=_integer(d, "buckets", allow_none=True),
    ))
    build("daily_means_c", lambda: params.control_means(design))
    return params, design, seed


def config_to_dict(params, design, seed):
    rp = params.ratio_part
    return {
        "theta": params.theta,
        "daily_means_c": list(params.daily_means_c),
        "sigma_a2": None if params.sigma is None else params.sigma.sigma_a2,
        "sigma_e2": None if params.sigma is None else params.sigma.sigma_e2,
        "ratio_part": None if rp is None else {k: getattr(rp, k) for k in RATIO_KEYS},
        "error_distribution": params.error_distribution,
        "n_per_arm": design.n_per_arm,
        "t_days": design.t_days,
        "t0_days": design.t0_days,
        "diversion": design.diversion,
        "buckets": design.buckets,
        "seed": int(seed),
    }


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=False) + "\n", encoding="utf-8")


def load_config(path):
    try:
        doc = read_json(path)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return config_from_dict(doc)


def estimate_to_json(est, ci, path):
    write_json(est.to_dict(ci), path)


def utc_estimate_to_json(est, path):
    write_json(est.to_dict(), path)
