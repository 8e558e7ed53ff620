"""QoE metrics over run traces and their aggregation across repetitions."""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np

from .engine import SAMPLE_COLUMNS, ExperimentPlan, RunTrace

COL = {name: i for i, name in enumerate(SAMPLE_COLUMNS)}
STEADY_MARGIN = 100.0
USER_WARMUP = 30.0


class EmptyAfterTrim(UserWarning):
    """Trimming removed every sample; the report carries NaNs."""


@dataclass(frozen=True)
class TrimPolicy:
    t_start: float = 0.0  # drop everything before this time
    user_warmup: float = 0.0  # drop the first seconds of each user (quality metrics)
    prebuffer_after: float | None = None  # only sessions starting at/after this time count

    @classmethod
    def from_plan(cls, plan: ExperimentPlan) -> "TrimPolicy":
        if plan.kind in ("1", "1*"):
            return cls(t_start=plan.arrival_end + STEADY_MARGIN)
        if plan.kind == "2":
            return cls(t_start=plan.arrival_end + STEADY_MARGIN, user_warmup=USER_WARMUP,
                       prebuffer_after=plan.arrival_end)
        return cls(user_warmup=USER_WARMUP)


@dataclass(frozen=True)
class MetricsReport:
    n_users: int
    overshoot_max: float  # s above target
    buffer_min: float
    buffer_mean: float
    rebuffer_mean: float  # per-user total, averaged
    rebuffer_max: float
    prebuffer_mean: float
    prebuffer_max: float
    bitrate_mean: float
    fluctuation: float
    fairness_iqr: float
    prebuffer_samples: tuple = ()

    def scalars(self) -> dict:
        d = asdict(self)
        d.pop("prebuffer_samples")
        return d


SCALAR_FIELDS = tuple(f.name for f in fields(MetricsReport) if f.name != "prebuffer_samples")


def fluctuation_fraction(reps) -> float:
    """Share of segments (after the first) played in a different representation."""
    reps = np.asarray(reps)
    if reps.size < 2:
        return math.nan
    return float(np.count_nonzero(reps[1:] != reps[:-1]) / (reps.size - 1))


def iqr(values) -> float:
    q1, q3 = np.quantile(np.asarray(values, dtype=float), [0.25, 0.75])
    return float(q3 - q1)


def modal_value(values, bin_width: float = 0.1) -> float:
    """Centre of the most populated bin of width ``bin_width`` (ties: lowest)."""
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return math.nan
    idx = np.floor(v / bin_width + 1e-9).astype(int)
    keys, counts = np.unique(idx, return_counts=True)
    return float((keys[np.argmax(counts)] + 0.5) * bin_width)


def _halted(events, lo: float, hi: float) -> float:
    """Total time in [lo, hi] between underrun and the following resume."""
    total, start = 0.0, None
    for e in events:
        if e.kind == "underrun":
            start = e.t
        elif e.kind == "resume" and start is not None:
            total += max(0.0, min(e.t, hi) - max(start, lo))
            start = None
    if start is not None:
        total += max(0.0, hi - max(start, lo))
    return total


def compute_metrics(trace: RunTrace, policy: TrimPolicy) -> MetricsReport:
    target = trace.target
    end = trace.end_time
    over, bmin, bsum, bcount = -math.inf, math.inf, 0.0, 0
    rebuf, prebuf, means, flucts = [], [], [], []
    for ut in trace.users.values():
        t_leave = ut.t_departure if math.isfinite(ut.t_departure) else end
        lo = max(policy.t_start, ut.t_arrival + policy.user_warmup)

        if ut.samples is not None and len(ut.samples):
            s = ut.samples[ut.samples[:, COL["t"]] > lo]
            if len(s):
                over = max(over, float(s[:, COL["buffer_max_s"]].max()) - target)
                bmin = min(bmin, float(s[:, COL["buffer_min_s"]].min()))
                bsum += float(s[:, COL["buffer_s"]].sum())
                bcount += len(s)

        startup = next((e for e in ut.events if e.kind == "startup"), None)
        if startup is not None and (policy.prebuffer_after is None or ut.t_arrival >= policy.prebuffer_after - 1e-9):
            prebuf.append(startup.value)

        if t_leave > policy.t_start:
            rebuf.append(_halted(ut.events, policy.t_start, t_leave))

        played = [e.value for e in ut.events if e.kind == "play" and e.t >= lo]
        if played:
            means.append(float(np.mean(played)))
            f = fluctuation_fraction(played)
            if not math.isnan(f):
                flucts.append(f)

    if bcount == 0:
        warnings.warn("trimming removed all samples", EmptyAfterTrim, stacklevel=2)
        nan = math.nan
        return MetricsReport(0, nan, nan, nan, nan, nan,
                             float(np.mean(prebuf)) if prebuf else nan, float(np.max(prebuf)) if prebuf else nan,
                             nan, nan, nan, tuple(prebuf))

    def _mean(v):
        return float(np.mean(v)) if len(v) else math.nan

    return MetricsReport(
        n_users=len(means),
        overshoot_max=over,
        buffer_min=bmin,
        buffer_mean=bsum / bcount,
        rebuffer_mean=_mean(rebuf),
        rebuffer_max=float(np.max(rebuf)) if rebuf else math.nan,
        prebuffer_mean=_mean(prebuf),
        prebuffer_max=float(np.max(prebuf)) if prebuf else math.nan,
        bitrate_mean=_mean(means),
        fluctuation=_mean(flucts),
        fairness_iqr=iqr(means) if means else math.nan,
        prebuffer_samples=tuple(prebuf),
    )


def aggregate(reports) -> dict:
    """Cross-run statistics of every per-run scalar: mean, max, min, p10, p90."""
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    out = {}
    for name in SCALAR_FIELDS:
        v = np.array([getattr(r, name) for r in reports], dtype=float)
        v = v[np.isfinite(v)]
        if v.size == 0:
            out[name] = dict.fromkeys(("mean", "max", "min", "p10", "p90"), math.nan)
            continue
        out[name] = {
            "mean": float(v.mean()),
            "max": float(v.max()),
            "min": float(v.min()),
            "p10": float(np.quantile(v, 0.1)),
            "p90": float(np.quantile(v, 0.9)),
        }
    pooled = [x for r in reports for x in r.prebuffer_samples]
    out["prebuffer_mode"] = modal_value(pooled) if pooled else math.nan
    out["runs"] = len(reports)
    return out
