"""Trace, summary and allocation files.

Layout of one run directory::

    summary.json        config, config hash, seed, run counters, metrics
    users/u00000.csv    one trace per user (schema below)
    allocations.csv     optional per-link scheduler output

Trace CSV (``TRACE_SCHEMA``): a ``#`` header block with the schema version,
config hash, seed and per-user metadata, then one row per record.  ``record`` is
``sample`` or ``event``.  Sample rows fill the columns of
:data:`pidstream.engine.SAMPLE_COLUMNS` (phase is an integer code, buffer
levels in s, rates in bit/s, ``t`` is the end of the sampling interval).
Event rows fill ``t``, ``event`` and ``value``.  Floats are written with
``repr`` so a trace reads back bit-exactly.
"""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path

import numpy as np

from .client import Event
from .engine import SAMPLE_COLUMNS, ExperimentPlan, RunTrace, UserTrace

TRACE_SCHEMA = "pidstream-trace/1"
TRACE_COLUMNS = ("record",) + SAMPLE_COLUMNS + ("event", "value")
ALLOC_COLUMNS = ("slot", "user", "helper", "link_rate_bps", "alpha", "demand_bps", "allocated_bps", "theta", "c_min")
META_KEYS = ("uid", "t_arrival", "x", "y", "video", "start_segment", "t_departure")


class TraceFormatError(ValueError):
    pass


def _f(v) -> str:
    return repr(float(v))


def _num(s: str) -> float:
    return float(s) if s else math.nan


def _finite_or_str(v):
    return v if not isinstance(v, float) or math.isfinite(v) else repr(v)


def jsonable(obj):
    """Recursively replace non-finite floats by their repr ('nan', 'inf')."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    return _finite_or_str(obj)


# --- traces ---------------------------------------------------------------------------


def write_user_trace(path, ut: UserTrace, config_hash: str, seed: int) -> None:
    meta = dict(uid=ut.uid, t_arrival=_f(ut.t_arrival), x=_f(ut.position[0]), y=_f(ut.position[1]),
                video=ut.video, start_segment=ut.start_segment, t_departure=_f(ut.t_departure))
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema={TRACE_SCHEMA}\n# config_hash={config_hash}\n# seed={seed}\n")
        fh.write("# " + " ".join(f"{k}={v}" for k, v in meta.items()) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        blank = [""] * len(SAMPLE_COLUMNS)
        if ut.samples is not None:
            for row in ut.samples:
                vals = [_f(v) for v in row]
                vals[1] = str(int(row[1]))
                w.writerow(["sample", *vals, "", ""])
        for e in ut.events:
            rec = ["event", *blank, e.kind, _f(e.value)]
            rec[1] = _f(e.t)
            w.writerow(rec)


def read_user_trace(path) -> tuple[UserTrace, dict]:
    header = {}
    with open(path, newline="") as fh:
        lines = []
        for line in fh:
            if line.startswith("#"):
                for tok in line[1:].split():
                    k, _, v = tok.partition("=")
                    header[k] = v
            else:
                lines.append(line)
    if header.get("schema") != TRACE_SCHEMA:
        raise TraceFormatError(f"{path}: unsupported schema {header.get('schema')!r}")
    rows = list(csv.reader(lines))
    if not rows or tuple(rows[0]) != TRACE_COLUMNS:
        raise TraceFormatError(f"{path}: unexpected columns")
    samples, events = [], []
    n = len(SAMPLE_COLUMNS)
    for r in rows[1:]:
        if r[0] == "sample":
            samples.append([float(v) for v in r[1:1 + n]])
        elif r[0] == "event":
            events.append(Event(float(r[1]), r[1 + n], _num(r[2 + n])))
        else:
            raise TraceFormatError(f"{path}: bad record type {r[0]!r}")
    ut = UserTrace(
        uid=int(header["uid"]), t_arrival=float(header["t_arrival"]),
        position=(float(header["x"]), float(header["y"])), video=int(header["video"]),
        start_segment=int(header["start_segment"]), t_departure=float(header["t_departure"]),
        samples=np.asarray(samples, dtype=float).reshape(-1, n), events=events,
    )
    return ut, header


def write_run(out_dir, trace: RunTrace, config: dict, config_hash: str, report=None) -> Path:
    """Write ``summary.json`` and per-user traces; returns the directory."""
    out = Path(out_dir)
    (out / "users").mkdir(parents=True, exist_ok=True)
    for uid in sorted(trace.users):
        write_user_trace(out / "users" / f"u{uid:05d}.csv", trace.users[uid], config_hash, trace.seed)
    summary = {
        "schema": TRACE_SCHEMA,
        "config_hash": config_hash,
        "seed": trace.seed,
        "config": config,
        "run": {
            "plan": {k: _finite_or_str(v) for k, v in trace.plan.__dict__.items()},
            "target": trace.target, "tau": trace.tau, "dt": trace.dt, "end_time": trace.end_time,
            "n_users": len(trace.users), "n_solves": trace.n_solves,
            "n_slots_scheduled": trace.n_slots_scheduled, "cap_overrides": trace.cap_overrides,
            "bits_allocated": trace.bits_allocated, "bits_delivered": trace.bits_delivered,
            "violations": [f"slot {s}: {m}" for s, m in trace.violations],
        },
    }
    if report is not None:
        summary["metrics"] = {k: _finite_or_str(v) for k, v in report.scalars().items()}
    write_json(out / "summary.json", summary)
    if trace.allocations is not None:
        write_allocations(out / "allocations.csv", trace.allocations)
    return out


def read_trace(run_dir) -> RunTrace:
    """Rebuild a :class:`RunTrace` from a directory written by :func:`write_run`."""
    run_dir = Path(run_dir)
    with open(run_dir / "summary.json") as fh:
        summary = json.load(fh)
    r = summary["run"]
    plan_kw = dict(r["plan"])
    plan = ExperimentPlan(**plan_kw)
    trace = RunTrace(seed=summary["seed"], plan=plan, target=r["target"], tau=r["tau"], dt=r["dt"],
                     end_time=r["end_time"], n_solves=r["n_solves"], n_slots_scheduled=r["n_slots_scheduled"],
                     cap_overrides=r["cap_overrides"], bits_allocated=r["bits_allocated"],
                     bits_delivered=r["bits_delivered"])
    for p in sorted((run_dir / "users").glob("u*.csv")):
        ut, _ = read_user_trace(p)
        trace.users[ut.uid] = ut
    return trace


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(jsonable(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def write_aggregates(path, rows) -> None:
    """``rows``: iterable of ``(experiment, users, summary)`` with ``summary``
    from :func:`pidstream.metrics.aggregate`.  One CSV line per metric."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("experiment", "users", "metric", "runs", "mean", "max", "min", "p10", "p90"))
        for exp, users, summ in rows:
            for name, stats in summ.items():
                if not isinstance(stats, dict):
                    continue
                w.writerow((exp, users, name, summ["runs"], *(_f(stats[k]) for k in ("mean", "max", "min", "p10", "p90"))))
            w.writerow((exp, users, "prebuffer_mode", summ["runs"], _f(summ["prebuffer_mode"]), "", "", "", ""))


# --- allocations ----------------------------------------------------------------------


def write_allocations(path, allocations) -> None:
    """One row per active link of every solved slot."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ALLOC_COLUMNS)
        for slot, a in allocations:
            p = a.problem
            for k in range(p.n_links):
                i = int(p.link_user[k])
                w.writerow((slot, p.users[i], int(p.link_helper[k]), _f(p.link_rate[k]), _f(a.alpha[k]),
                            _f(p.demands[i]), _f(a.throughput[i]), _f(a.theta), _f(a.c_min)))


def _nearest_rank(v, q):
    s = np.sort(v)
    return s[max(1, math.ceil(q * len(s) - 1e-9)) - 1]


def audit_dump(path, cascade: bool = True, rtol: float = 1e-6, atol: float = 1.0) -> list[str]:
    """Re-check C1-C5 on a dumped allocation file from the raw numbers.

    Written separately from the in-process auditor so that a bug in one is
    not mirrored by the other.  Returns human-readable violations.
    """
    bad = []
    slots: dict = {}
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            slots.setdefault(int(r["slot"]), []).append(r)
    for slot, rows in slots.items():
        load: dict = {}
        users: dict = {}
        theta = float(rows[0]["theta"])
        cmin = float(rows[0]["c_min"])
        for r in rows:
            a = float(r["alpha"])
            if a < 0:
                bad.append(f"slot {slot}: C2 negative share")
            h = int(r["helper"])
            load[h] = load.get(h, 0.0) + a
            u = users.setdefault(int(r["user"]), [float(r["demand_bps"]), float(r["allocated_bps"]), 0.0])
            u[2] += a * float(r["link_rate_bps"])
        for h, v in load.items():
            if v > 1 + 1e-9:
                bad.append(f"slot {slot}: C1 helper {h} load {v!r}")
        d = np.array([u[0] for u in users.values()])
        c = np.array([u[2] for u in users.values()])
        rep = np.array([u[1] for u in users.values()])
        if not np.allclose(c, rep, rtol=1e-9, atol=1e-3):
            bad.append(f"slot {slot}: reported throughput differs from sum of shares")
        if not cascade:
            continue
        raised = np.maximum(d, _nearest_rank(d, 0.1))
        if np.any(c < theta * (1 - rtol) * raised - atol):
            bad.append(f"slot {slot}: C3 below theta floor")
        if np.any(c < cmin * (1 - rtol) - atol):
            bad.append(f"slot {slot}: C4 below c_min")
        cap = np.maximum(2.0 * max(cmin, _nearest_rank(raised, 0.5)), theta * raised)
        if np.any(c > cap * (1 + rtol) + atol):
            bad.append(f"slot {slot}: C5 above cap")
    return bad


def default_out(out: str | None) -> Path:
    """``--out`` if given, else ``$PIDSTREAM_OUT``, else ``./pidstream-out``."""
    return Path(out or os.environ.get("PIDSTREAM_OUT") or "pidstream-out")
