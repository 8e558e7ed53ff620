"""TOML run configuration.

A config file has up to six tables; every key is optional and falls back to
the :class:`~pidstream.engine.SimConfig` default::

    seed = 0
    dt = 0.01
    sample_interval = 0.1
    audit = true

    [plan]        # kind, users, placement, cluster_lambda, arrival_rate,
                  # churn_rate, steady, duration
    [channel]     # f0, bandwidth, snr, c_min, fading_samples, refresh_period
    [controller]  # kp, ki, kd, g_max, gi_max
    [adaptation]  # alpha, window, target, tau
    [media]       # n_videos, video_duration, ladder, vbr_sigma
    [topology]    # area = [w, h], helpers_per_side

Unknown tables or keys are rejected so typos do not silently fall back to
defaults.
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, fields, replace

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .channel import ChannelParams
from .client import AdaptationParams
from .control import Gains, SaturationBounds
from .engine import ExperimentPlan, SimConfig

TOP_KEYS = {"seed", "dt", "sample_interval", "audit"}
SECTIONS = {
    "plan": {f.name for f in fields(ExperimentPlan)},
    "channel": {f.name for f in fields(ChannelParams)},
    "controller": {"kp", "ki", "kd", "g_max", "gi_max"},
    "adaptation": {f.name for f in fields(AdaptationParams)},
    "media": {"n_videos", "video_duration", "ladder", "vbr_sigma"},
    "topology": {"area", "helpers_per_side"},
}


class ConfigError(ValueError):
    pass


def _check_keys(where: str, got, allowed) -> None:
    extra = sorted(set(got) - set(allowed))
    if extra:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(extra)}")


def from_dict(data: dict, base: SimConfig | None = None) -> SimConfig:
    """Overlay a parsed config mapping on ``base`` (defaults if omitted)."""
    cfg = base or SimConfig()
    _check_keys("top level", data, TOP_KEYS | set(SECTIONS))
    for name in SECTIONS:
        sec = data.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"[{name}] must be a table")
        _check_keys(f"[{name}]", sec, SECTIONS[name])
    try:
        pd = data.get("plan", {})
        if "kind" in pd and pd["kind"] != cfg.plan.kind:
            plan = ExperimentPlan.preset(**pd)  # a new kind starts from its preset
        else:
            plan = replace(cfg.plan, **pd)
        channel = replace(cfg.channel, **data.get("channel", {}))
        ctl = data.get("controller", {})
        gains = Gains(ctl.get("kp", cfg.gains.kp), ctl.get("ki", cfg.gains.ki), ctl.get("kd", cfg.gains.kd))
        bounds = SaturationBounds(ctl.get("g_max", cfg.bounds.g_max), ctl.get("gi_max", cfg.bounds.gi_max))
        adaptation = replace(cfg.adaptation, **data.get("adaptation", {}))
        media = dict(data.get("media", {}))
        if "ladder" in media:
            media["ladder"] = tuple(float(v) for v in media["ladder"])
        topo = dict(data.get("topology", {}))
        if "area" in topo:
            topo["area"] = tuple(float(v) for v in topo["area"])
            if len(topo["area"]) != 2:
                raise ConfigError("topology.area needs two numbers")
        top = {k: data[k] for k in TOP_KEYS if k in data}
        return replace(cfg, plan=plan, channel=channel, gains=gains, bounds=bounds, adaptation=adaptation,
                       **media, **topo, **top)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load(path, base: SimConfig | None = None) -> SimConfig:
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return from_dict(data, base)


def to_dict(cfg: SimConfig) -> dict:
    """Inverse of :func:`from_dict` (round-trips exactly)."""
    g, b = cfg.gains, cfg.bounds
    plan = asdict(cfg.plan)
    if plan["duration"] is None:
        plan.pop("duration")
    return {
        "seed": cfg.seed,
        "dt": cfg.dt,
        "sample_interval": cfg.sample_interval,
        "audit": cfg.audit,
        "plan": plan,
        "channel": asdict(cfg.channel),
        "controller": {"kp": g.kp, "ki": g.ki, "kd": g.kd, "g_max": b.g_max, "gi_max": b.gi_max},
        "adaptation": asdict(cfg.adaptation),
        "media": {"n_videos": cfg.n_videos, "video_duration": cfg.video_duration, "ladder": list(cfg.ladder),
                  "vbr_sigma": cfg.vbr_sigma},
        "topology": {"area": list(cfg.area), "helpers_per_side": cfg.helpers_per_side},
    }


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def config_hash(cfg: SimConfig, include_seed: bool = False) -> str:
    """SHA-256 of the canonical JSON form; the seed is left out by default so
    all repetitions of one configuration share a hash."""
    d = to_dict(cfg)
    if not include_seed:
        d.pop("seed")
    blob = json.dumps(_jsonable(d), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
