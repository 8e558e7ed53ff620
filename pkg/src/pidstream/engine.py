"""Slot-level simulation loop and experiment definitions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .channel import ChannelParams, Topology, user_links
from .client import PHASE_CODES, AdaptationParams, BaselineSession, ClientSession, Event
from .control import Gains, SaturationBounds
from .media import DEFAULT_LADDER, VideoLibrary, build_library
from .rng import substream
from .scheduler import (
    CascadeScheduler,
    SlotProblem,
    SolverFailure,
    audit_allocation,
    baseline_schedule,
    solve_cascade,
)

CLUSTER_LAMBDA = 0.2 * math.log(4.0)
KINDS = ("1", "1*", "2", "3")
SAMPLE_COLUMNS = ("t", "phase", "buffer_s", "buffer_min_s", "buffer_max_s", "rate_bps", "throughput_bps", "demand_bps")


@dataclass(frozen=True)
class ExperimentPlan:
    """Arrival/departure schedule of one experiment.

    ``steady`` is the time after the arrival phase (constant population for
    1 and 1*, churn for 2).  ``duration``, if set, overrides the total run
    length.
    """

    kind: str = "1"
    users: int = 40
    placement: str = "uniform"
    cluster_lambda: float = CLUSTER_LAMBDA
    arrival_rate: float = 10.0
    churn_rate: float = 2.0
    steady: float = 400.0
    duration: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment {self.kind!r}; expected one of {KINDS}")
        if self.placement not in ("uniform", "clustered"):
            raise ValueError(f"unknown placement {self.placement!r}")
        if self.users < 1 or self.arrival_rate <= 0 or self.churn_rate <= 0:
            raise ValueError("users and rates must be positive")
        if self.cluster_lambda <= 0:
            raise ValueError("cluster_lambda must be positive")

    @classmethod
    def preset(cls, kind: str, users: int | None = None, **kw) -> "ExperimentPlan":
        if kind == "3":
            base = dict(kind="3", users=1000, placement="clustered", arrival_rate=2.0, steady=0.0, duration=500.0)
        elif kind == "2":
            base = dict(kind="2", users=100)
        else:
            base = dict(kind=kind, users=100)
        if users is not None:
            base["users"] = users
        base.update(kw)
        return cls(**base)

    @property
    def baseline(self) -> bool:
        return self.kind == "1*"

    @property
    def arrival_end(self) -> float:
        """Time at which the initial arrival phase is over."""
        if self.kind == "3":
            return 0.0
        return self.users / self.arrival_rate

    @property
    def end_time(self) -> float:
        if self.duration is not None:
            return float(self.duration)
        if self.kind == "3":
            return self.users / self.arrival_rate
        return self.arrival_end + self.steady

    def arrival_times(self) -> list[float]:
        n = self.users
        times = [k / self.arrival_rate for k in range(n)]
        if self.kind == "2":
            t0 = self.arrival_end
            j = 0
            while t0 + j / self.churn_rate < self.end_time - 1e-9:
                times.append(t0 + j / self.churn_rate)
                j += 1
        return [t for t in times if t < self.end_time - 1e-9]


@dataclass(frozen=True)
class SimConfig:
    plan: ExperimentPlan = field(default_factory=ExperimentPlan)
    seed: int = 0
    dt: float = 0.01
    area: tuple = (50.0, 50.0)
    helpers_per_side: int = 5
    channel: ChannelParams = field(default_factory=ChannelParams)
    gains: Gains = field(default_factory=lambda: Gains(-0.05, -1e-5, 0.0))
    bounds: SaturationBounds = field(default_factory=SaturationBounds)
    adaptation: AdaptationParams = field(default_factory=AdaptationParams)
    n_videos: int = 6
    video_duration: float = 600.0
    ladder: tuple = DEFAULT_LADDER
    vbr_sigma: float = 0.25
    sample_interval: float = 0.1
    audit: bool = True

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.sample_interval < self.dt:
            raise ValueError("sample_interval must be at least one slot")
        if self.adaptation.tau < self.dt:
            raise ValueError("segment duration must exceed the slot length")

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, seed=seed)


@dataclass
class UserTrace:
    uid: int
    t_arrival: float
    position: tuple
    video: int
    start_segment: int
    t_departure: float = float("nan")
    samples: np.ndarray | None = None
    events: list = field(default_factory=list)
    _rows: list = field(default_factory=list, repr=False)


@dataclass
class RunTrace:
    seed: int
    plan: ExperimentPlan
    target: float
    tau: float
    dt: float
    end_time: float
    users: dict = field(default_factory=dict)
    n_solves: int = 0
    n_slots_scheduled: int = 0
    cap_overrides: int = 0
    violations: list = field(default_factory=list)
    bits_allocated: float = 0.0
    bits_delivered: float = 0.0
    allocations: list | None = None


def place_user(placement: str, area, rng: np.random.Generator, lam: float = CLUSTER_LAMBDA) -> tuple[float, float]:
    w, h = area
    if placement == "uniform":
        return float(rng.uniform(0, w)), float(rng.uniform(0, h))
    if placement != "clustered":
        raise ValueError(f"unknown placement {placement!r}")
    cx, cy = 0.5 * w, 0.5 * h
    while True:
        r = rng.exponential(1.0 / lam)
        phi = rng.uniform(0, 2 * math.pi)
        x, y = cx + r * math.cos(phi), cy + r * math.sin(phi)
        if 0 <= x <= w and 0 <= y <= h:
            return float(x), float(y)


def _slot_of(t: float, dt: float) -> int:
    return int(math.ceil(t / dt - 1e-9))


class Simulation:
    """Mutable world state; :meth:`step` advances one slot."""

    def __init__(self, config: SimConfig, library: VideoLibrary | None = None, dump_allocations: bool = False):
        self.cfg = config
        plan = config.plan
        self.topology = Topology.grid(config.helpers_per_side, config.area)
        self.library = library or build_library(
            config.n_videos, config.video_duration, config.adaptation.tau, config.ladder, config.vbr_sigma, config.seed
        )
        self.sessions: dict[int, ClientSession] = {}
        self.links: dict = {}
        self.rates: dict = {}
        self.scheduler = None if plan.baseline else CascadeScheduler()
        self.n_slots = _slot_of(plan.end_time, config.dt)
        self.slots_per_epoch = max(1, int(round(config.channel.refresh_period / config.dt)))
        self.sample_every = max(1, int(round(config.sample_interval / config.dt)))

        self.arrivals: dict[int, list[int]] = {}
        for uid, t in enumerate(plan.arrival_times()):
            self.arrivals.setdefault(_slot_of(t, config.dt), []).append(uid)
        self.departures: dict[int, int] = {}  # slot -> number of oldest users leaving
        if plan.kind == "2":
            for uid in range(plan.users, len(plan.arrival_times())):
                t = plan.arrival_times()[uid]
                s = _slot_of(t, config.dt)
                self.departures[s] = self.departures.get(s, 0) + 1

        self.trace = RunTrace(
            seed=config.seed, plan=plan, target=config.adaptation.target, tau=config.adaptation.tau,
            dt=config.dt, end_time=self.n_slots * config.dt,
            allocations=[] if dump_allocations else None,
        )
        self.slot = 0
        self._dirty = True
        self._key = None
        self._thr: dict = {}
        self._alloc = None

    # -- membership -----------------------------------------------------------------------

    def _arrive(self, uid: int, t: float) -> None:
        cfg = self.cfg
        pos = place_user(cfg.plan.placement, cfg.area, substream(cfg.seed, "placement", uid), cfg.plan.cluster_lambda)
        rng = substream(cfg.seed, "sessions", uid)
        vid = int(rng.integers(len(self.library.videos)))
        video = self.library.videos[vid]
        start = int(rng.integers(video.n_segments))
        cls = BaselineSession if cfg.plan.baseline else ClientSession
        s = cls(uid, t, video, start, cfg.gains, cfg.bounds, cfg.adaptation)
        self.sessions[uid] = s
        self._set_links(uid, t)
        ut = UserTrace(uid, t, pos, vid, start)
        self.trace.users[uid] = ut
        ut.events.extend(s.start(t))
        self._dirty = True

    def _set_links(self, uid: int, t: float) -> None:
        pos = self.trace.users[uid].position if uid in self.trace.users else None
        if pos is None:
            pos = place_user(self.cfg.plan.placement, self.cfg.area, substream(self.cfg.seed, "placement", uid),
                             self.cfg.plan.cluster_lambda)
        ul = user_links(self.topology, pos, self.cfg.channel, self.cfg.seed, uid, t)
        self.links[uid] = ul
        self.rates[uid] = {int(h): float(ul.rate[h]) for h in np.flatnonzero(ul.active)}

    def _depart(self, uid: int, t: float) -> None:
        self.sessions.pop(uid)
        self.links.pop(uid, None)
        self.rates.pop(uid, None)
        ut = self.trace.users[uid]
        ut.t_departure = t
        ut.events.append(Event(t, "departure"))
        self._dirty = True

    # -- scheduling -----------------------------------------------------------------------

    def _schedule(self, demands: dict) -> None:
        if self.cfg.plan.baseline:
            p = SlotProblem.build(demands, self.rates, self.topology.n_helpers)
            alloc = baseline_schedule(p)
        else:
            sched = self.scheduler
            if self._dirty:
                sched.set_universe({u: self.rates[u] for u in self.sessions}, self.topology.n_helpers)
            try:
                alloc = sched.solve(demands)
            except SolverFailure:
                p = SlotProblem.build(demands, self.rates, self.topology.n_helpers)
                alloc = solve_cascade(p)
                self.trace.violations.append((self.slot, "warm solver failed; cold solve used"))
            self.trace.n_solves += 1
            self.trace.cap_overrides += alloc.cap_overrides
        if self.cfg.audit:
            for v in audit_allocation(alloc, cascade=not self.cfg.plan.baseline):
                self.trace.violations.append((self.slot, v))
        self._alloc = alloc
        self._thr = alloc.as_dict()

    def step(self) -> None:
        cfg, tr = self.cfg, self.trace
        dt = cfg.dt
        k = self.slot
        t = k * dt

        # (1) membership
        for _ in range(self.departures.get(k, 0)):
            if self.sessions:
                self._depart(min(self.sessions, key=lambda u: (self.sessions[u].t_arrival, u)), t)
        for uid in self.arrivals.get(k, ()):
            self._arrive(uid, t)

        # (2) channel refresh on epoch boundaries
        if k > 0 and k % self.slots_per_epoch == 0:
            for uid in self.sessions:
                self._set_links(uid, t)
            self._dirty = True

        # (3)-(4) scheduling over users with a download in flight
        demands = {u: s.demand for u, s in self.sessions.items() if s.inflight is not None}
        key = tuple(demands.items())
        if self._dirty or key != self._key:
            self._schedule(demands)
            self._dirty = False
            self._key = key
            if tr.allocations is not None:
                a = self._alloc
                tr.allocations.append((k, a))
        if demands:
            tr.n_slots_scheduled += 1

        # (5)-(6) delivery and client advance
        thr = self._thr
        for uid, s in self.sessions.items():
            rate = thr.get(uid, 0.0) if s.inflight is not None else 0.0
            bits = rate * dt
            before = s.bits_acc
            ev = s.advance(t, dt, bits)
            tr.bits_allocated += bits
            tr.bits_delivered += s.bits_acc - before
            if ev:
                tr.users[uid].events.extend(ev)

        # (7) trace samples
        if (k + 1) % self.sample_every == 0:
            t1 = (k + 1) * dt
            span = self.sample_every * dt
            for uid, s in self.sessions.items():
                tr.users[uid]._rows.append((
                    t1, PHASE_CODES[s.phase], s.buffer, s.bmin, s.bmax, s.playing_rate,
                    s.bits_acc / span, s.demand if s.inflight is not None else 0.0,
                ))
                s.bits_acc = 0.0
                s.bmin = s.bmax = s.buffer
        self.slot += 1

    def finish(self) -> RunTrace:
        ncol = len(SAMPLE_COLUMNS)
        for ut in self.trace.users.values():
            ut.samples = np.asarray(ut._rows, dtype=float).reshape(-1, ncol)
            ut._rows = []
            ut.events.sort(key=lambda e: e.t)
        return self.trace


def run(config: SimConfig, library: VideoLibrary | None = None, dump_allocations: bool = False) -> RunTrace:
    sim = Simulation(config, library, dump_allocations)
    for _ in range(sim.n_slots):
        sim.step()
    return sim.finish()
