"""Streaming client: throughput estimation, quality selection, request pacing
and playback accounting at slot granularity."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .control import (
    ControllerState,
    Gains,
    NoCrossing,
    SaturationBounds,
    predict_finish,
    update_integral,
)
from .media import Video


class Phase(str, Enum):
    PREBUFFERING = "prebuffering"
    PLAYING = "playing"
    REQUEST_DELAY = "request_delay"
    REBUFFERING = "rebuffering"


PHASE_CODES = {p: i for i, p in enumerate(Phase)}


class DivergentController(ArithmeticError):
    pass


@dataclass(frozen=True)
class AdaptationParams:
    alpha: float = 0.5  # EMA weight
    window: float = 5.0  # throughput averaging window T (s)
    target: float = 20.0  # target buffer (s)
    tau: float = 2.0  # segment duration (s)

    def __post_init__(self):
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.window <= 0 or self.tau <= 0:
            raise ValueError("window and tau must be positive")
        if self.target < 0:
            raise ValueError("target must be non-negative")


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    value: float = float("nan")


def estimate_throughput(log, t_now: float, window: float) -> float:
    """Mean throughput over the download time inside ``[t_now - window, t_now]``.

    ``log`` holds ``(t_end, bits, busy_seconds)`` entries; time with no
    segment in flight does not enter the average.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    bits = busy = 0.0
    for t, b, d in log:
        if t_now - window < t <= t_now + 1e-12:
            bits += b
            busy += d
    return bits / busy if busy > 0 else 0.0


class ThroughputMeter:
    """Sliding-window version of :func:`estimate_throughput`."""

    def __init__(self, window: float):
        self.window = window
        self.log: deque = deque()
        self._bits = 0.0
        self._busy = 0.0

    def add(self, t_end: float, bits: float, busy: float) -> None:
        self.log.append((t_end, bits, busy))
        self._bits += bits
        self._busy += busy

    def estimate(self, t_now: float) -> float:
        log = self.log
        while log and log[0][0] <= t_now - self.window:
            _, b, d = log.popleft()
            self._bits -= b
            self._busy -= d
        if not log:
            self._bits = self._busy = 0.0
            return 0.0
        return self._bits / self._busy if self._busy > 1e-12 else 0.0


def round_down(rate: float, ladder) -> int:
    """Index of the largest representation not above ``rate`` (lowest if none)."""
    idx = int(np.searchsorted(ladder, rate, side="right")) - 1
    return max(idx, 0)


def compute_request_delay(x: float, tau: float, r_target: float, c: float) -> float:
    """Deviation below which the next request may be issued."""
    if c > 0:
        third = x - (1.0 + r_target / c) * tau
    else:
        third = -math.inf
    return max(0.0, x - tau, third)


@dataclass
class InFlight:
    segment: int
    rep: int
    rate: float
    size: float
    remaining: float
    t_request: float


class ClientSession:
    """One user's streaming session.

    The engine calls :meth:`start` once and then :meth:`advance` every slot
    with the bits the scheduler delivered.  ``demand`` is the throughput
    request sent along with the current segment request.
    """

    baseline = False

    def __init__(
        self,
        uid: int,
        t_arrival: float,
        video: Video,
        start_segment: int,
        gains: Gains,
        bounds: SaturationBounds,
        params: AdaptationParams,
    ):
        self.uid = uid
        self.t_arrival = t_arrival
        self.video = video
        self.ladder = video.ladder
        self.next_segment = start_segment
        self.gains = gains
        self.bounds = bounds
        self.params = params
        self.meter = ThroughputMeter(params.window)

        self.phase = Phase.PREBUFFERING
        self.y = gains.c
        self.downloaded = 0.0  # seconds of media fully downloaded
        self.playhead = 0.0  # seconds of media played
        self.queue: deque = deque()  # (offset, rate) of segments not yet started
        self.inflight: InFlight | None = None
        self.n_requests = 0
        self.r_prev = float(self.ladder[0])
        self.demand = 0.0
        self.omega = 0.0
        self.threshold = 0.0
        self.startup_delay: float | None = None
        self.playing_rate = 0.0
        # per-sample aggregates, reset by the recorder
        self.bmin = self.bmax = 0.0
        self.bits_acc = 0.0

    # -- state -------------------------------------------------------------------------

    @property
    def buffer(self) -> float:
        return self.downloaded - self.playhead

    @property
    def deviation(self) -> float:
        return self.buffer - self.params.target

    def controller_state(self, t: float) -> ControllerState:
        return ControllerState(x=self.deviation, y=self.y, t=t)

    # -- decisions -----------------------------------------------------------------------

    def _omega(self, t: float) -> float:
        try:
            _, om = predict_finish(self.controller_state(t), self.gains, self.bounds, self.params.tau)
        except NoCrossing:
            om = 0.0
        return om

    def select_quality(self, t: float) -> tuple[int, float, float]:
        """Pick the next representation; returns ``(rep, demand, target_rate)``."""
        omega = self._omega(t)
        self.omega = omega
        c = self.meter.estimate(t)
        if 1.0 + omega <= 0:
            rep = 0
            return rep, float(self.ladder[0]), float(self.ladder[0])
        p = self.params
        r = (1.0 - p.alpha) * self.r_prev + p.alpha * c / (1.0 + omega)
        rep = round_down(r, self.ladder)
        return rep, float(self.ladder[rep]) * (1.0 + omega), r

    def _decide(self, t: float) -> tuple[int, float, float]:
        x = self.deviation
        if self.n_requests == 0:
            self.omega = self._omega(t)
            r0 = float(self.ladder[0])
            self.threshold = math.inf
            return 0, r0 * (1.0 + self.omega), r0
        rep, demand, r = self.select_quality(t)
        if self.ladder[rep] < r:
            # rounded down: hold back the next request to absorb the surplus
            self.threshold = compute_request_delay(x, self.params.tau, r, self.meter.estimate(t))
        else:
            self.threshold = math.inf
        return rep, demand, r

    def _request(self, t: float, ev: list) -> None:
        rep, demand, _ = self._decide(t)
        seg = self.next_segment % self.video.n_segments
        size = float(self.video.sizes[seg, rep])
        rate = float(self.ladder[rep])
        self.inflight = InFlight(seg, rep, rate, size, size, t)
        self.next_segment += 1
        self.n_requests += 1
        self.r_prev = rate
        self.demand = max(demand, 1e-9 * rate)
        if self.phase is Phase.REQUEST_DELAY:
            self.phase = Phase.PLAYING
        ev.append(Event(t, "request", rate))

    def start(self, t: float) -> list[Event]:
        ev = [Event(t, "arrival")]
        self._request(t, ev)
        self.bmin = self.bmax = self.buffer
        return ev

    # -- time evolution ------------------------------------------------------------------

    def _consume(self, t_start: float, duration: float, ev: list) -> None:
        p0 = self.playhead
        p1 = p0 + duration
        q = self.queue
        while q and q[0][0] < p1 - 1e-12:
            off, rate = q.popleft()
            self.playing_rate = rate
            ev.append(Event(t_start + max(0.0, off - p0), "play", rate))
        self.playhead = p1

    def advance(self, t0: float, dt: float, bits: float) -> list[Event]:
        ev: list[Event] = []
        t1 = t0 + dt
        tau = self.params.tau
        if not self.baseline:
            self.y = update_integral(self.y, self.deviation, self.gains, self.bounds, dt)

        tc = None
        fl = self.inflight
        if fl is not None:
            if bits >= fl.remaining:
                frac = fl.remaining / bits
                tc = t0 + frac * dt
                self.meter.add(tc, fl.remaining, frac * dt)
                self.bits_acc += fl.remaining
                self.inflight = None
                ev.append(Event(tc, "complete", fl.rate))
            else:
                fl.remaining -= bits
                self.meter.add(t1, bits, dt)
                self.bits_acc += bits

        B = self.buffer
        if self.phase in (Phase.PLAYING, Phase.REQUEST_DELAY):
            t_empty = t0 + B
            if tc is not None and tc <= t_empty:
                self.bmin = min(self.bmin, B - (tc - t0))
                self.bmax = max(self.bmax, B - (tc - t0) + tau)
                self.queue.append((self.downloaded, fl.rate))
                self.downloaded += tau
                self._consume(t0, dt, ev)
            elif t_empty >= t1:
                self._consume(t0, dt, ev)
                if tc is not None:
                    self.queue.append((self.downloaded, fl.rate))
                    self.downloaded += tau
                    self.bmax = max(self.bmax, self.buffer)
            else:
                self._consume(t0, B, ev)
                self.playhead = self.downloaded
                self.phase = Phase.REBUFFERING
                self.bmin = 0.0
                ev.append(Event(t_empty, "underrun"))
                if tc is not None:
                    self.queue.append((self.downloaded, fl.rate))
                    self.downloaded += tau
                    self.phase = Phase.PLAYING
                    ev.append(Event(tc, "resume", tc - t_empty))
                    self._consume(tc, t1 - tc, ev)
        elif tc is not None:
            self.queue.append((self.downloaded, fl.rate))
            self.downloaded += tau
            if self.phase is Phase.PREBUFFERING:
                self.startup_delay = tc - self.t_arrival
                ev.append(Event(tc, "startup", self.startup_delay))
            else:
                ev.append(Event(tc, "resume"))
            self.phase = Phase.PLAYING
            self.bmax = max(self.bmax, tau)
            self._consume(tc, t1 - tc, ev)

        if self.inflight is None:
            if self.deviation <= self.threshold:
                self._request(t1, ev)
            elif self.phase is Phase.PLAYING:
                self.phase = Phase.REQUEST_DELAY
                ev.append(Event(t1, "delay", self.threshold))

        b = self.buffer
        if b < self.bmin:
            self.bmin = b
        if b > self.bmax:
            self.bmax = b
        return ev


class BaselineSession(ClientSession):
    """Rate-based client: highest representation below the 5 s throughput
    average, downloads back to back until the buffer reaches its target."""

    baseline = True

    def _decide(self, t: float) -> tuple[int, float, float]:
        self.threshold = 0.0
        self.omega = 0.0
        if self.n_requests == 0:
            r0 = float(self.ladder[0])
            return 0, r0, r0
        c = self.meter.estimate(t)
        below = np.flatnonzero(self.ladder < c)
        rep = int(below[-1]) if below.size else 0
        rate = float(self.ladder[rep])
        return rep, rate, rate
