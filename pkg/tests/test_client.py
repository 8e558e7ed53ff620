import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pidstream.client import (
    AdaptationParams,
    BaselineSession,
    ClientSession,
    Phase,
    ThroughputMeter,
    compute_request_delay,
    estimate_throughput,
    round_down,
)
from pidstream.control import Gains, SaturationBounds
from pidstream.media import DEFAULT_LADDER, build_library

LADDER = np.asarray(DEFAULT_LADDER)
GAINS = Gains(-0.05, -1e-5)
BOUNDS = SaturationBounds()
DT = 0.01


def make(cls=ClientSession, sigma=0.0, t0=0.0, **kw):
    video = build_library(1, 600.0, 2.0, vbr_sigma=sigma, seed=0).videos[0]
    return cls(0, t0, video, 0, GAINS, BOUNDS, AdaptationParams(**kw))


# --- throughput -----------------------------------------------------------------------


def test_estimate_uniform_window():
    log = [(t, 0.02e6, 0.01) for t in np.arange(1, 501) * 0.01]  # 10 Mbit over 5 s
    assert estimate_throughput(log, 5.0, 5.0) == pytest.approx(2e6)


def test_estimate_empty_and_young_session():
    assert estimate_throughput([], 3.0, 5.0) == 0.0
    log = [(0.5 * k, 1e6, 0.5) for k in range(1, 5)]  # 4 Mbit over a 2 s old session
    assert estimate_throughput(log, 2.0, 5.0) == pytest.approx(2e6)


def test_estimate_ignores_idle_time():
    # 2 Mbit downloaded in 0.5 s, then 4.5 s of request delay
    assert estimate_throughput([(0.5, 2e6, 0.5)], 5.0, 5.0) == pytest.approx(4e6)
    with pytest.raises(ValueError):
        estimate_throughput([], 1.0, 0.0)


@given(st.lists(st.tuples(st.floats(0.001, 0.5), st.floats(0, 1e7), st.floats(0.001, 0.5)), max_size=40),
       st.floats(0.1, 10.0))
def test_meter_matches_reference(entries, window):
    t = 0.0
    log = []
    meter = ThroughputMeter(window)
    for gap, bits, busy in entries:
        t += gap
        log.append((t, bits, busy))
        meter.add(t, bits, busy)
        assert meter.estimate(t) == pytest.approx(estimate_throughput(log, t, window), rel=1e-9, abs=1e-6)


# --- decisions ------------------------------------------------------------------------


def test_round_down():
    assert round_down(2.0e6, LADDER) == 2
    assert round_down(2.25e6, LADDER) == 3
    assert round_down(0.3e6, LADDER) == 0
    assert round_down(9e6, LADDER) == 5


@pytest.mark.parametrize("x, ratio, expected", [(2.0, 0.25, 0.0), (4.0, 0.25, 2.0), (0.0, 0.25, 0.0), (-5.0, 1.0, 0.0)])
def test_request_delay_examples(x, ratio, expected):
    assert compute_request_delay(x, 2.0, ratio * 4e6, 4e6) == pytest.approx(expected)


def test_request_delay_without_estimate():
    assert compute_request_delay(5.0, 2.0, 1e6, 0.0) == 3.0


def _with_estimate(s, c, omega, r_prev):
    s.meter.add(0.0, c, 1.0)
    s._omega = lambda t: omega
    s.r_prev = r_prev
    return s


def test_select_quality_equilibrium():
    s = _with_estimate(make(), 2.0e6, 0.0, 2.0e6)
    rep, demand, r = s.select_quality(0.5)
    assert r == pytest.approx(2.0e6) and LADDER[rep] == 1.5e6 and demand == 1.5e6
    s = _with_estimate(make(), 2.25e6, 0.0, 2.25e6)
    rep, demand, _ = s.select_quality(0.5)
    assert LADDER[rep] == 2.25e6 and demand == 2.25e6


def test_select_quality_catch_up():
    s = _with_estimate(make(), 2.0e6, 1.0, 1.0e6)
    rep, demand, r = s.select_quality(0.5)
    assert r == pytest.approx(1.0e6)
    assert LADDER[rep] == 1.0e6
    assert demand == pytest.approx(2.0e6)  # r~ (1 + omega)


def test_select_quality_floor_and_divergence():
    s = _with_estimate(make(), 0.3e6, 0.0, 0.3e6)
    assert s.select_quality(0.5)[0] == 0
    s = _with_estimate(make(), 5e6, -1.5, 4.5e6)
    rep, demand, _ = s.select_quality(0.5)
    assert rep == 0 and demand == LADDER[0]


@given(st.floats(0.1e6, 20e6), st.floats(0.1e6, 20e6), st.floats(-0.9, 3.0))
def test_quality_monotone_in_throughput(c1, c2, omega):
    lo, hi = sorted((c1, c2))
    a = _with_estimate(make(), lo, omega, 1e6).select_quality(0.5)
    b = _with_estimate(make(), hi, omega, 1e6).select_quality(0.5)
    assert a[0] <= b[0]
    assert a[1] > 0 and b[1] > 0


def test_first_request_lowest_quality():
    s = make()
    ev = s.start(0.0)
    assert [e.kind for e in ev] == ["arrival", "request"]
    assert s.inflight.rep == 0 and s.r_prev == LADDER[0]
    assert s.phase is Phase.PREBUFFERING
    # fresh client 20 s below target asks for about twice the playback rate
    assert s.demand == pytest.approx(LADDER[0] * 2.0, rel=0.05)


# --- time evolution -------------------------------------------------------------------


def run_slots(s, t, n, rate):
    events = []
    for _ in range(n):
        events += s.advance(t, DT, rate * DT)
        t += DT
    return t, events


def test_startup_after_one_second():
    s = make()
    s.start(0.0)
    t, ev = run_slots(s, 0.0, 100, 1e6)  # first segment is 1 Mbit
    startup = [e for e in ev if e.kind == "startup"]
    assert len(startup) == 1
    assert startup[0].value == pytest.approx(1.0, abs=1e-9)
    assert s.startup_delay == pytest.approx(1.0)
    assert s.buffer == pytest.approx(2.0)


def test_no_playback_while_prebuffering():
    s = make()
    s.start(0.0)
    run_slots(s, 0.0, 50, 1e6)
    assert s.playhead == 0.0 and s.phase is Phase.PREBUFFERING


def test_underrun_then_resume_in_same_slot_as_completion():
    s = make()
    s.start(0.0)
    t, _ = run_slots(s, 0.0, 100, 1e6)
    # starve: 2 s of media drains, underrun
    t, ev = run_slots(s, t, 300, 0.0)
    kinds = [e.kind for e in ev]
    assert kinds.count("underrun") == 1 and s.phase is Phase.REBUFFERING
    under = next(e for e in ev if e.kind == "underrun")
    assert under.t == pytest.approx(3.0, abs=1e-9)
    playhead = s.playhead
    # deliver the in-flight segment in one go
    ev = s.advance(t, DT, s.inflight.remaining + 1.0)
    kinds = [e.kind for e in ev]
    assert "complete" in kinds and "resume" in kinds
    assert s.phase is not Phase.REBUFFERING
    assert s.playhead >= playhead


def test_segment_completion_mid_slot_leaves_unused_bits():
    s = make()
    s.start(0.0)
    ev = s.advance(0.0, DT, 5e6)  # far more than the 1 Mbit segment
    comp = next(e for e in ev if e.kind == "complete")
    assert comp.t == pytest.approx(0.0 + DT * 1e6 / 5e6)
    assert s.bits_acc == pytest.approx(1e6)


def test_request_delay_when_rounding_leaves_surplus():
    s = make()
    s.start(0.0)
    s.n_requests = 3
    s.downloaded = 24.0  # 4 s above target
    _with_estimate(s, 2.0e6, 0.0, 2.0e6)
    rep, _, r = s._decide(1.0)
    assert LADDER[rep] == 1.5e6 < r
    assert s.threshold == pytest.approx(compute_request_delay(4.0, 2.0, r, 2.0e6))
    assert s.threshold == pytest.approx(2.0)
    # exact rung: nothing rounded away, request right after completion
    s = make()
    s.start(0.0)
    s.n_requests = 3
    s.downloaded = 24.0
    _with_estimate(s, 2.25e6, 0.0, 2.25e6)
    s._decide(1.0)
    assert s.threshold == math.inf


def test_delay_phase_entered_and_left():
    s = make()
    s.start(0.0)
    s.inflight.remaining = 1.0
    s.downloaded = 26.0
    s.phase = Phase.PLAYING
    s.threshold = 3.0
    ev = s.advance(0.0, DT, 10.0)
    assert s.phase is Phase.REQUEST_DELAY and s.inflight is None
    assert [e.kind for e in ev][-1] == "delay"
    t = DT
    while s.inflight is None:
        s.advance(t, DT, 0.0)
        t += DT
    assert s.deviation <= 3.0 + 1e-9 and s.phase is Phase.PLAYING


@given(st.lists(st.floats(0.0, 6e6), min_size=1, max_size=60), st.integers(5, 60), st.floats(0.0, 0.4))
def test_session_invariants(rates, hold, sigma):
    s = make(sigma=sigma)
    s.start(0.0)
    t = 0.0
    last_playhead = 0.0
    n_underrun = n_resume = 0
    for rate in rates:
        for _ in range(hold):
            phase = s.phase
            before = s.playhead
            ev = s.advance(t, DT, rate * DT if s.inflight else 0.0)
            t += DT
            assert s.playhead >= last_playhead - 1e-12
            last_playhead = s.playhead
            assert s.downloaded == pytest.approx(s.playhead + s.buffer)
            assert s.buffer >= -1e-9
            if phase is Phase.PREBUFFERING and not any(e.kind == "startup" for e in ev):
                assert s.playhead == before
            if s.inflight is not None:
                assert s.demand > 0
                assert s.inflight.rate in LADDER
            n_underrun += sum(e.kind == "underrun" for e in ev)
            n_resume += sum(e.kind == "resume" for e in ev)
            assert n_resume <= n_underrun
    assert n_underrun - n_resume in (0, 1)
    assert (n_underrun - n_resume == 1) == (s.phase is Phase.REBUFFERING)


def test_baseline_picks_highest_rung_strictly_below_estimate():
    s = make(BaselineSession)
    s.start(0.0)
    s.meter.add(0.0, 2.25e6, 1.0)
    rep, demand, _ = s._decide(0.5)
    assert LADDER[rep] == 1.5e6 and demand == 1.5e6 and s.threshold == 0.0
    s.meter.add(0.1, 100e6, 1.0)
    assert LADDER[s._decide(0.5)[0]] == 4.5e6


def test_adaptation_params_validation():
    for bad in (dict(alpha=1.0), dict(alpha=0.0), dict(window=0.0), dict(tau=-1.0), dict(target=-1.0)):
        with pytest.raises(ValueError):
            AdaptationParams(**bad)
    assert math.isclose(AdaptationParams().target, 20.0)
