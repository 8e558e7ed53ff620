import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pidstream import oracles
from pidstream.control import (
    ControllerState,
    Gains,
    NoCrossing,
    SaturationBounds,
    antiwindup_rhs,
    check_stability,
    closed_form_unsaturated,
    fill_rate,
    integral_bounds,
    integrate_antiwindup,
    predict_finish,
    sampled_gain,
    update_integral,
)

PAPER_GAINS = Gains(-0.05, -1e-5, 0.0)
BOUNDS = SaturationBounds(10.0, 0.1)


def rk4_endpoint(s, g, b, horizon):
    x, y = oracles.rk4_antiwindup([s.x], [s.y], g.a, g.b, g.c, b.g_max, b.gi_max, [horizon])
    return float(x[0]), float(y[0])


def rk4_crossing(s, g, b, tau, horizon, h=1e-3):
    """First t with x(t) - x0 - tau + t >= 0 on the RK4 trajectory, refined
    by linear interpolation between the bracketing samples."""
    prev_t, prev_v = 0.0, -tau
    x, y = s.x, s.y
    t = 0.0
    while t < horizon:
        xn, yn = oracles.rk4_antiwindup([x], [y], g.a, g.b, g.c, b.g_max, b.gi_max, [h], h=h / 5)
        x, y, t = float(xn[0]), float(yn[0]), t + h
        v = x - s.x - tau + t
        if v >= 0:
            return prev_t + (t - prev_t) * (-prev_v) / (v - prev_v), x
        prev_t, prev_v = t, v
    return None


# --- stability ------------------------------------------------------------------------


@pytest.mark.parametrize(
    "g, expected",
    [
        (Gains(-0.05, -1e-5, 0.0), True),
        (Gains(-0.05, 1e-5, 0.0), False),
        (Gains(-0.05, -1e-5, 1.0), False),
        (Gains(0.05, 1e-5, 2.0), True),  # 1 - Kd < 0 flips both signs
    ],
)
def test_check_stability(g, expected):
    assert check_stability(g) is expected


def test_kd_one_rejected_by_closed_form():
    with pytest.raises(ValueError):
        closed_form_unsaturated(Gains(-1, -1, 1.0), 1.0, 1.0)


# --- closed form ----------------------------------------------------------------------


def test_case_one_example_against_rk4():
    g = Gains(-2.0, -1.0)  # a^2 + 4b = 0
    got = closed_form_unsaturated(g, 2.0, 1.0)
    _, xs = oracles.rk4_unsaturated(g.a, g.b, g.c, 2.0, 1.0, h=1e-4)
    assert got == pytest.approx(xs[-1, 0], abs=1e-9)
    assert got == pytest.approx(-math.exp(-1.0), abs=1e-12)


def test_case_two_example():
    g = Gains(-3.0, -2.0)
    t = np.linspace(0, 3, 7)
    assert np.allclose(closed_form_unsaturated(g, 1.0, t), 3 * np.exp(-2 * t) - 2 * np.exp(-t), atol=1e-13)
    assert closed_form_unsaturated(g, 1.0, 1.0) == pytest.approx(-0.3298, abs=5e-5)


def test_initial_value():
    for g in (Gains(-2, -1), Gains(-3, -2), Gains(-0.1, -0.4, 0.5)):
        assert closed_form_unsaturated(g, 7.5, 0.0) == 7.5


def test_oscillatory_branch_matches_rk4():
    g = Gains(-0.2, -0.5)
    t, xs = oracles.rk4_unsaturated(g.a, g.b, g.c, -12.0, 30.0, h=1e-3, record_every=100)
    cf = closed_form_unsaturated(g, -12.0, t)
    assert np.max(np.abs(cf - xs[:, 0])) / np.max(np.abs(xs)) < 1e-9


def test_case_one_and_two_agree_near_boundary():
    a = -0.8
    b_exact = -a * a / 4
    g1 = Gains(a, b_exact)
    g2 = Gains(a, b_exact + 0.25e-8)  # a^2 + 4b = 1e-8
    t = np.linspace(0, 20, 41)
    assert np.allclose(closed_form_unsaturated(g1, 5.0, t), closed_form_unsaturated(g2, 5.0, t), atol=1e-6)


def test_paper_gains_decay():
    # slow eigenvalue (a + sqrt(a^2 + 4b)) / 2 ~ -2e-4 /s: a 5000 s time constant
    g = PAPER_GAINS
    d = math.sqrt(g.a**2 + 4 * g.b)
    lam = 0.5 * (g.a + d)
    k_slow = (d * -20.0 + g.a * -20.0 - 2 * g.c) / (2 * d)
    assert closed_form_unsaturated(g, -20.0, 1e4) == pytest.approx(k_slow * math.exp(lam * 1e4), rel=1e-9)
    assert abs(closed_form_unsaturated(g, -20.0, 1e5)) < 1e-3 * 20.0


@given(st.floats(-1.0, -0.01), st.floats(-0.5, -1e-4), st.floats(-20, 20))
def test_stable_gains_converge(kp, ki, x0):
    g = Gains(kp, ki)
    if abs(g.a**2 + 4 * g.b) < 1e-6:
        return
    assert abs(closed_form_unsaturated(g, x0, 5e4)) < 1e-3 * max(abs(x0), 1.0)


# --- anti-windup system ---------------------------------------------------------------


def test_equilibrium_is_stationary():
    s = ControllerState.at_equilibrium(0.0, PAPER_GAINS)
    e = integrate_antiwindup(s, PAPER_GAINS, BOUNDS, 3.7)
    assert (e.x, e.y) == (0.0, PAPER_GAINS.c)
    assert sampled_gain(s, PAPER_GAINS, BOUNDS, 1.0) == 0.0


def test_deficit_example_against_rk4():
    s = ControllerState.at_equilibrium(-20.0, PAPER_GAINS)
    e = integrate_antiwindup(s, PAPER_GAINS, BOUNDS, 1.0)
    ref_x, ref_y = rk4_endpoint(s, PAPER_GAINS, BOUNDS, 1.0)
    assert e.x == pytest.approx(-19.0, abs=0.05)
    assert e.x == pytest.approx(ref_x, abs=1e-3)
    assert e.y == pytest.approx(ref_y, abs=1e-9)


def test_lower_clamp_branches():
    g = PAPER_GAINS
    lo, hi = integral_bounds(g, BOUNDS)
    # b < 0, x > 0: b*x < 0 pushes further down, so y stays at the clamp
    assert antiwindup_rhs(5.0, lo, g, BOUNDS)[1] == 0.0
    assert integrate_antiwindup(ControllerState(5.0, lo), g, BOUNDS, 1.0).y == lo
    # x < 0: b*x > 0, y leaves the clamp upward
    assert antiwindup_rhs(-5.0, lo, g, BOUNDS)[1] > 0
    assert integrate_antiwindup(ControllerState(-5.0, lo), g, BOUNDS, 1.0).y > lo
    assert antiwindup_rhs(-5.0, hi, g, BOUNDS)[1] == 0.0


def test_fill_rate_at_equilibrium_integral():
    # fresh client: output 1 + Kp*x
    assert fill_rate(ControllerState.at_equilibrium(-20.0, PAPER_GAINS), PAPER_GAINS, BOUNDS) == pytest.approx(2.0)
    assert fill_rate(ControllerState.at_equilibrium(-10.0, PAPER_GAINS), PAPER_GAINS, BOUNDS) == pytest.approx(1.5)
    assert fill_rate(ControllerState.at_equilibrium(-1e3, PAPER_GAINS), PAPER_GAINS, BOUNDS) == pytest.approx(10.0)
    assert fill_rate(ControllerState.at_equilibrium(1e3, PAPER_GAINS), PAPER_GAINS, BOUNDS) == 0.0


def test_sampled_gain_deficit_example():
    s = ControllerState.at_equilibrium(-20.0, PAPER_GAINS)
    om = sampled_gain(s, PAPER_GAINS, BOUNDS, 1.0)
    ref_x, _ = rk4_endpoint(s, PAPER_GAINS, BOUNDS, 1.0)
    assert om == pytest.approx(1.0, abs=0.05)
    assert om == pytest.approx(ref_x + 20.0, abs=1e-7)


def test_saturated_trajectory_matches_rk4():
    # starts deep in the upper saturation, leaves it, and hits the integral clamp
    g, b = Gains(-0.4, -0.02), SaturationBounds(3.0, 0.2)
    s = ControllerState(-30.0, g.c + 0.15)
    for h in (0.5, 4.0, 12.0):
        e = integrate_antiwindup(s, g, b, h)
        rx, ry = rk4_endpoint(s, g, b, h)
        assert e.x == pytest.approx(rx, abs=1e-7)
        assert e.y == pytest.approx(ry, abs=1e-7)


@given(
    st.floats(-0.5, -0.01), st.floats(-1e-2, -1e-6), st.floats(2.0, 10.0), st.floats(0.01, 1.0),
    st.floats(-30, 30), st.floats(0.0, 1.0), st.floats(0.05, 5.0), st.floats(0.05, 5.0),
)
def test_flow_invariants(kp, ki, g_max, gi_max, x, yfrac, h1, h2):
    g, b = Gains(kp, ki), SaturationBounds(g_max, gi_max)
    lo, hi = integral_bounds(g, b)
    s = ControllerState(x, lo + yfrac * (hi - lo))
    mid = integrate_antiwindup(s, g, b, h1)
    end = integrate_antiwindup(mid, g, b, h2)
    assert lo <= mid.y <= hi and lo <= end.y <= hi
    direct = integrate_antiwindup(s, g, b, h1 + h2)
    assert end.x == pytest.approx(direct.x, abs=1e-6)
    # constant fill rate omega + 1 lands on the same endpoint
    om = sampled_gain(s, g, b, h1)
    assert x + om * h1 == pytest.approx(mid.x, abs=1e-9)
    # fill rate stays in [0, g_max], so the buffer moves at most -1..g_max-1 per second
    assert -1.0 - 1e-9 <= om <= g_max - 1.0 + 1e-9


def test_update_integral_respects_clamp():
    lo, hi = integral_bounds(PAPER_GAINS, BOUNDS)
    y = PAPER_GAINS.c
    for _ in range(10_000):
        y = update_integral(y, -1e4, PAPER_GAINS, BOUNDS, 0.01)
    assert y == hi
    assert update_integral(hi, 5.0, PAPER_GAINS, BOUNDS, 0.01) < hi


# --- finish-time prediction -----------------------------------------------------------


def test_predict_finish_equilibrium():
    s = ControllerState.at_equilibrium(0.0, PAPER_GAINS, t=3.0)
    tf, om = predict_finish(s, PAPER_GAINS, BOUNDS, 2.0)
    assert tf - 3.0 == pytest.approx(2.0, abs=1e-6)
    assert om == pytest.approx(0.0, abs=1e-9)


def test_predict_finish_deficit_against_rk4():
    s = ControllerState.at_equilibrium(-20.0, PAPER_GAINS)
    tf, om = predict_finish(s, PAPER_GAINS, BOUNDS, 2.0)
    ref_t, ref_x = rk4_crossing(s, PAPER_GAINS, BOUNDS, 2.0, 5.0)
    assert tf == pytest.approx(1.0, abs=0.05)
    assert tf == pytest.approx(ref_t, abs=1e-5)
    assert om == pytest.approx((ref_x + 20.0) / ref_t, abs=1e-3)


def test_predict_finish_surplus_saturating_at_zero():
    g, b = Gains(-1.0, -0.01), BOUNDS
    s = ControllerState.at_equilibrium(10.0, g)
    assert fill_rate(s, g, b) == 0.0
    tf, _ = predict_finish(s, g, b, 2.0)
    ref_t, _ = rk4_crossing(s, g, b, 2.0, 120.0, h=5e-3)
    assert 0 < tf <= 120.0
    assert tf == pytest.approx(ref_t, abs=1e-4)


def test_predict_finish_no_crossing():
    g = Gains(0.05, -1e-5)  # unstable: a deficit pins the output at zero
    with pytest.raises(NoCrossing):
        predict_finish(ControllerState.at_equilibrium(-30.0, g), g, BOUNDS, 2.0)


def test_predict_finish_rejects_bad_tau():
    with pytest.raises(ValueError):
        predict_finish(ControllerState(0, 1), PAPER_GAINS, BOUNDS, 0.0)
