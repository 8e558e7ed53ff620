"""PID buffer controller: stability test, closed-form unsaturated response,
the saturated system with conditional-integration anti-windup, and the
sampled-control quantities derived from it.

Coordinates follow the usual normalisation: ``x`` is the buffer deviation
from its target (seconds), ``y`` the transformed integral state, and the
controller output (fill rate relative to playback) is ``a*x + y`` clamped to
the feasible range.  The equilibrium of the saturated system is ``(0, c)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ode import integrate

CASE_I_TOL = 1e-12
IMAG_TOL = 1e-9
ATOL = 1e-10
RTOL = 1e-10
EVENT_TOL = 1e-6
HORIZON_FACTOR = 60.0


class NoCrossing(RuntimeError):
    """The predicted download never finishes within the horizon guard."""


@dataclass(frozen=True)
class Gains:
    kp: float
    ki: float
    kd: float = 0.0

    def _den(self) -> float:
        if self.kd == 1.0:
            raise ValueError("K_d = 1 makes the closed loop degenerate")
        return 1.0 - self.kd

    @property
    def a(self) -> float:
        return self.kp / self._den()

    @property
    def b(self) -> float:
        return self.ki / self._den()

    @property
    def c(self) -> float:
        return 1.0 / self._den()


@dataclass(frozen=True)
class SaturationBounds:
    g_max: float = 10.0
    gi_max: float = 0.1

    def __post_init__(self):
        if not self.g_max > 1:
            raise ValueError("g_max must exceed 1")
        if not self.gi_max > 0:
            raise ValueError("gi_max must be positive")


@dataclass(frozen=True)
class ControllerState:
    x: float
    y: float
    t: float = 0.0

    @classmethod
    def at_equilibrium(cls, x: float, gains: Gains, t: float = 0.0) -> "ControllerState":
        """Integral state at its equilibrium value ``c`` (a fresh client)."""
        return cls(x=float(x), y=gains.c, t=t)


def check_stability(g: Gains) -> bool:
    if g.kd == 1.0:
        return False
    return g.a < 0 and g.b < 0


def closed_form_unsaturated(g: Gains, x0: float, t):
    """Solution of the unsaturated loop x' = a x + b y - c, y' = x, y(0)=0.

    Repeated-root case when a^2 + 4b vanishes, two exponentials otherwise
    (complex exponentials for the oscillatory case).
    """
    a, b, c = g.a, g.b, g.c
    t_arr = np.asarray(t, dtype=float)
    disc = a * a + 4.0 * b
    if abs(disc) <= CASE_I_TOL:
        with np.errstate(over="ignore", invalid="ignore"):
            x = (x0 + (0.5 * a * x0 - c) * t_arr) * np.exp(0.5 * a * t_arr)
    else:
        d = np.sqrt(complex(disc))
        k1 = (d * x0 - a * x0 + 2.0 * c) / (2.0 * d)
        k2 = (d * x0 + a * x0 - 2.0 * c) / (2.0 * d)
        with np.errstate(over="ignore", invalid="ignore"):
            xc = k1 * np.exp(0.5 * (a - d) * t_arr) + k2 * np.exp(0.5 * (a + d) * t_arr)
            re, im = np.real(xc), np.imag(xc)
            ok = np.isfinite(re) & np.isfinite(im)
            resid = np.abs(im[ok]) / np.maximum(1.0, np.abs(re[ok]))
        if resid.size and resid.max() > IMAG_TOL:
            raise ArithmeticError(f"imaginary residue {resid.max():.3g} in closed-form solution")
        x = re
    x = np.where(t_arr == 0.0, x0, x)
    return float(x) if x.ndim == 0 else x


def integral_bounds(g: Gains, bounds: SaturationBounds) -> tuple[float, float]:
    return g.c - bounds.gi_max, g.c + bounds.gi_max


def antiwindup_rhs(x: float, y: float, g: Gains, bounds: SaturationBounds) -> tuple[float, float]:
    a, b, c = g.a, g.b, g.c
    u = a * x + y
    u = min(max(u, c - 1.0), bounds.g_max + c - 1.0)
    bx = b * x
    lo, hi = c - bounds.gi_max, c + bounds.gi_max
    if y <= lo:
        dy = max(0.0, bx)
    elif y >= hi:
        dy = min(0.0, bx)
    else:
        dy = bx
    return u - c, dy


def fill_rate(s: ControllerState, g: Gains, bounds: SaturationBounds) -> float:
    """Requested download speed in seconds of media per second."""
    return antiwindup_rhs(s.x, s.y, g, bounds)[0] + 1.0


def _system(g: Gains, bounds: SaturationBounds):
    a, b, c = g.a, g.b, g.c
    lo, hi = c - bounds.gi_max, c + bounds.gi_max
    umin, umax = c - 1.0, bounds.g_max + c - 1.0

    def f(_t, s):
        x, y = s
        u = a * x + y
        if u < umin:
            u = umin
        elif u > umax:
            u = umax
        bx = b * x
        if y <= lo:
            dy = bx if bx > 0.0 else 0.0
        elif y >= hi:
            dy = bx if bx < 0.0 else 0.0
        else:
            dy = bx
        return (u - c, dy)

    def project(s):
        x, y = s
        return (x, lo if y < lo else hi if y > hi else y)

    return f, project


MODE_EPS = 1e-12
MODE_TOL = 1e-9
MAX_SWITCHES = 500


def _mode_event(x: float, y: float, g: Gains, bounds: SaturationBounds):
    """Event function that turns non-negative when the trajectory leaves the
    smooth region containing (x, y).

    The saturated system is piecewise linear; the embedded error estimate of
    an explicit RK pair is unreliable across a kink, so every switch of the
    output clamp or the integral clamp is located explicitly.
    """
    a, b, c = g.a, g.b, g.c
    lo, hi = c - bounds.gi_max, c + bounds.gi_max
    umin, umax = c - 1.0, bounds.g_max + c - 1.0
    u = a * x + y
    if u > umax:
        def ev_u(s):
            return umax - (a * s[0] + s[1]) - MODE_EPS
    elif u < umin:
        def ev_u(s):
            return (a * s[0] + s[1]) - umin - MODE_EPS
    else:
        def ev_u(s):
            v = a * s[0] + s[1]
            return max(v - umax, umin - v) - MODE_EPS

    bx = b * x
    if y <= lo and bx <= 0:
        def ev_y(s):
            return b * s[0] - MODE_EPS
    elif y >= hi and bx >= 0:
        def ev_y(s):
            return -b * s[0] - MODE_EPS
    else:
        def ev_y(s):
            return max(lo - s[1], s[1] - hi) - MODE_EPS

    return lambda _t, s: max(ev_u(s), ev_y(s))


def _trajectory(s: ControllerState, g: Gains, bounds: SaturationBounds, t_end: float, finish=None, finish_tol=EVENT_TOL):
    """Integrate from ``s`` to ``t_end`` region by region.

    Stops early at the first upward zero crossing of ``finish(t, state)``.
    Returns ``(t, x, y, hit)``.
    """
    f, project = _system(g, bounds)
    t, st = s.t, (s.x, s.y)
    switches = 0
    while t < t_end:
        if finish is not None and finish(t, st) >= 0:
            return t, st[0], st[1], True
        mode = _mode_event(st[0], st[1], g, bounds) if switches < MAX_SWITCHES else None
        if mode is None and finish is None:
            t_new, st, _ = integrate(f, t, st, t_end, atol=ATOL, rtol=RTOL, project=project)
            return t_new, st[0], st[1], False
        if mode is None:
            ev, tol = finish, finish_tol
        elif finish is None:
            ev, tol = mode, MODE_TOL
        else:
            ev, tol = (lambda tt, ss: max(mode(tt, ss), finish(tt, ss))), MODE_TOL
        t_new, st_new, hit = integrate(f, t, st, t_end, atol=ATOL, rtol=RTOL, project=project, event=ev, event_tol=tol)
        if not hit:
            return t_end, st_new[0], st_new[1], False
        if finish is not None and finish(t_new, st_new) >= 0:
            return t_new, st_new[0], st_new[1], True
        if t_new <= t:
            # already on a boundary: step across it without event handling
            t_new = min(t + MODE_TOL, t_end)
            _, st_new, _ = integrate(f, t, st, t_new, atol=ATOL, rtol=RTOL, project=project)
        t, st = t_new, st_new
        switches += 1
    return t_end, st[0], st[1], False


def integrate_antiwindup(s: ControllerState, g: Gains, bounds: SaturationBounds, dt: float) -> ControllerState:
    if dt <= 0:
        raise ValueError("dt must be positive")
    _, x, y, _ = _trajectory(s, g, bounds, s.t + dt)
    return ControllerState(x=x, y=y, t=s.t + dt)


def sampled_gain(s: ControllerState, g: Gains, bounds: SaturationBounds, t_next: float) -> float:
    """Constant relative fill rate minus one that lands on the continuous
    trajectory's state at ``t_next``."""
    if t_next <= s.t:
        raise ValueError("t_next must be after the state time")
    end = integrate_antiwindup(s, g, bounds, t_next - s.t)
    return (end.x - s.x) / (t_next - s.t)


def predict_finish(s: ControllerState, g: Gains, bounds: SaturationBounds, tau: float) -> tuple[float, float]:
    """Finish time of a ``tau``-second segment requested in state ``s``.

    Solves x(t_f) = x(t_s) + tau - (t_f - t_s) along the saturated
    trajectory and returns ``(t_f, omega)`` with omega the matching sampled
    gain.  Raises :class:`NoCrossing` past ``60 * tau``.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    x0, t0 = s.x, s.t

    def crossing(t, st):
        return st[0] - x0 - tau + (t - t0)

    tf, xf, _, hit = _trajectory(s, g, bounds, t0 + HORIZON_FACTOR * tau, finish=crossing)
    if not hit:
        raise NoCrossing(f"no download completion within {HORIZON_FACTOR * tau:g} s")
    return tf, (xf - x0) / (tf - t0)


def update_integral(y: float, x: float, g: Gains, bounds: SaturationBounds, dt: float) -> float:
    """Explicit Euler step of the integral state with measured deviation ``x``."""
    lo, hi = g.c - bounds.gi_max, g.c + bounds.gi_max
    dy = g.b * x * dt
    if y <= lo:
        dy = max(0.0, dy)
    elif y >= hi:
        dy = min(0.0, dy)
    y += dy
    return lo if y < lo else hi if y > hi else y

