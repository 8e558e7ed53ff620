"""Dormand-Prince 5(4) integrator for small systems held as float tuples.

The controller ODE has two states and is integrated once per segment request,
so the per-call overhead matters more than vectorisation.
"""

from __future__ import annotations

from typing import Callable, Optional

State = tuple

_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)
_E = tuple(b5 - b4 for b5, b4 in zip(_B5, _B4))


class StepSizeUnderflow(RuntimeError):
    pass


def dopri_step(f: Callable, t: float, y: State, h: float) -> tuple[State, State]:
    """One step; returns (5th-order solution, error estimate)."""
    n = len(y)
    ks = []
    for i in range(7):
        if i == 0:
            yi = y
        else:
            a = _A[i]
            yi = tuple(y[j] + h * sum(a[m] * ks[m][j] for m in range(i)) for j in range(n))
        ks.append(f(t + _C[i] * h, yi))
    y5 = tuple(y[j] + h * sum(_B5[m] * ks[m][j] for m in range(7)) for j in range(n))
    err = tuple(h * sum(_E[m] * ks[m][j] for m in range(7)) for j in range(n))
    return y5, err


def _error_norm(err, y0, y1, atol, rtol):
    worst = 0.0
    for e, a, b in zip(err, y0, y1):
        sc = atol + rtol * max(abs(a), abs(b))
        worst = max(worst, abs(e) / sc)
    return worst


def integrate(
    f: Callable,
    t0: float,
    y0: State,
    t1: float,
    *,
    atol: float = 1e-8,
    rtol: float = 1e-6,
    h0: Optional[float] = None,
    project: Optional[Callable[[State], State]] = None,
    event: Optional[Callable[[float, State], float]] = None,
    event_tol: float = 1e-6,
    max_steps: int = 100_000,
):
    """Integrate ``y' = f(t, y)`` from ``t0`` to ``t1``.

    ``project`` is applied to the state after every accepted step (used for
    hard clamps).  If ``event`` is given, integration stops at the first
    upward zero crossing of ``event(t, y)`` located by bisection on the step
    length to ``event_tol``; the return value is then ``(t_event, y_event,
    True)``, otherwise ``(t1, y1, False)``.
    """
    span = t1 - t0
    if span <= 0:
        return t0, y0, False
    proj = project or (lambda s: s)
    h = min(span, h0 if h0 else 0.05 * span + 1e-3)
    t, y = t0, y0
    g_prev = event(t, y) if event is not None else None
    if event is not None and g_prev >= 0:
        return t, y, True
    for _ in range(max_steps):
        if t >= t1:
            break
        last = h >= t1 - t
        if last:
            h = t1 - t
        y_new, err = dopri_step(f, t, y, h)
        en = _error_norm(err, y, y_new, atol, rtol)
        if en > 1.0:
            h *= max(0.2, 0.9 * en ** -0.2)
            if h < 1e-14 * max(1.0, abs(t)):
                raise StepSizeUnderflow(f"step size underflow at t={t}")
            continue
        y_new = proj(y_new)
        t_new = t1 if last else t + h
        if event is not None:
            g_new = event(t_new, y_new)
            if g_new >= 0:
                lo, hi = 0.0, h
                y_hi = y_new
                while hi - lo > event_tol:
                    mid = 0.5 * (lo + hi)
                    y_mid = proj(dopri_step(f, t, y, mid)[0])
                    if event(t + mid, y_mid) >= 0:
                        hi, y_hi = mid, y_mid
                    else:
                        lo = mid
                return t + hi, y_hi, True
        t, y = t_new, y_new
        h *= min(5.0, 0.9 * en ** -0.2) if en > 0 else 5.0
    else:
        raise StepSizeUnderflow("maximum number of steps exceeded")
    return t1, y, False
