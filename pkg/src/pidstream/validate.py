"""Property and oracle checks bundled for the ``validate`` subcommand."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
from scipy.special import exp1

from . import oracles
from .channel import ChannelParams, link_rate, los_probability, pathloss_db
from .control import (
    Gains,
    SaturationBounds,
    ControllerState,
    check_stability,
    closed_form_unsaturated,
    sampled_gain,
)
from .rng import substream
from .scheduler import SlotProblem, audit_allocation, solve_cascade

RATE_CONSTANT = math.e * float(exp1(1.0)) / math.log(2.0)  # E[log2(1+X)], X ~ Exp(1)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.ok else 'FAIL'}] {self.name}: {self.detail} ({self.seconds:.1f} s)"


def _timed(fn):
    def wrapper(*args, **kw):
        t0 = time.perf_counter()
        res = fn(*args, **kw)
        res.seconds = time.perf_counter() - t0
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def random_stable_gains(rng, n: int, case_one: int = 5) -> list[Gains]:
    """Stable triples; the first ``case_one`` sit exactly on a^2 + 4b = 0."""
    out = []
    for i in range(n):
        kd = float(rng.choice([0.0, 0.5]))
        kp = float(rng.uniform(-1.0, -0.05))
        if i < case_one:
            ki = -kp * kp / (4.0 * (1.0 - kd))
        else:
            ki = float(rng.uniform(-0.5, -0.01))
        out.append(Gains(kp, ki, kd))
    return out


def random_unstable_gains(rng, n: int) -> list[Gains]:
    out = []
    for i in range(n):
        kd = float(rng.choice([0.0, 0.5]))
        kind = i % 3
        kp = float(rng.uniform(0.05, 1.0)) if kind in (0, 2) else float(rng.uniform(-1.0, -0.05))
        ki = float(rng.uniform(0.01, 0.5)) if kind in (1, 2) else float(rng.uniform(-0.5, -0.01))
        out.append(Gains(kp, ki, kd))
    return out


@_timed
def check_closed_form(seed: int = 0, n_gains: int = 50, n_x0: int = 10, rel_tol: float = 1e-6) -> CheckResult:
    """Closed-form unsaturated response vs RK4, decay for stable gains,
    growth (or no decay) for unstable ones."""
    rng = substream(seed, "validate", 1)
    gains = random_stable_gains(rng, n_gains)
    x0 = rng.uniform(-20, 20, size=(n_gains, n_x0))
    a = np.repeat([g.a for g in gains], n_x0)
    b = np.repeat([g.b for g in gains], n_x0)
    c = np.repeat([g.c for g in gains], n_x0)
    times, xs = oracles.rk4_unsaturated(a, b, c, x0.ravel(), 100.0, h=0.005, record_every=10)
    worst = 0.0
    decay_fail = 0
    for i, g in enumerate(gains):
        if not check_stability(g):
            return CheckResult("closed form", False, f"stable triple {g} rejected")
        for j in range(n_x0):
            col = i * n_x0 + j
            cf = closed_form_unsaturated(g, x0[i, j], times)
            err = np.max(np.abs(cf - xs[:, col])) / np.max(np.abs(xs[:, col]))
            worst = max(worst, err)
            if not abs(closed_form_unsaturated(g, x0[i, j], 1e4)) < 1e-3 * abs(x0[i, j]):
                decay_fail += 1

    bad = random_unstable_gains(rng, n_gains)
    xb = rng.uniform(-20, 20, size=n_gains)
    xb = np.where(np.abs(xb) < 1.0, 1.0, xb)
    _, xu = oracles.rk4_unsaturated([g.a for g in bad], [g.b for g in bad], [g.c for g in bad], xb, 100.0, h=0.005,
                                    record_every=20000)
    grow_fail = 0
    for k, g in enumerate(bad):
        if check_stability(g):
            return CheckResult("closed form", False, f"unstable triple {g} accepted")
        end_cf = closed_form_unsaturated(g, xb[k], 1e4)
        end_rk = xu[-1, k]
        cf_ok = not math.isfinite(end_cf) or abs(end_cf) >= 1e-3 * abs(xb[k])
        rk_ok = not math.isfinite(end_rk) or abs(end_rk) >= 1e-3 * abs(xb[k])
        if not (cf_ok and rk_ok):
            grow_fail += 1
    ok = worst < rel_tol and decay_fail == 0 and grow_fail == 0
    detail = (f"max rel err {worst:.2e} over {n_gains * n_x0} trajectories; "
              f"{decay_fail} stable non-decaying, {grow_fail} unstable converging")
    return CheckResult("closed form", ok, detail)


@_timed
def check_sampled_equivalence(seed: int = 0, n: int = 100, tol: float = 1e-6, dt: float = 0.01) -> CheckResult:
    """A constant fill rate of omega+1 over the horizon lands on the
    continuous anti-windup trajectory's endpoint."""
    rng = substream(seed, "validate", 2)
    rows = []
    for _ in range(n):
        g = Gains(float(rng.uniform(-0.5, -0.01)), float(-(10 ** rng.uniform(-6, -2))), 0.0)
        bnd = SaturationBounds(float(rng.uniform(2.0, 10.0)), float(rng.uniform(0.01, 1.0)))
        x = float(rng.uniform(-30, 30))
        y = float(rng.uniform(g.c - bnd.gi_max, g.c + bnd.gi_max))
        h = float(rng.uniform(0.1, 10.0))
        rows.append((g, bnd, x, y, h))
    omegas = [sampled_gain(ControllerState(x, y, 0.0), g, bnd, h) for g, bnd, x, y, h in rows]
    xr, _ = oracles.rk4_antiwindup(
        [r[2] for r in rows], [r[3] for r in rows], [r[0].a for r in rows], [r[0].b for r in rows],
        [r[0].c for r in rows], [r[1].g_max for r in rows], [r[1].gi_max for r in rows], [r[4] for r in rows],
    )
    worst = 0.0
    for (g, bnd, x, y, h), om, x_ref in zip(rows, omegas, xr):
        # sampled system: constant fill rate om+1 against unit playback, slot by slot
        steps = int(h // dt)
        xs = x
        for _ in range(steps):
            xs += (om + 1.0 - 1.0) * dt
        xs += (om + 1.0 - 1.0) * (h - steps * dt)
        worst = max(worst, abs(xs - x_ref))
    return CheckResult("sampled control", worst < tol, f"max endpoint gap {worst:.2e} s over {n} cases")


@_timed
def check_lp(seed: int = 0, n: int = 200, rel_tol: float = 1e-2) -> CheckResult:
    """Cascade optimum vs vertex enumeration (all instances) and grid search
    (instances with at most two links)."""
    rng = substream(seed, "validate", 3)
    worst = 0.0
    n_grid = 0
    audits = 0
    for _ in range(n):
        users, rates, demands, nh = oracles.random_instance(rng)
        alloc = solve_cascade(SlotProblem.build(demands, rates, nh))
        audits += len(audit_allocation(alloc))
        refs = [oracles.cascade_by_vertices(users, rates, demands)]
        if oracles.free_dimensions(rates) <= 2:
            refs.append(oracles.cascade_by_grid(users, rates, demands))
            n_grid += 1
        got = {"theta": alloc.theta, "c_min": alloc.c_min, "total": float(alloc.throughput.sum())}
        for ref in refs:
            for key, val in got.items():
                worst = max(worst, abs(val - ref[key]) / abs(ref[key]))
    ok = worst < rel_tol and audits == 0
    return CheckResult("LP cascade", ok, f"max rel diff {worst:.2e} ({n} instances, {n_grid} grid); {audits} violations")


@_timed
def check_channel(seed: int = 0, k: int = 100_000) -> CheckResult:
    problems = []

    def sig4(v, ref):
        return float(f"{v:.4g}") == float(f"{ref:.4g}")

    c = 20 * math.log10(5.0 / 4.0)
    cases = [
        (pathloss_db(3.0, True), 18.7 * math.log10(3) + 46.8 + c),
        (pathloss_db(1.0, True), 18.7 * math.log10(3) + 46.8 + c),
        (pathloss_db(3.0, False), 36.8 * math.log10(3) + 43.8 + c),
        (los_probability(2.0), 1.0),
        (los_probability(3.0), 1.0),
        (los_probability(10.0), 1 - 0.9 * (1 - (1.24 - 0.6) ** 3) ** (1 / 3)),
    ]
    for got, ref in cases:
        if not sig4(float(got), ref):
            problems.append(f"{float(got):.6g} != {ref:.6g}")
    params = ChannelParams(fading_samples=k)
    r = link_rate(1.0, [], params, substream(seed, "validate", 4))
    ref = params.bandwidth * RATE_CONSTANT
    rel = abs(r - ref) / ref
    if rel >= 0.01:
        problems.append(f"Monte-Carlo rate off by {rel:.2%}")
    detail = f"6 closed-form values, MC rate rel err {rel:.2e}" + (f"; {problems}" if problems else "")
    return CheckResult("channel", not problems, detail)


def run_all(seed: int = 0) -> list[CheckResult]:
    return [check_closed_form(seed), check_sampled_equivalence(seed), check_lp(seed), check_channel(seed)]
