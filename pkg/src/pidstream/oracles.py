"""Independent reference computations used for cross-checking.

Nothing here calls into the production solvers: the ODE references are
fixed-step RK4 loops vectorised over many trajectories, and the LP
references enumerate vertices or scan a grid of time-share fractions.
"""

from __future__ import annotations

import itertools
import math

import numpy as np

# --- ODE references ------------------------------------------------------------------


def rk4_unsaturated(a, b, c, x0, t_end: float, h: float = 0.005, record_every: int = 1):
    """Integrate x' = a x + b v - c, v' = x, v(0)=0 for arrays of (a, b, c, x0).

    Returns ``(times, xs)`` with ``xs`` of shape (len(times), n).
    """
    a, b, c, x = (np.atleast_1d(np.asarray(v, dtype=float)).copy() for v in np.broadcast_arrays(a, b, c, x0))
    v = np.zeros_like(x)
    n_steps = int(round(t_end / h))

    def f(x, v):
        return a * x + b * v - c, x

    times, out = [0.0], [x.copy()]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(1, n_steps + 1):
            k1x, k1v = f(x, v)
            k2x, k2v = f(x + 0.5 * h * k1x, v + 0.5 * h * k1v)
            k3x, k3v = f(x + 0.5 * h * k2x, v + 0.5 * h * k2v)
            k4x, k4v = f(x + h * k3x, v + h * k3v)
            x = x + h / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
            v = v + h / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)
            if k % record_every == 0:
                times.append(k * h)
                out.append(x.copy())
    return np.array(times), np.array(out)


def rk4_antiwindup(x0, y0, a, b, c, g_max, gi_max, horizon, h: float = 2e-4):
    """Fixed-step RK4 of the saturated system with the y clamp applied after
    each step.  All arguments broadcast; ``horizon`` may differ per entry
    (each trajectory stops at its own horizon, last step shortened)."""
    x, y, a, b, c, g_max, gi_max, horizon = (
        np.asarray(v, dtype=float).copy() for v in np.broadcast_arrays(x0, y0, a, b, c, g_max, gi_max, horizon)
    )
    lo, hi = c - gi_max, c + gi_max
    umin, umax = c - 1.0, g_max + c - 1.0

    def f(x, y):
        u = np.clip(a * x + y, umin, umax)
        bx = b * x
        dy = np.where(y <= lo, np.maximum(bx, 0.0), np.where(y >= hi, np.minimum(bx, 0.0), bx))
        return u - c, dy

    t = np.zeros_like(x)
    while True:
        step = np.minimum(h, horizon - t)
        if np.all(step <= 0):
            break
        step = np.maximum(step, 0.0)
        k1x, k1y = f(x, y)
        k2x, k2y = f(x + 0.5 * step * k1x, y + 0.5 * step * k1y)
        k3x, k3y = f(x + 0.5 * step * k2x, y + 0.5 * step * k2y)
        k4x, k4y = f(x + step * k3x, y + step * k3y)
        x = x + step / 6 * (k1x + 2 * k2x + 2 * k3x + k4x)
        y = np.clip(y + step / 6 * (k1y + 2 * k2y + 2 * k3y + k4y), lo, hi)
        t = t + step
    return x, y


# --- LP references -------------------------------------------------------------------


def _rank(values, q):
    s = sorted(values)
    return s[max(1, math.ceil(q * len(s) - 1e-9)) - 1]


def vertex_max(obj, G, hvec, tol: float = 1e-9):
    """max obj.z over {G z <= h} by enumerating all basic solutions.

    Returns ``(value, z)``; raises ValueError when nothing is feasible.
    """
    G = np.asarray(G, dtype=float)
    hvec = np.asarray(hvec, dtype=float)
    m, n = G.shape
    best, arg = -math.inf, None
    combos = np.array(list(itertools.combinations(range(m), n)))
    for chunk in np.array_split(combos, max(1, len(combos) // 4096)):
        M = G[chunk]
        rhs = hvec[chunk]
        det = np.linalg.det(M)
        ok = np.abs(det) > 1e-12
        if not np.any(ok):
            continue
        z = np.linalg.solve(M[ok], rhs[ok][..., None])[..., 0]
        feas = np.all(z @ G.T <= hvec + tol * (1 + np.abs(hvec)), axis=1)
        if not np.any(feas):
            continue
        vals = z[feas] @ obj
        i = int(np.argmax(vals))
        if vals[i] > best:
            best, arg = float(vals[i]), z[feas][i]
    if arg is None:
        raise ValueError("no feasible vertex")
    return best, arg


def _instance(users, rates, demands):
    """Flatten ``rates[u] = {h: rate}`` into link arrays (Mbit/s)."""
    links = [(h, i, rates[u][h] / 1e6) for i, u in enumerate(users) for h in sorted(rates[u])]
    helpers = sorted({h for h, _, _ in links})
    nu, nl = len(users), len(links)
    R = np.zeros((nu, nl))  # throughput map
    H = np.zeros((len(helpers), nl))
    for k, (h, i, r) in enumerate(links):
        R[i, k] = r
        H[helpers.index(h), k] = 1.0
    d = np.array([demands[u] for u in users], dtype=float) / 1e6
    return R, H, d


def cascade_by_vertices(users, rates, demands, slack: float = 1e-6) -> dict:
    """Three-stage cascade solved exactly by vertex enumeration.

    Returns theta, c_min (bit/s), total throughput (bit/s) and the per-user
    throughput of the stage-3 vertex found.
    """
    R, H, d = _instance(users, rates, demands)
    nu, nl = R.shape
    p10 = _rank(list(d), 0.1)
    raised = np.maximum(d, p10)
    eye = np.eye(nl)

    # stage 1: variables (alpha, t); -R alpha + t*raised <= 0
    G1 = np.block([[-R, raised[:, None]], [H, np.zeros((len(H), 1))], [-eye, np.zeros((nl, 1))],
                   [np.zeros((1, nl)), -np.ones((1, 1))]])
    h1 = np.r_[np.zeros(nu), np.ones(len(H)), np.zeros(nl), 0.0]
    theta, _ = vertex_max(np.r_[np.zeros(nl), 1.0], G1, h1)

    # stage 2: -R alpha + t <= 0, -R alpha <= -theta*raised
    G2 = np.block([[-R, np.ones((nu, 1))], [-R, np.zeros((nu, 1))], [H, np.zeros((len(H), 1))],
                   [-eye, np.zeros((nl, 1))], [np.zeros((1, nl)), -np.ones((1, 1))]])
    h2 = np.r_[np.zeros(nu), -theta * (1 - slack) * raised, np.ones(len(H)), np.zeros(nl), 0.0]
    cmin, _ = vertex_max(np.r_[np.zeros(nl), 1.0], G2, h2)

    # stage 3
    cap = max(2.0 * max(cmin, _rank(list(raised), 0.5)), 0.0)
    caps = np.maximum(cap, theta * raised)
    G3 = np.vstack([-R, -R, R, H, -eye])
    h3 = np.r_[-theta * (1 - slack) * raised, -np.full(nu, cmin * (1 - slack)), caps, np.ones(len(H)), np.zeros(nl)]
    total, alpha = vertex_max(R.sum(axis=0), G3, h3)
    return {"theta": theta, "c_min": cmin * 1e6, "total": total * 1e6, "throughput": R @ alpha * 1e6}


def free_dimensions(rates) -> int:
    return sum(len(r) for r in rates.values())


def _grid_stage(score, constraint, R, H, step: float, rounds: int = 6, reach: int = 5):
    """Maximise ``score(C)`` over time shares by exhaustive grid scans.

    The first scan covers the whole box; each later scan covers ``reach``
    cells around the previous optimum at a tenth of the step.  Constraints
    get a per-user tolerance of one grid cell (``step`` times the user's
    fastest link), which shrinks with the step.  Every stage of the cascade
    is a concave maximisation over a convex set, so the local refinement
    cannot miss the optimum.
    """
    nl = R.shape[1]
    lo, hi = np.zeros(nl), np.ones(nl)
    value = None
    for _ in range(rounds):
        axes = [np.arange(lo[i], hi[i] + step / 2, step) for i in range(nl)]
        A = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, nl)
        A = A[np.all(A @ H.T <= 1 + 1e-12, axis=1)]
        C = A @ R.T
        ok = constraint(C, step * R.max(axis=1))
        if not np.any(ok):
            raise ValueError("grid scan found no feasible point")
        vals = score(C[ok])
        k = int(np.argmax(vals))
        value, best = float(vals[k]), A[ok][k]
        lo = np.maximum(best - reach * step, 0.0)
        hi = np.minimum(best + reach * step, 1.0)
        step /= 10.0
    return value


def cascade_by_grid(users, rates, demands, step: float = 1e-3) -> dict:
    """Brute-force search over time shares (at most two links in total),
    starting from a regular grid of the given step."""
    R, H, d = _instance(users, rates, demands)
    if R.shape[1] > 2:
        raise ValueError("grid oracle limited to two links")
    p10 = _rank(list(d), 0.1)
    raised = np.maximum(d, p10)
    every = np.ones

    theta = _grid_stage(lambda C: np.min(C / raised, axis=1), lambda C, cell: every(len(C), bool), R, H, step)

    def floor_ok(C, cell):
        return np.all(C >= theta * raised - cell, axis=1)

    cmin = _grid_stage(lambda C: C.min(axis=1), floor_ok, R, H, step)
    cap = 2.0 * max(cmin, _rank(list(raised), 0.5))
    caps = np.maximum(cap, theta * raised)

    def stage3_ok(C, cell):
        return floor_ok(C, cell) & np.all(C >= cmin - cell, axis=1) & np.all(C <= caps + cell, axis=1)

    total = _grid_stage(lambda C: C.sum(axis=1), stage3_ok, R, H, step)
    return {"theta": theta, "c_min": cmin * 1e6, "total": total * 1e6}


def random_instance(rng: np.random.Generator, max_helpers: int = 2, max_users: int = 3):
    """Random small scheduling instance: ``(users, rates, demands)`` in bit/s."""
    nh = int(rng.integers(1, max_helpers + 1))
    nu = int(rng.integers(1, max_users + 1))
    users = list(range(nu))
    rates, demands = {}, {}
    for u in users:
        k = int(rng.integers(1, nh + 1))
        hs = sorted(rng.choice(nh, size=k, replace=False).tolist())
        rates[u] = {int(h): float(rng.uniform(2e6, 100e6)) for h in hs}
        demands[u] = float(rng.uniform(0.5e6, 9e6))
    return users, rates, demands, nh
