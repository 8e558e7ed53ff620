"""Centralised per-slot transmission scheduling.

The joint scheme solves a three-stage LP cascade over the time-share
fractions ``alpha[h, u]``:

1. maximise the minimum ratio of throughput to (raised) demand,
2. with that ratio fixed, maximise the minimum absolute throughput,
3. with both fixed, maximise total throughput under per-user caps.

The baseline attaches each user to its best helper and splits that helper's
time equally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

STAGE_SLACK = 1e-6
MBPS = 1e6


class SolverFailure(RuntimeError):
    pass


def nearest_rank(values, q: float) -> float:
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise ValueError("empty sample")
    k = max(1, math.ceil(q * v.size - 1e-9))
    return float(v[k - 1])


def raise_demands(rho) -> np.ndarray:
    """Lift every demand to at least the 10th percentile (nearest rank)."""
    rho = np.asarray(rho, dtype=float)
    return np.maximum(rho, nearest_rank(rho, 0.1))


@dataclass
class SlotProblem:
    users: list  # user ids, in LP order
    demands: np.ndarray  # bit/s
    link_helper: np.ndarray  # helper index per link
    link_user: np.ndarray  # position in ``users`` per link
    link_rate: np.ndarray  # bit/s
    n_helpers: int
    unserved: list = field(default_factory=list)

    @classmethod
    def build(cls, demands: dict, rates: dict, n_helpers: int) -> "SlotProblem":
        """``demands``: uid -> bit/s; ``rates``: uid -> {helper: bit/s} of active links."""
        users, dem, lh, lu, lr, unserved = [], [], [], [], [], []
        for uid in demands:
            links = rates.get(uid, {})
            if not links:
                unserved.append(uid)
                continue
            pos = len(users)
            users.append(uid)
            dem.append(demands[uid])
            for h in sorted(links):
                lh.append(h)
                lu.append(pos)
                lr.append(links[h])
        p = cls(
            users=users,
            demands=np.asarray(dem, dtype=float),
            link_helper=np.asarray(lh, dtype=int),
            link_user=np.asarray(lu, dtype=int),
            link_rate=np.asarray(lr, dtype=float),
            n_helpers=n_helpers,
            unserved=unserved,
        )
        p.check()
        return p

    @property
    def n_users(self) -> int:
        return len(self.users)

    @property
    def n_links(self) -> int:
        return len(self.link_rate)

    def check(self) -> None:
        if np.any(self.demands <= 0):
            raise ValueError("demands must be positive")
        if np.any(self.link_rate <= 0):
            raise ValueError("link rates must be positive")
        if self.n_links and (self.link_helper.max() >= self.n_helpers or self.link_helper.min() < 0):
            raise ValueError("helper index out of range")

    def throughput(self, alpha: np.ndarray) -> np.ndarray:
        return np.bincount(self.link_user, weights=alpha * self.link_rate, minlength=self.n_users)

    def helper_load(self, alpha: np.ndarray) -> np.ndarray:
        return np.bincount(self.link_helper, weights=alpha, minlength=self.n_helpers)


@dataclass
class Allocation:
    problem: SlotProblem
    alpha: np.ndarray
    throughput: np.ndarray  # bit/s, aligned with problem.users
    theta: float = float("nan")
    c_min: float = float("nan")
    raised: np.ndarray | None = None
    caps: np.ndarray | None = None
    rho50: float = float("nan")
    cap_overrides: int = 0  # users whose C3 floor exceeded the plain C5 cap

    def as_dict(self) -> dict:
        return {uid: float(c) for uid, c in zip(self.problem.users, self.throughput)}


def empty_allocation(p: SlotProblem) -> Allocation:
    return Allocation(problem=p, alpha=np.zeros(p.n_links), throughput=np.zeros(p.n_users))


# --- LP plumbing ---------------------------------------------------------------------


@dataclass
class LPSpec:
    """maximise c.z subject to A z <= b, z >= 0."""

    c: np.ndarray
    A: np.ndarray
    b: np.ndarray
    name: str = ""

    def to_text(self) -> str:
        return json.dumps(
            {"name": self.name, "c": self.c.tolist(), "A": self.A.tolist(), "b": self.b.tolist()}
        )

    @classmethod
    def from_text(cls, text: str) -> "LPSpec":
        d = json.loads(text)
        n = len(d["c"])
        return cls(
            c=np.asarray(d["c"], dtype=float),
            A=np.asarray(d["A"], dtype=float).reshape(-1, n),
            b=np.asarray(d["b"], dtype=float),
            name=d.get("name", ""),
        )


def solve_lp(spec: LPSpec) -> tuple[np.ndarray, float]:
    res = linprog(-spec.c, A_ub=spec.A, b_ub=spec.b, bounds=(0, None), method="highs")
    if res.status != 0:
        raise SolverFailure(f"{spec.name or 'LP'}: {res.message}\n{spec.to_text()}")
    return res.x, float(-res.fun)


def _user_matrix(p: SlotProblem) -> np.ndarray:
    """(users x links) matrix mapping alpha to throughput in Mbit/s."""
    m = np.zeros((p.n_users, p.n_links))
    m[p.link_user, np.arange(p.n_links)] = p.link_rate / MBPS
    return m


def _helper_rows(p: SlotProblem) -> np.ndarray:
    used = np.unique(p.link_helper)
    m = np.zeros((len(used), p.n_links))
    for i, h in enumerate(used):
        m[i, p.link_helper == h] = 1.0
    return m


def ts1_spec(p: SlotProblem, raised: np.ndarray) -> LPSpec:
    cu = _user_matrix(p)
    hr = _helper_rows(p)
    A = np.block([
        [-cu, (raised / MBPS)[:, None]],
        [hr, np.zeros((hr.shape[0], 1))],
    ])
    b = np.r_[np.zeros(p.n_users), np.ones(hr.shape[0])]
    c = np.r_[np.zeros(p.n_links), 1.0]
    return LPSpec(c, A, b, "TS1")


def ts2_spec(p: SlotProblem, raised: np.ndarray, theta: float) -> LPSpec:
    cu = _user_matrix(p)
    hr = _helper_rows(p)
    ones = np.ones((p.n_users, 1))
    A = np.block([
        [-cu, ones],
        [-cu, np.zeros_like(ones)],
        [hr, np.zeros((hr.shape[0], 1))],
    ])
    floor = theta * (1 - STAGE_SLACK) * raised / MBPS
    b = np.r_[np.zeros(p.n_users), -floor, np.ones(hr.shape[0])]
    c = np.r_[np.zeros(p.n_links), 1.0]
    return LPSpec(c, A, b, "TS2")


def ts3_caps(raised: np.ndarray, theta: float, c_min: float) -> tuple[np.ndarray, float, int]:
    rho50 = nearest_rank(raised, 0.5)
    plain = 2.0 * max(c_min, rho50)
    floor = theta * raised
    caps = np.maximum(plain, floor)
    return caps, rho50, int(np.count_nonzero(floor > plain))


def ts3_spec(p: SlotProblem, raised: np.ndarray, theta: float, c_min: float, caps: np.ndarray) -> LPSpec:
    cu = _user_matrix(p)
    hr = _helper_rows(p)
    A = np.vstack([-cu, -cu, cu, hr])
    b = np.r_[
        -theta * (1 - STAGE_SLACK) * raised / MBPS,
        -np.full(p.n_users, c_min * (1 - STAGE_SLACK) / MBPS),
        caps / MBPS,
        np.ones(hr.shape[0]),
    ]
    c = p.link_rate / MBPS
    return LPSpec(c, A, b, "TS3")


def repair(p: SlotProblem, alpha: np.ndarray) -> np.ndarray:
    """Clamp solver noise so that C1 and C2 hold exactly."""
    alpha = np.where(alpha < 0, 0.0, alpha)
    load = p.helper_load(alpha)
    over = load > 1 + 1e-9
    if np.any(over):
        scale = np.where(over, 1.0 / np.where(load > 0, load, 1.0), 1.0)
        alpha = alpha * scale[p.link_helper]
    return alpha


def solve_cascade(p: SlotProblem) -> Allocation:
    """Reference implementation: three fresh LPs per call."""
    if p.n_users == 0:
        return empty_allocation(p)
    raised = raise_demands(p.demands)
    _, theta = solve_lp(ts1_spec(p, raised))
    _, c_min = solve_lp(ts2_spec(p, raised, theta))
    c_min *= MBPS
    caps, rho50, overrides = ts3_caps(raised, theta, c_min)
    z, _ = solve_lp(ts3_spec(p, raised, theta, c_min, caps))
    alpha = repair(p, z[: p.n_links])
    return Allocation(
        problem=p, alpha=alpha, throughput=p.throughput(alpha), theta=theta, c_min=c_min,
        raised=raised, caps=caps, rho50=rho50, cap_overrides=overrides,
    )


# --- warm-started cascade --------------------------------------------------------------


class CascadeScheduler:
    """Stateful cascade solver that keeps one HiGHS model per stage.

    The model covers a fixed *universe* of users and active links; per slot
    only bounds and coefficients change (which users have a download in
    flight and their demands), so each stage re-solves from the previous
    basis.  Rebuild by calling :meth:`set_universe` whenever users join or
    leave or link rates change.
    """

    def __init__(self):
        import highspy

        self._hs = highspy
        self._models = None
        self.users: list = []
        self.n_solves = 0

    def set_universe(self, rates: dict, n_helpers: int) -> None:
        """``rates``: uid -> {helper: bit/s} over active links."""
        hs = self._hs
        users = [u for u in rates if rates[u]]
        lh, lu, lr = [], [], []
        for i, u in enumerate(users):
            for h in sorted(rates[u]):
                lh.append(h)
                lu.append(i)
                lr.append(rates[u][h])
        self.users = users
        self.index = {u: i for i, u in enumerate(users)}
        self.n_helpers = n_helpers
        self.lh = np.asarray(lh, dtype=int)
        self.lu = np.asarray(lu, dtype=int)
        self.lr = np.asarray(lr, dtype=float)
        nl, nu = len(lr), len(users)
        self.nl, self.nu = nl, nu
        self.col_c = nl
        self.col_aux = nl + nu
        if nu == 0:
            self._models = None
            return
        helpers = np.unique(self.lh)
        hrow = {h: i for i, h in enumerate(helpers)}
        nh = len(helpers)
        self.row_def = nh
        self.row_cpl = nh + nu
        # columns: alpha (nl), c_u (nu), aux (1); rows: helpers, definitions, coupling
        cols = []
        for k in range(nl):
            cols.append([(hrow[self.lh[k]], 1.0), (nh + self.lu[k], -self.lr[k] / MBPS)])
        for i in range(nu):
            cols.append([(nh + i, 1.0), (nh + nu + i, 1.0)])
        cols.append([(nh + nu + i, -0.0) for i in range(nu)])
        starts, index, value = [0], [], []
        for col in cols:
            for r, v in col:
                index.append(r)
                value.append(v)
            starts.append(len(index))
        nrow = nh + 2 * nu
        ncol = nl + nu + 1
        inf = hs.kHighsInf
        row_lo = np.r_[np.full(nh, -inf), np.zeros(nu), np.zeros(nu)]
        row_hi = np.r_[np.ones(nh), np.zeros(nu), np.full(nu, inf)]
        models = []
        for stage in range(3):
            h = hs.Highs()
            h.setOptionValue("output_flag", False)
            h.setOptionValue("primal_feasibility_tolerance", 1e-9)
            h.setOptionValue("dual_feasibility_tolerance", 1e-9)
            lp = hs.HighsLp()
            lp.num_col_ = ncol
            lp.num_row_ = nrow
            cost = np.zeros(ncol)
            if stage < 2:
                cost[-1] = 1.0
            else:
                cost[nl : nl + nu] = 1.0
            lp.col_cost_ = cost
            lp.col_lower_ = np.zeros(ncol)
            lp.col_upper_ = np.zeros(ncol)
            lp.row_lower_ = row_lo
            lp.row_upper_ = row_hi
            lp.a_matrix_.format_ = hs.MatrixFormat.kColwise
            lp.a_matrix_.start_ = np.asarray(starts, dtype=np.int32)
            lp.a_matrix_.index_ = np.asarray(index, dtype=np.int32)
            lp.a_matrix_.value_ = np.asarray(value, dtype=float)
            lp.sense_ = hs.ObjSense.kMaximize
            h.passModel(lp)
            models.append(h)
        self._models = models
        self._coef = [np.zeros(nu), np.zeros(nu), np.zeros(nu)]

    def _set_coupling(self, stage: int, coef: np.ndarray) -> None:
        h = self._models[stage]
        old = self._coef[stage]
        for i in np.flatnonzero(old != coef):
            h.changeCoeff(int(self.row_cpl + i), int(self.col_aux), float(-coef[i]))
        self._coef[stage] = coef.copy()

    def _set_bounds(self, stage: int, lo: np.ndarray, hi: np.ndarray) -> None:
        h = self._models[stage]
        idx = np.arange(len(lo), dtype=np.int32)
        h.changeColsBounds(len(lo), idx, lo, hi)

    def _run(self, stage: int) -> tuple[np.ndarray, float]:
        h = self._models[stage]
        h.run()
        if h.getModelStatus() != self._hs.HighsModelStatus.kOptimal:
            raise SolverFailure(f"TS{stage + 1}: {h.modelStatusToString(h.getModelStatus())}")
        self.n_solves += 1
        return np.asarray(h.getSolution().col_value), h.getInfo().objective_function_value

    def solve(self, demands: dict) -> Allocation:
        """Solve for the users in ``demands`` (uid -> bit/s) that are in the universe."""
        active_uids = [u for u in demands if u in self.index]
        unserved = [u for u in demands if u not in self.index]
        if not active_uids or self._models is None:
            p = SlotProblem(
                users=[], demands=np.zeros(0), link_helper=np.zeros(0, int), link_user=np.zeros(0, int),
                link_rate=np.zeros(0), n_helpers=self.n_helpers if self._models else 0, unserved=unserved,
            )
            return empty_allocation(p)
        inf = self._hs.kHighsInf
        nu, nl = self.nu, self.nl
        pos = np.array([self.index[u] for u in active_uids])
        dem = np.array([demands[u] for u in active_uids], dtype=float)
        raised_active = raise_demands(dem)
        act = np.zeros(nu, dtype=bool)
        act[pos] = True
        raised = np.zeros(nu)
        raised[pos] = raised_active / MBPS
        link_on = act[self.lu]

        a_lo = np.zeros(nl)
        a_hi = np.where(link_on, inf, 0.0)

        # TS1
        self._set_coupling(0, raised)
        lo = np.r_[a_lo, np.zeros(nu), 0.0]
        hi = np.r_[a_hi, np.where(act, inf, 0.0), inf]
        self._set_bounds(0, lo, hi)
        _, theta = self._run(0)

        # TS2
        self._set_coupling(1, act.astype(float))
        floor = theta * (1 - STAGE_SLACK) * raised
        self._set_bounds(1, np.r_[a_lo, floor, 0.0], hi)
        _, c_min = self._run(1)

        # TS3
        caps_active, rho50, overrides = ts3_caps(raised_active, theta, c_min * MBPS)
        caps = np.zeros(nu)
        caps[pos] = caps_active / MBPS
        lower = np.maximum(floor, c_min * (1 - STAGE_SLACK))
        lower = np.where(act, lower, 0.0)
        self._set_bounds(2, np.r_[a_lo, lower, 0.0], np.r_[a_hi, caps, 0.0])
        z, _ = self._run(2)

        keep = link_on
        remap = np.full(nu, -1)
        remap[pos] = np.arange(len(pos))
        p = SlotProblem(
            users=active_uids, demands=dem, link_helper=self.lh[keep], link_user=remap[self.lu[keep]],
            link_rate=self.lr[keep], n_helpers=self.n_helpers, unserved=unserved,
        )
        alpha = repair(p, z[:nl][keep])
        return Allocation(
            problem=p, alpha=alpha, throughput=p.throughput(alpha), theta=theta, c_min=c_min * MBPS,
            raised=raised_active, caps=caps_active, rho50=rho50, cap_overrides=overrides,
        )


# --- baseline ------------------------------------------------------------------------


def best_helpers(p: SlotProblem) -> np.ndarray:
    """Index (into links) of each user's highest-rate link; ties -> lowest helper."""
    best = np.full(p.n_users, -1)
    for k in range(p.n_links):
        u = p.link_user[k]
        j = best[u]
        if j < 0 or p.link_rate[k] > p.link_rate[j] or (
            p.link_rate[k] == p.link_rate[j] and p.link_helper[k] < p.link_helper[j]
        ):
            best[u] = k
    return best


def baseline_schedule(p: SlotProblem) -> Allocation:
    if p.n_users == 0:
        return empty_allocation(p)
    best = best_helpers(p)
    alpha = np.zeros(p.n_links)
    attached = np.bincount(p.link_helper[best], minlength=p.n_helpers)
    alpha[best] = 1.0 / attached[p.link_helper[best]]
    return Allocation(problem=p, alpha=alpha, throughput=p.throughput(alpha))


# --- auditing ------------------------------------------------------------------------


def audit_allocation(alloc: Allocation, cascade: bool = True, rtol: float = STAGE_SLACK) -> list[str]:
    """Constraint violations of an allocation (empty list when feasible)."""
    p = alloc.problem
    out = []
    if p.n_users == 0:
        return out
    if np.any(alloc.alpha < 0):
        out.append("C2: negative time share")
    load = p.helper_load(alloc.alpha)
    if np.any(load > 1 + 1e-9):
        out.append(f"C1: helper load {load.max():.12g} > 1")
    c = p.throughput(alloc.alpha)
    if not np.allclose(c, alloc.throughput, rtol=1e-12, atol=1e-6):
        out.append("throughput does not match alpha")
    if not cascade:
        return out
    atol = 1.0  # bit/s
    raised = raise_demands(p.demands)
    if np.any(c < alloc.theta * (1 - rtol) * raised - atol):
        out.append(f"C3: min ratio {np.min(c / raised):.12g} < theta* {alloc.theta:.12g}")
    if np.any(c < alloc.c_min * (1 - rtol) - atol):
        out.append(f"C4: min throughput {c.min():.12g} < c_min* {alloc.c_min:.12g}")
    caps, _, _ = ts3_caps(raised, alloc.theta, alloc.c_min)
    if np.any(c > caps * (1 + rtol) + atol):
        out.append("C5: throughput above cap")
    return out
