"""Indoor small-cell channel: WINNER-II A1 pathloss, LOS switching and
ergodic link rates under Rayleigh fading with inter-cell interference."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .rng import substream

# (A, B, C, sigma_dB) of the A1 indoor scenario
LOS_COEFFS = (18.7, 46.8, 20.0, 3.0)
NLOS_COEFFS = (36.8, 43.8, 20.0, 4.0)
MIN_DISTANCE = 3.0


@dataclass(frozen=True)
class ChannelParams:
    f0: float = 5.0  # GHz
    bandwidth: float = 20e6  # Hz
    snr: float = 1e9  # transmit power over noise, same for every helper
    c_min: float = 2e6  # bit/s, links below this are not used
    fading_samples: int = 32
    refresh_period: float = 5.0  # s

    def __post_init__(self):
        if self.bandwidth <= 0 or self.snr <= 0:
            raise ValueError("bandwidth and snr must be positive")
        if self.c_min < 0:
            raise ValueError("c_min must be non-negative")
        if self.fading_samples < 1:
            raise ValueError("fading_samples must be >= 1")
        if self.f0 <= 0 or self.refresh_period <= 0:
            raise ValueError("f0 and refresh_period must be positive")


@dataclass
class Topology:
    helpers: np.ndarray  # (H, 2) meters
    area: tuple[float, float] = (50.0, 50.0)
    users: dict[int, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def grid(cls, per_side: int = 5, area: tuple[float, float] = (50.0, 50.0)) -> "Topology":
        """Helpers at the cell centres of a ``per_side`` x ``per_side`` grid."""
        w, h = area
        xs = (np.arange(per_side) + 0.5) * w / per_side
        ys = (np.arange(per_side) + 0.5) * h / per_side
        gx, gy = np.meshgrid(xs, ys, indexing="xy")
        return cls(helpers=np.column_stack([gx.ravel(), gy.ravel()]), area=(float(w), float(h)))

    @property
    def n_helpers(self) -> int:
        return len(self.helpers)

    def distances(self, pos) -> np.ndarray:
        return np.hypot(self.helpers[:, 0] - pos[0], self.helpers[:, 1] - pos[1])


@dataclass(frozen=True)
class LinkState:
    gain: float
    los: bool
    shadow_db: float
    rate: float
    active: bool


def pathloss_db(d, los, shadow_db=0.0, f0: float = 5.0):
    """A1 pathloss in dB, flat below 3 m.  Vectorised over ``d``/``los``."""
    d = np.maximum(np.asarray(d, dtype=float), MIN_DISTANCE)
    los = np.asarray(los, dtype=bool)
    a = np.where(los, LOS_COEFFS[0], NLOS_COEFFS[0])
    b = np.where(los, LOS_COEFFS[1], NLOS_COEFFS[1])
    c = np.where(los, LOS_COEFFS[2], NLOS_COEFFS[2])
    out = a * np.log10(d) + b + c * math.log10(0.25 * f0) + shadow_db
    return float(out) if out.ndim == 0 else out


def los_probability(d):
    d = np.asarray(d, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        inner = 1.24 - 0.6 * np.log10(np.maximum(d, MIN_DISTANCE))
        p = 1.0 - 0.9 * np.cbrt(1.0 - inner**3)
    p = np.where(d <= MIN_DISTANCE, 1.0, np.clip(p, 0.0, 1.0))
    return float(p) if p.ndim == 0 else p


def link_rate(signal: float, interferer_gains, params: ChannelParams, rng: np.random.Generator) -> float:
    """Monte-Carlo estimate of the ergodic rate (bit/s) of one link.

    ``signal`` and ``interferer_gains`` are received SNRs before fading
    (P * g).  Fading powers are i.i.d. Exp(1).
    """
    k = params.fading_samples
    interf = np.asarray(interferer_gains, dtype=float).reshape(-1)
    s = rng.exponential(size=k)
    if interf.size:
        noise = 1.0 + rng.exponential(size=(k, interf.size)) @ interf
    else:
        noise = 1.0
    return float(params.bandwidth * np.mean(np.log2(1.0 + signal * s / noise)))


def ergodic_rates(snr_gains: np.ndarray, params: ChannelParams, rng: np.random.Generator) -> np.ndarray:
    """Rates of all links of one user given per-helper mean SNRs.

    One K x H fading realization is shared across the user's links; each
    link treats every other helper as an interferer.
    """
    fading = rng.exponential(size=(params.fading_samples, len(snr_gains)))
    rx = fading * snr_gains
    total = rx.sum(axis=1, keepdims=True)
    sinr = rx / (1.0 + total - rx)
    return params.bandwidth * np.log2(1.0 + sinr).mean(axis=0)


@dataclass(frozen=True)
class UserLinks:
    """Array view of one user's links to every helper."""

    epoch: int
    distance: np.ndarray
    los: np.ndarray
    shadow_db: np.ndarray
    gain: np.ndarray
    rate: np.ndarray
    active: np.ndarray


def user_links(topology: Topology, pos, params: ChannelParams, seed: int, user_id: int, t: float) -> UserLinks:
    epoch = int(math.floor(t / params.refresh_period + 1e-9))
    rng = substream(seed, "channel", user_id, epoch)
    d = topology.distances(pos)
    los = rng.random(len(d)) < los_probability(d)
    sigma = np.where(los, LOS_COEFFS[3], NLOS_COEFFS[3])
    shadow = sigma * rng.standard_normal(len(d))
    gain = 10.0 ** (-0.1 * pathloss_db(d, los, shadow, params.f0))
    rate = ergodic_rates(params.snr * gain, params, rng)
    return UserLinks(epoch, d, los, shadow, gain, rate, rate >= params.c_min)


def refresh_links(topology: Topology, params: ChannelParams, t: float, seed: int) -> dict[tuple[int, int], LinkState]:
    """Link states of every (helper, user) pair at time ``t``.

    Pure in (topology, params, t, seed): LOS, shadowing and fading draws are
    keyed by (user, refresh epoch).  A link closer than 3 m is always LOS
    because its LOS probability is one.
    """
    out = {}
    for uid, pos in topology.users.items():
        ul = user_links(topology, pos, params, seed, uid, t)
        for h in range(topology.n_helpers):
            out[(h, uid)] = LinkState(
                gain=float(ul.gain[h]),
                los=bool(ul.los[h]),
                shadow_db=float(ul.shadow_db[h]),
                rate=float(ul.rate[h]),
                active=bool(ul.active[h]),
            )
    return out


def neighborhood(links: dict[tuple[int, int], LinkState], user_id: int) -> list[int]:
    return sorted(h for (h, u), s in links.items() if u == user_id and s.active)
