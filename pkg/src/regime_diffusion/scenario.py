"""Figure-eight pick-and-place reference.

The path is x = A sin(theta), y = sqrt(2) A sin(theta) cos(theta), z = 1.5 with
A = sqrt(2), which passes exactly through the pick point (1, 1) at
theta = pi/4 and the drop point (-1, -1) at theta = 7 pi/4.  Each leg between
stops uses quintic time scaling, so the vehicle is at rest at A, B and the
origin, and the leg duration is its arc length over the target speed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import quad

from .dataset import ReferenceSample
from .plant import NQ

AMPLITUDE = math.sqrt(2.0)
ALTITUDE = 1.5
PICK_POINT = np.array([1.0, 1.0, ALTITUDE])
DROP_POINT = np.array([-1.0, -1.0, ALTITUDE])
THETA_PICK = math.pi / 4
THETA_DROP = 7 * math.pi / 4
TUCK = np.radians([0.0, 90.0])
GRASP = np.radians([50.0, 50.0])
RELEASE = np.radians([-50.0, -50.0])
SPEEDS = (0.5, 1.0)
PROXIMITY = 0.05


def path(theta):
    """Position and its first two theta-derivatives, each (..., 3)."""
    th = np.asarray(theta, dtype=np.float64)
    A, B = AMPLITUDE, math.sqrt(2.0) * AMPLITUDE / 2  # sqrt(2) A sin cos = B sin 2theta
    zero = np.zeros_like(th)
    p = np.stack([A * np.sin(th), B * np.sin(2 * th), zero + ALTITUDE], axis=-1)
    dp = np.stack([A * np.cos(th), 2 * B * np.cos(2 * th), zero], axis=-1)
    ddp = np.stack([-A * np.sin(th), -4 * B * np.sin(2 * th), zero], axis=-1)
    return p, dp, ddp


def arc_length(theta0: float, theta1: float) -> float:
    val, _ = quad(lambda th: float(np.linalg.norm(path(th)[1])), theta0, theta1, limit=200)
    return val


def quintic(u):
    """Smoothstep of order five and its first two derivatives in u."""
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    return (
        u**3 * (10 - 15 * u + 6 * u * u),
        30 * u**2 * (1 - u) ** 2,
        60 * u * (1 - u) * (1 - 2 * u),
    )


@dataclass(frozen=True)
class Leg:
    t0: float
    duration: float
    start: float
    end: float


@dataclass(frozen=True)
class Blend:
    t0: float
    duration: float
    start: np.ndarray
    end: np.ndarray


@dataclass(frozen=True)
class EventWindow:
    kind: str  # "attach" | "detach"
    t_open: float
    t_close: float
    point: np.ndarray


@dataclass
class PickPlaceScenario:
    """Hover at the origin, fly to A, grasp, fly to B, release, return, hover."""

    speed: float = 0.5
    payload: float = 0.3
    hover: float = 2.0
    dwell: float = 1.0
    blend: float = 1.0
    legs: list[Leg] = field(init=False)
    blends: list[Blend] = field(init=False)
    events: list[EventWindow] = field(init=False)
    duration: float = field(init=False)

    def __post_init__(self):
        if self.speed <= 0:
            raise ValueError("speed must be positive")
        bounds = [(0.0, THETA_PICK), (THETA_PICK, THETA_DROP), (THETA_DROP, 2 * math.pi)]
        t, legs = self.hover, []
        for i, (a, b) in enumerate(bounds):
            T = arc_length(a, b) / self.speed
            legs.append(Leg(t, T, a, b))
            t += T + (self.dwell if i < 2 else 0.0)
        self.legs = legs
        self.duration = t + self.hover
        arrive_a = legs[0].t0 + legs[0].duration
        arrive_b = legs[1].t0 + legs[1].duration
        self.events = [
            EventWindow("attach", arrive_a, arrive_a + self.dwell, PICK_POINT),
            EventWindow("detach", arrive_b, arrive_b + self.dwell, DROP_POINT),
        ]
        self.blends = [
            Blend(max(0.0, arrive_a - self.blend), min(self.blend, arrive_a), TUCK, GRASP),
            Blend(arrive_a + self.dwell, self.blend, GRASP, RELEASE),
            Blend(arrive_b + self.dwell, self.blend, RELEASE, TUCK),
        ]

    @property
    def moving_time(self) -> float:
        return sum(leg.duration for leg in self.legs)

    @property
    def path_length(self) -> float:
        return arc_length(0.0, 2 * math.pi)

    def theta(self, t: float):
        """Path parameter and its first two time derivatives."""
        th, thd, thdd = 0.0, 0.0, 0.0
        for leg in self.legs:
            if t < leg.t0:
                break
            span = leg.end - leg.start
            s, sd, sdd = quintic((t - leg.t0) / leg.duration)
            th = leg.start + span * float(s)
            thd = span * float(sd) / leg.duration if t < leg.t0 + leg.duration else 0.0
            thdd = span * float(sdd) / leg.duration**2 if t < leg.t0 + leg.duration else 0.0
        return th, thd, thdd

    def joints(self, t: float):
        q, qd, qdd = TUCK.copy(), np.zeros(2), np.zeros(2)
        for b in self.blends:
            if t < b.t0:
                break
            s, sd, sdd = quintic((t - b.t0) / b.duration)
            inside = t < b.t0 + b.duration
            q = b.start + (b.end - b.start) * s
            qd = (b.end - b.start) * sd / b.duration if inside else np.zeros(2)
            qdd = (b.end - b.start) * sdd / b.duration**2 if inside else np.zeros(2)
        return q, qd, qdd

    def reference(self, t: float) -> ReferenceSample:
        th, thd, thdd = self.theta(t)
        p, dp, ddp = path(th)
        chi, chid, chidd = np.zeros(NQ), np.zeros(NQ), np.zeros(NQ)
        chi[:3], chid[:3], chidd[:3] = p, dp * thd, ddp * thd**2 + dp * thdd
        chi[6:], chid[6:], chidd[6:] = self.joints(t)
        return ReferenceSample(chi, chid, chidd)

    def mean_speed(self, samples: int = 20001) -> float:
        """Path-average speed over the moving phases, by numerical integration."""
        total_dist, total_time = 0.0, 0.0
        for leg in self.legs:
            ts = np.linspace(leg.t0, leg.t0 + leg.duration, samples)
            v = np.array([np.linalg.norm(self.reference(t).chid[:3]) for t in ts])
            total_dist += float(np.trapezoid(v, ts))
            total_time += leg.duration
        return total_dist / total_time
