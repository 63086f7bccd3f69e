"""Interval reachable sets for the ego vehicle and training-window selection.

For the velocity-clamped double integrator the one-step image of an axis-
aligned box under an interval of accelerations is again a box, and the
propagation below is exact: both position and velocity updates are monotone
in (pos, vel, u), so the corners map to the corners. The tube is used to
pick which training rows stay in the active GP window; the lead vehicle is
not boxed but pinned to its packet-predicted trajectory within a tolerance
band.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .dynamics import Bounds, VehicleState

log = logging.getLogger(__name__)

# lead-trajectory tolerance band: (meters, m/s)
DEFAULT_LEAD_TOL = (5.0, 1.0)


@dataclass(frozen=True)
class IntervalBox:
    pos_lo: float
    pos_hi: float
    vel_lo: float
    vel_hi: float

    def __post_init__(self):
        if self.pos_lo > self.pos_hi or self.vel_lo > self.vel_hi:
            raise ValueError(f"inverted interval: {self}")

    def contains(self, s: VehicleState) -> bool:
        return (self.pos_lo <= s.position <= self.pos_hi
                and self.vel_lo <= s.velocity <= self.vel_hi)

    def width(self) -> tuple[float, float]:
        return (self.pos_hi - self.pos_lo, self.vel_hi - self.vel_lo)

    @classmethod
    def at(cls, s: VehicleState) -> "IntervalBox":
        return cls(s.position, s.position, s.velocity, s.velocity)


@dataclass(frozen=True)
class ReachTube:
    """boxes[k] holds every state reachable in exactly k steps."""

    boxes: tuple[IntervalBox, ...]

    def __len__(self) -> int:
        return len(self.boxes)

    def __getitem__(self, k: int) -> IntervalBox:
        return self.boxes[k]

    @property
    def horizon(self) -> int:
        return len(self.boxes) - 1


def reach_one(b: IntervalBox, bounds: Bounds) -> IntervalBox:
    # arithmetic mirrors dynamics.step term for term so that constant
    # corner controls land bit-exactly on the propagated corners
    dt = bounds.dt
    pos_lo = b.pos_lo + b.vel_lo * dt + 0.5 * bounds.u_min * dt * dt
    pos_hi = b.pos_hi + b.vel_hi * dt + 0.5 * bounds.u_max * dt * dt
    vel_lo = bounds.clamp_velocity(b.vel_lo + bounds.u_min * dt)
    vel_hi = bounds.clamp_velocity(b.vel_hi + bounds.u_max * dt)
    return IntervalBox(pos_lo, pos_hi, vel_lo, vel_hi)


def reach_n(x0: VehicleState, n: int, bounds: Bounds) -> ReachTube:
    """Exact N-step interval tube; boxes[0] is degenerate at x0."""
    if n < 1:
        raise ValueError("horizon must be >= 1")
    boxes = [IntervalBox.at(x0)]
    for _ in range(n):
        boxes.append(reach_one(boxes[-1], bounds))
    return ReachTube(tuple(boxes))


def select_training(ts, tube: ReachTube, lead_pred: list[VehicleState],
                    lead_tol: tuple[float, float] = DEFAULT_LEAD_TOL,
                    start_step: int = 0) -> list[int]:
    """Indices of training rows inside the tube and near the lead prediction.

    A row tagged step k is tested against tube box k - start_step on its ego
    part and against lead_pred at the same offset on its lead part. Offsets
    past the end of lead_pred (stale packet, shrunk horizon) select nothing.
    Returned indices ascend by (step_tag, row index).
    """
    pos_tol, vel_tol = lead_tol
    depth = min(tube.horizon, len(lead_pred) - 1)
    picked = []
    for i in range(len(ts)):
        k = int(ts.step_tags[i]) - start_step
        if k < 0 or k > depth:
            continue
        ego_pos, ego_vel, lead_pos, lead_vel = ts.inputs[i]
        box = tube[k]
        if not (box.pos_lo <= ego_pos <= box.pos_hi
                and box.vel_lo <= ego_vel <= box.vel_hi):
            continue
        ref = lead_pred[k]
        if (abs(lead_pos - ref.position) <= pos_tol
                and abs(lead_vel - ref.velocity) <= vel_tol):
            picked.append(i)
    picked.sort(key=lambda i: (int(ts.step_tags[i]), i))
    if not picked:
        log.info("reachable-window selection empty; caller should use the prior")
    return picked
