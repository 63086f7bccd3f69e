"""Longitudinal vehicle model: double-integrator step, bounds, time-to-collision.

One vehicle is a point mass on a 1-D road with state (position, velocity)
and acceleration input. The plant saturates velocity at its bounds; input
bounds are enforced by the caller (the optimizer treats them as hard
constraints, the plant rejects out-of-range inputs outright).
"""

from __future__ import annotations

import math
from dataclasses import dataclass


class CollisionError(RuntimeError):
    """Raised when the inter-vehicle gap becomes negative."""


@dataclass(frozen=True)
class VehicleState:
    position: float
    velocity: float

    def is_finite(self) -> bool:
        return math.isfinite(self.position) and math.isfinite(self.velocity)


@dataclass(frozen=True)
class ControlInput:
    acceleration: float


@dataclass(frozen=True)
class Bounds:
    """Box bounds on velocity and acceleration plus the step length."""

    v_min: float
    v_max: float
    u_min: float
    u_max: float
    dt: float

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError(f"require v_min < v_max, got [{self.v_min}, {self.v_max}]")
        if not (self.u_min < 0.0 < self.u_max):
            raise ValueError(f"require u_min < 0 < u_max, got [{self.u_min}, {self.u_max}]")
        if not self.dt > 0.0:
            raise ValueError(f"require dt > 0, got {self.dt}")

    def clamp_velocity(self, v: float) -> float:
        return min(max(v, self.v_min), self.v_max)


def step(s: VehicleState, u: ControlInput, b: Bounds) -> VehicleState:
    """Advance one step: position by exact kinematics, velocity saturated.

    position' = p + v*dt + 0.5*u*dt^2, velocity' = clamp(v + u*dt).
    Deterministic, no noise on the plant.
    """
    if not s.is_finite() or not math.isfinite(u.acceleration):
        raise ValueError("non-finite state or input")
    if not (b.u_min - 1e-12 <= u.acceleration <= b.u_max + 1e-12):
        raise ValueError(
            f"acceleration {u.acceleration} outside [{b.u_min}, {b.u_max}]"
        )
    dt = b.dt
    pos = s.position + s.velocity * dt + 0.5 * u.acceleration * dt * dt
    vel = b.clamp_velocity(s.velocity + u.acceleration * dt)
    return VehicleState(pos, vel)


def gap(ego: VehicleState, lead: VehicleState, vehicle_length: float = 0.0) -> float:
    """Free distance between the pair; negative means overlap."""
    return lead.position - ego.position - vehicle_length


def ttc(
    ego: VehicleState, lead: VehicleState, vehicle_length: float = 0.0
) -> float:
    """Time to collision: gap over closing speed, infinite when not closing.

    Raises CollisionError for a negative gap; the simulation treats that as
    a hard failure rather than a recoverable state.
    """
    d = gap(ego, lead, vehicle_length)
    if d < 0.0:
        raise CollisionError(f"negative gap {d:.3f} m")
    if lead.velocity >= ego.velocity:
        return math.inf
    return d / (ego.velocity - lead.velocity)
