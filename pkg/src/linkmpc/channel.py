"""Ground-truth V2V delay field and packet bookkeeping.

The true packet delivery time is an unknown-to-the-controller function of
the pair's states: a constant baseline plus Gaussian bumps along the road
(evaluated at the pair midpoint) plus white noise. Delivery is quantized to
whole steps by rounding the delay up, so a packet never arrives earlier
than the schedule implied by its drawn delay.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import VehicleState


@dataclass(frozen=True)
class DelayBump:
    """One Gaussian degradation region: amplitude*exp(-(x-center)^2/(2*width^2))."""

    center: float
    amplitude: float
    width: float

    def __post_init__(self):
        if self.amplitude < 0.0 or self.width <= 0.0:
            raise ValueError("bump requires amplitude >= 0 and width > 0")


@dataclass
class ChannelField:
    """Spatial delay field with a private seeded noise stream."""

    base_delay: float = 0.1
    bumps: tuple[DelayBump, ...] = ()
    noise_std: float = 0.0
    rng_seed: int = 0
    _rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.base_delay < 0.0 or self.noise_std < 0.0:
            raise ValueError("base_delay and noise_std must be nonnegative")
        self.bumps = tuple(
            b if isinstance(b, DelayBump) else DelayBump(*b) for b in self.bumps
        )
        self._rng = np.random.default_rng(self.rng_seed)

    def mean_delay_at(self, midpoint: float) -> float:
        """Noise-free field value at a road position."""
        w = self.base_delay
        for b in self.bumps:
            z = (midpoint - b.center) / b.width
            w += b.amplitude * math.exp(-0.5 * z * z)
        return w


def true_delay(field: ChannelField, ego: VehicleState, lead: VehicleState) -> float:
    """Sample the realized delivery time for the pair, floored at zero."""
    midpoint = 0.5 * (ego.position + lead.position)
    w = field.mean_delay_at(midpoint)
    if field.noise_std > 0.0:
        w += field.noise_std * float(field._rng.standard_normal())
    return max(w, 0.0)


@dataclass(frozen=True)
class Packet:
    """A lead-vehicle plan: states for steps origin_time .. origin_time+N."""

    origin_time: int
    arrival_time: int
    states: tuple[VehicleState, ...]
    delay: float = 0.0  # drawn delivery time in seconds, kept for the trace

    def __post_init__(self):
        if self.arrival_time < self.origin_time:
            raise ValueError("packet arrives before it is sent")
        if not self.states:
            raise ValueError("packet carries no states")

    @property
    def horizon(self) -> int:
        return len(self.states) - 1


def transmit(
    field: ChannelField,
    packet_states: list[VehicleState],
    send_time: int,
    ego: VehicleState,
    lead: VehicleState,
    dt: float,
) -> Packet:
    """Send a plan through the channel; arrival is send + ceil(delay/dt).

    The ceiling makes delivery conservative: any positive delay costs at
    least one full step, zero delay arrives within the sending step.
    """
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    w = true_delay(field, ego, lead)
    arrival = send_time + math.ceil(w / dt)
    return Packet(send_time, arrival, tuple(packet_states), w)


class Mailbox:
    """Receiver-side packet store; only arrived packets are visible."""

    def __init__(self):
        self._packets: list[Packet] = []

    def deliver(self, p: Packet) -> None:
        self._packets.append(p)

    def arrived(self, now: int) -> list[Packet]:
        return [p for p in self._packets if p.arrival_time <= now]

    def __len__(self) -> int:
        return len(self._packets)


def latest_packet(mb: Mailbox, now: int) -> Packet | None:
    """Freshest arrived packet: max origin, tie-broken by arrival then order."""
    best = None
    best_key = None
    for i, p in enumerate(mb.arrived(now)):
        key = (p.origin_time, p.arrival_time, i)
        if best_key is None or key > best_key:
            best, best_key = p, key
    return best


def prune(p: Packet, now: int) -> list[VehicleState]:
    """Drop the states of a packet that are already in the past.

    Returns the states covering steps now .. origin_time+N, empty when the
    whole packet is stale.
    """
    drop = max(now - p.origin_time, 0)
    if drop > p.horizon:
        return []
    return list(p.states[drop:])


def effective_horizon(p: Packet, now: int, N: int) -> int:
    """Usable horizon from a packet at `now`, clamped into [0, N]."""
    return min(max(p.origin_time + N - now, 0), N)
