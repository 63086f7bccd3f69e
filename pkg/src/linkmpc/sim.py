"""Scenario orchestration: training data, closed-loop runs, trace logging.

A scenario couples a constant-speed lead, a follower under the channel-aware
controller, and a spatial delay field. Every step the lead broadcasts its
true future trajectory; the packet's delay is drawn from the field at the
pair's current midpoint, so the follower's own position shapes both what it
knows and what the run pays in realized delay.

Paired runs (lam = 0 baseline vs channel-aware) share the data seed and the
field's noise stream draw-for-draw, so their realized delays differ only
through the trajectories themselves.
"""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from .channel import ChannelField, DelayBump, Mailbox, transmit, true_delay
from .dynamics import Bounds, CollisionError, VehicleState, gap
from .gp import Hyperparameters, TrainingSet, aggregate, posterior
from .mpc import Controller, Weights

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A scenario config violated one of its invariants."""


@dataclass
class ScenarioConfig:
    """Every knob of a run, JSON round-trippable for reproducibility."""

    road_length: float = 600.0
    lead_velocity: float = 5.0
    lead_start: float = 15.0
    ego_start: tuple = (0.0, 5.0)
    v_ref: float = 5.0
    v_nominal: float | None = None  # tag progress speed; None -> lead_velocity
    horizon: int = 10
    dt: float = 1.0
    v_min: float = 3.0
    v_max: float = 10.0
    u_min: float = -3.0
    u_max: float = 2.0
    phi: float = 2.0
    weights: dict = field(default_factory=lambda: {
        "r1": [0.05, 0.2], "r2": [0.02, 0.3], "r3": 0.1,
        "q": None, "gap_ref": 10.0})
    lam: float = 10.0
    nu: int = 5
    r: int = 1200
    lead_tol: tuple = (5.0, 1.0)
    gap_band: tuple = (2.0, 40.0)
    base_delay: float = 0.1
    noise_std: float = 0.01
    field_seed: int = 7
    bumps: list = field(default_factory=lambda: [
        {"center": 300.0, "amplitude": 3.0, "width": 30.0}])
    hyper: dict = field(default_factory=lambda: {
        "signal_var": 1.0, "length_scales": [15.0, 5.0, 15.0, 5.0],
        "noise_var": 1e-4})
    data_seed: int = 1
    max_steps: int = 120
    prior_mean: float | None = None
    refresh_every: int = 100
    fallback_speed_frac: float = 0.8
    vehicle_length: float = 0.0

    def validate(self) -> None:
        if self.road_length <= 0:
            raise ConfigError("road_length must be positive")
        if self.r < self.nu * (self.horizon + 1):
            raise ConfigError(
                f"r={self.r} violates r >= nu*(N+1)={self.nu * (self.horizon + 1)}")
        if self.nu < 1:
            raise ConfigError("nu must be at least 1")
        if self.gap_band[0] >= self.gap_band[1]:
            raise ConfigError("gap_band must be an increasing pair")
        self.make_bounds()
        self.make_field()
        self.make_weights()
        self.make_hyper()

    def make_bounds(self) -> Bounds:
        return Bounds(self.v_min, self.v_max, self.u_min, self.u_max, self.dt)

    def make_field(self) -> ChannelField:
        bumps = tuple(DelayBump(b["center"], b["amplitude"], b["width"])
                      for b in self.bumps)
        return ChannelField(base_delay=self.base_delay, bumps=bumps,
                            noise_std=self.noise_std, rng_seed=self.field_seed)

    def make_weights(self) -> Weights:
        w = self.weights
        q = w.get("q")
        return Weights(r1=tuple(w["r1"]), r2=tuple(w["r2"]), r3=float(w["r3"]),
                       q=None if q is None else tuple(q),
                       gap_ref=float(w.get("gap_ref", 10.0)))

    def make_hyper(self) -> Hyperparameters:
        h = self.hyper
        return Hyperparameters(float(h["signal_var"]),
                               tuple(float(v) for v in h["length_scales"]),
                               float(h["noise_var"]))

    @property
    def nominal_speed(self) -> float:
        return self.v_nominal if self.v_nominal is not None else self.lead_velocity

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        cfg = cls(**d)
        for key in ("ego_start", "lead_tol", "gap_band"):
            setattr(cfg, key, tuple(getattr(cfg, key)))
        return cfg

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def generate_training_data(cfg: ScenarioConfig, out_path=None) -> TrainingSet:
    """Sample delay observations over the road and tag them by nominal step.

    Ego states are uniform over the road and velocity box; the lead is
    placed a plausible gap ahead with its speed jittered inside the
    selection tolerance. Deterministic under (data_seed, field_seed).
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.data_seed)
    fld = cfg.make_field()
    tag_speed = cfg.nominal_speed * cfg.dt
    if tag_speed <= 0:
        raise ConfigError("nominal progress speed must be positive")
    inputs = np.empty((cfg.r, 4))
    targets = np.empty(cfg.r)
    tags = np.empty(cfg.r, dtype=int)
    for i in range(cfg.r):
        ego_pos = rng.uniform(0.0, cfg.road_length)
        ego_vel = rng.uniform(cfg.v_min, cfg.v_max)
        lead_pos = ego_pos + rng.uniform(*cfg.gap_band)
        lead_vel = cfg.lead_velocity + rng.uniform(-cfg.lead_tol[1],
                                                   cfg.lead_tol[1])
        ego = VehicleState(ego_pos, ego_vel)
        lead = VehicleState(lead_pos, lead_vel)
        inputs[i] = aggregate(ego, lead)
        targets[i] = true_delay(fld, ego, lead)
        tags[i] = int(math.floor(ego_pos / tag_speed))
    ts = TrainingSet(inputs=inputs, targets=targets, step_tags=tags)
    if out_path is not None:
        ts.to_csv(out_path)
    return ts


TRACE_HEADER = ("time,ego_pos,ego_vel,lead_pos,lead_vel,accel,n_eff,"
                "packet_origin,window_size,gp_mean,realized_delay,"
                "cost_tracking,cost_reference,cost_effort,cost_terminal,"
                "cost_channel,cost_total,iterations,sync_seconds,converged,"
                "event")


@dataclass
class TraceRow:
    time: int
    ego_pos: float
    ego_vel: float
    lead_pos: float
    lead_vel: float
    accel: float
    n_eff: int
    packet_origin: int  # -1 when no packet was usable
    window_size: int
    gp_mean: float
    realized_delay: float
    cost_tracking: float
    cost_reference: float
    cost_effort: float
    cost_terminal: float
    cost_channel: float
    cost_total: float
    iterations: int
    sync_seconds: float
    converged: bool
    event: str = ""


@dataclass
class ScenarioTrace:
    rows: list
    config: dict
    collided: bool = False

    def __len__(self) -> int:
        return len(self.rows)

    def gaps(self) -> np.ndarray:
        return np.array([r.lead_pos - r.ego_pos for r in self.rows])

    def summary(self, lam_eval: float | None = None) -> dict:
        """Headline run quantities; delay cost uses y(w) = lam_eval * w^2."""
        if lam_eval is None:
            lam_eval = self.config.get("lam", 0.0)
        gaps = self.gaps()
        vels = np.array([r.ego_vel for r in self.rows])
        accs = np.array([r.accel for r in self.rows])
        delays = np.array([r.realized_delay for r in self.rows])
        region = self._bump_region()
        in_region = np.array([region[0] <= r.ego_pos <= region[1]
                              for r in self.rows])
        return {
            "steps": len(self.rows),
            "collided": self.collided,
            "min_gap": float(gaps.min()) if len(gaps) else math.nan,
            "max_gap": float(gaps.max()) if len(gaps) else math.nan,
            "vel_min": float(vels.min()) if len(vels) else math.nan,
            "vel_max": float(vels.max()) if len(vels) else math.nan,
            "acc_min": float(accs.min()) if len(accs) else math.nan,
            "acc_max": float(accs.max()) if len(accs) else math.nan,
            "delay_cost": float(np.sum(lam_eval * delays ** 2)),
            "delay_total": float(delays.sum()),
            "gap_max_bump": float(gaps[in_region].max()) if in_region.any()
                            else math.nan,
            "lam_eval": float(lam_eval),
        }

    def _bump_region(self) -> tuple:
        bumps = self.config.get("bumps") or []
        if not bumps:
            return (0.0, self.config.get("road_length", math.inf))
        lo = min(b["center"] - 3.0 * b["width"] for b in bumps)
        hi = max(b["center"] + 3.0 * b["width"] for b in bumps)
        return (lo, hi)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(TRACE_HEADER + "\n")
            for r in self.rows:
                vals = [str(r.time), _g(r.ego_pos), _g(r.ego_vel),
                        _g(r.lead_pos), _g(r.lead_vel), _g(r.accel),
                        str(r.n_eff), str(r.packet_origin),
                        str(r.window_size), _g(r.gp_mean),
                        _g(r.realized_delay), _g(r.cost_tracking),
                        _g(r.cost_reference), _g(r.cost_effort),
                        _g(r.cost_terminal), _g(r.cost_channel),
                        _g(r.cost_total), str(r.iterations),
                        _g(r.sync_seconds), str(int(r.converged)), r.event]
                fh.write(",".join(vals) + "\n")


def _g(v: float) -> str:
    return "%.17g" % v


class World:
    """Plant, lead schedule, and channel state for one run."""

    def __init__(self, cfg: ScenarioConfig, lam: float):
        self.cfg = cfg
        self.bounds = cfg.make_bounds()
        self.field = cfg.make_field()
        self.lam = lam
        self.ego = VehicleState(*cfg.ego_start)
        self.lead = VehicleState(cfg.lead_start, cfg.lead_velocity)
        self.mailbox = Mailbox()
        self.now = 0
        self.sent_delay: dict = {}
        self.send_packet()

    def lead_future(self) -> list:
        dt = self.bounds.dt
        v = self.cfg.lead_velocity
        return [VehicleState(self.lead.position + v * k * dt, v)
                for k in range(self.cfg.horizon + 1)]

    def send_packet(self) -> None:
        pkt = transmit(self.field, self.lead_future(), self.now, self.ego,
                       self.lead, self.bounds.dt)
        self.mailbox.deliver(pkt)
        self.sent_delay[self.now] = pkt.delay

    def apply_control(self, u) -> None:
        from .dynamics import step
        new_ego = step(self.ego, u, self.bounds)
        dt = self.bounds.dt
        new_lead = VehicleState(
            self.lead.position + self.cfg.lead_velocity * dt,
            self.cfg.lead_velocity)
        self.now += 1
        self.ego, self.lead = new_ego, new_lead
        if gap(self.ego, self.lead, self.cfg.vehicle_length) <= 0.0:
            raise CollisionError(
                f"gap closed at t={self.now}: ego {self.ego.position:.2f}, "
                f"lead {self.lead.position:.2f}")
        self.send_packet()


def _episode_end(cfg: ScenarioConfig) -> float:
    if cfg.bumps:
        return max(b["center"] + 3.0 * b["width"] for b in cfg.bumps)
    return cfg.road_length


def run_scenario(cfg: ScenarioConfig, ts: TrainingSet | None = None,
                 lam: float | None = None) -> ScenarioTrace:
    """Closed-loop run; returns the per-step trace.

    `lam` overrides the config's channel weight (0 gives the baseline run
    on the same seeds). Aborts with a diagnostic row on collision.
    """
    cfg.validate()
    if ts is None:
        ts = generate_training_data(cfg)
    lam_run = cfg.lam if lam is None else lam
    world = World(cfg, lam_run)
    ctrl = Controller(
        ts=ts, hyper=cfg.make_hyper(), bounds=world.bounds,
        horizon=cfg.horizon, weights=cfg.make_weights(), lam=lam_run,
        phi=cfg.phi, v_ref=cfg.v_ref, lead_tol=tuple(cfg.lead_tol),
        v_nominal=cfg.nominal_speed, prior_mean=cfg.prior_mean,
        refresh_every=cfg.refresh_every,
        fallback_speed_frac=cfg.fallback_speed_frac,
        initial_lead=world.lead, vehicle_length=cfg.vehicle_length)

    cfg_dict = cfg.to_dict()
    cfg_dict["lam"] = lam_run
    rows: list = []
    trace = ScenarioTrace(rows=rows, config=cfg_dict)
    end_pos = _episode_end(cfg)

    sol = ctrl.solve_now(world)
    for _ in range(cfg.max_steps):
        mean_here, _ = posterior(aggregate(world.ego, world.lead), ctrl.cache)
        bd = sol.cost_breakdown
        rows.append(TraceRow(
            time=world.now, ego_pos=world.ego.position,
            ego_vel=world.ego.velocity, lead_pos=world.lead.position,
            lead_vel=world.lead.velocity, accel=sol.controls[0].acceleration,
            n_eff=ctrl.last_n_eff if ctrl.last_n_eff is not None else -1,
            packet_origin=(ctrl.last_packet_origin
                           if ctrl.last_packet_origin is not None else -1),
            window_size=len(ctrl.cache), gp_mean=mean_here,
            realized_delay=world.sent_delay[world.now],
            cost_tracking=bd.tracking, cost_reference=bd.reference,
            cost_effort=bd.effort, cost_terminal=bd.terminal,
            cost_channel=bd.channel, cost_total=bd.total,
            iterations=sol.iterations, sync_seconds=ctrl.last_sync_seconds,
            converged=sol.converged,
            event="" if sol.converged else "not_converged"))
        if world.ego.position >= min(end_pos, cfg.road_length):
            break
        try:
            world.apply_control(sol.controls[0])
        except CollisionError as exc:
            log.error("run aborted: %s", exc)
            rows.append(TraceRow(
                time=world.now, ego_pos=world.ego.position,
                ego_vel=world.ego.velocity, lead_pos=world.lead.position,
                lead_vel=world.lead.velocity, accel=math.nan, n_eff=-1,
                packet_origin=-1, window_size=len(ctrl.cache),
                gp_mean=math.nan,
                realized_delay=world.sent_delay.get(world.now, math.nan),
                cost_tracking=math.nan, cost_reference=math.nan,
                cost_effort=math.nan, cost_terminal=math.nan,
                cost_channel=math.nan, cost_total=math.nan, iterations=0,
                sync_seconds=0.0, converged=False, event="collision"))
            trace.collided = True
            break
        sol = ctrl.solve_now(world)
    return trace


def run_paired(cfg: ScenarioConfig, ts: TrainingSet | None = None) -> dict:
    """Baseline (lam=0) and channel-aware runs on identical seeds and data.

    Both realized-delay costs are scored with the aware run's lam so the
    comparison is apples to apples.
    """
    cfg.validate()
    if cfg.lam <= 0:
        raise ConfigError("paired comparison needs a positive channel weight")
    if ts is None:
        ts = generate_training_data(cfg)
    t0 = time.perf_counter()
    baseline = run_scenario(cfg, ts=ts, lam=0.0)
    aware = run_scenario(cfg, ts=ts, lam=cfg.lam)
    return {
        "baseline": baseline,
        "aware": aware,
        "summary_baseline": baseline.summary(lam_eval=cfg.lam),
        "summary_aware": aware.summary(lam_eval=cfg.lam),
        "wall_seconds": time.perf_counter() - t0,
    }
