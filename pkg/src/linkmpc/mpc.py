"""Channel-aware finite-horizon control for the follower vehicle.

The optimizer is single shooting: the decision vector is the control
sequence, states come from rolling the plant forward, and the objective is

    sum_k  ||x_k - (x^p_k - gap_ref)||^2_R1   (lead tracking, k <= N_eff)
         + ||x_k - x_ref_k||^2_R2             (reference tracking)
         + R3 u_{k-1}^2                       (effort)
         + lam * mean_delay(x_k, x^p_k)^2     (expected channel delay)
    + terminal ||x_N - x_ref_N||^2_Q

subject to acceleration bounds (handled natively by the box-constrained
quasi-Newton inner solver), velocity bounds, and a time-to-collision floor
d >= phi * max(0, v - v^p). The last two enter through an l1 penalty whose
weight doubles until the rolled-out trajectory is feasible to 1e-6.

Gradients of the quadratic terms flow through an exact discrete adjoint of
the clamped double integrator; the GP delay term is differentiated by
central finite differences with step 1e-4 of the state scale.

When the lead's packet horizon N_eff is shorter than the plan, lead
tracking stops at N_eff and the remaining steps carry reference, effort,
and channel terms against a constant-velocity extrapolation of the lead.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .channel import effective_horizon, latest_packet, prune
from .dynamics import Bounds, ControlInput, VehicleState, step
from .gp import aggregate, kernel_vector
from .kernel_cache import KernelCache
from .reachable import DEFAULT_LEAD_TOL, reach_n, select_training

log = logging.getLogger(__name__)

FEAS_TOL = 1e-6
STATIONARITY_TOL = 1e-4
MAX_INNER_ITERS = 200
MAX_PENALTY_ROUNDS = 12


@dataclass(frozen=True)
class Weights:
    """Stage weights: diagonal 2-vectors over (position, velocity), scalar effort.

    gap_ref shifts the lead-tracking target so the follower aims for a
    standoff distance instead of the lead's own position.
    """

    r1: tuple = (1.0, 1.0)
    r2: tuple = (0.2, 0.2)
    r3: float = 0.1
    q: tuple | None = None  # terminal weight, None reuses r2
    gap_ref: float = 10.0

    def __post_init__(self):
        for name in ("r1", "r2"):
            w = getattr(self, name)
            if len(w) != 2 or min(w) < 0:
                raise ValueError(f"{name} must be two nonnegative weights")
        if self.r3 < 0:
            raise ValueError("r3 must be nonnegative")
        if self.q is not None and (len(self.q) != 2 or min(self.q) < 0):
            raise ValueError("q must be two nonnegative weights")
        if self.gap_ref < 0:
            raise ValueError("gap_ref must be nonnegative")

    @property
    def terminal(self) -> tuple:
        return self.r2 if self.q is None else self.q


@dataclass(frozen=True)
class CostBreakdown:
    tracking: float
    reference: float
    effort: float
    terminal: float
    channel: float

    @property
    def total(self) -> float:
        # summed left to right; tests rely on this exact association order
        return self.tracking + self.reference + self.effort + self.terminal \
            + self.channel

    def astuple(self) -> tuple:
        return (self.tracking, self.reference, self.effort, self.terminal,
                self.channel)


@dataclass
class MpcProblem:
    x0: VehicleState
    horizon: int
    lead_pred: list  # pruned packet states; index 0 is the lead now
    x_ref: list  # reference states, index k pairs plan step k, len >= horizon+1
    weights: Weights
    bounds: Bounds
    cache: KernelCache | None = None
    lam: float = 0.0
    phi: float = 2.0
    track_horizon: int | None = None  # N_eff; None uses the packet depth
    vehicle_length: float = 0.0

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.lead_pred:
            raise ValueError("lead_pred must hold at least the current lead state")
        if len(self.x_ref) < self.horizon + 1:
            raise ValueError("x_ref must cover the full horizon")
        if self.lam < 0:
            raise ValueError("channel weight must be nonnegative")
        if self.phi <= 0:
            raise ValueError("TTC floor must be positive")
        if self.track_horizon is None:
            self.track_horizon = min(self.horizon, len(self.lead_pred) - 1)
        if not 0 <= self.track_horizon <= self.horizon:
            raise ValueError("track_horizon outside [0, horizon]")


@dataclass
class MpcSolution:
    states: list  # x_1 .. x_N
    controls: list  # u_0 .. u_{N-1}
    cost_breakdown: CostBreakdown
    iterations: int
    converged: bool
    stationarity: float = math.nan
    violation: float = math.nan
    penalty_rounds: int = 0
    iteration_log: list = field(default_factory=list)


def _quad(dp, dv, w) -> float:
    return w[0] * dp * dp + w[1] * dv * dv


def stage_cost(x: VehicleState, u, x_p: VehicleState, x_ref: VehicleState,
               weights: Weights) -> float:
    """One step of the motion cost; `u` may be a ControlInput or a number."""
    a = u.acceleration if isinstance(u, ControlInput) else float(u)
    lead = _quad(x.position - (x_p.position - weights.gap_ref),
                 x.velocity - x_p.velocity, weights.r1)
    ref = _quad(x.position - x_ref.position, x.velocity - x_ref.velocity,
                weights.r2)
    return lead + ref + weights.r3 * a * a


class _GpSnapshot:
    """Frozen view of a kernel cache for many fast posterior-mean queries."""

    __slots__ = ("inputs", "alpha", "hyper", "mu")

    def __init__(self, cache: KernelCache):
        self.hyper = cache.hyper
        self.mu = cache.prior_mean_value()
        if len(cache):
            self.inputs = cache.inputs
            self.alpha = cache.K_inv @ (cache.targets - self.mu)
        else:
            self.inputs = None
            self.alpha = None

    def mean(self, x: np.ndarray) -> float:
        if self.inputs is None:
            return self.mu
        kv = kernel_vector(self.inputs, x, self.hyper)
        return self.mu + float(kv @ self.alpha)

    def mean4(self, ego_pos, ego_vel, lead_pos, lead_vel) -> float:
        return self.mean(np.array([ego_pos, ego_vel, lead_pos, lead_vel]))


def channel_cost(states: list, lead_pred: list, cache: KernelCache,
                 lam: float) -> float:
    """Expected-delay cost lam * sum_k mean(states[k], lead_pred[k])^2."""
    if lam == 0.0:
        return 0.0
    if len(lead_pred) < len(states):
        raise ValueError("lead_pred shorter than the state sequence")
    snap = _GpSnapshot(cache)
    if snap.inputs is None:
        log.info("channel cost using prior mean only (empty window)")
    total = 0.0
    for s, lp in zip(states, lead_pred):
        w = snap.mean(aggregate(s, lp))
        total += lam * w * w
    return total


def _extend_lead(lead_pred: list, horizon: int, dt: float) -> list:
    """Pad a short lead prediction by constant-velocity extrapolation."""
    out = list(lead_pred)
    while len(out) < horizon + 1:
        last = out[-1]
        out.append(VehicleState(last.position + last.velocity * dt,
                                last.velocity))
    return out


def _fd_mean_grad(snap: _GpSnapshot, pos, vel, lp, lv) -> tuple:
    hp = 1e-4 * max(1.0, abs(pos))
    hv = 1e-4 * max(1.0, abs(vel))
    dp = (snap.mean4(pos + hp, vel, lp, lv)
          - snap.mean4(pos - hp, vel, lp, lv)) / (2.0 * hp)
    dv = (snap.mean4(pos, vel + hv, lp, lv)
          - snap.mean4(pos, vel - hv, lp, lv)) / (2.0 * hv)
    return dp, dv


def objective_breakdown(p: MpcProblem, states: list, controls: list) -> CostBreakdown:
    """Unpenalized cost terms of a given trajectory, grouped by origin."""
    snap = _GpSnapshot(p.cache) if (p.lam > 0.0 and p.cache is not None) else None
    lead = _extend_lead(p.lead_pred, p.horizon, p.bounds.dt)
    w = p.weights
    tracking = reference = effort = channel = 0.0
    for k in range(1, p.horizon + 1):
        x = states[k - 1]
        u = controls[k - 1]
        a = u.acceleration if isinstance(u, ControlInput) else float(u)
        if k <= p.track_horizon:
            tracking += _quad(x.position - (lead[k].position - w.gap_ref),
                              x.velocity - lead[k].velocity, w.r1)
        reference += _quad(x.position - p.x_ref[k].position,
                           x.velocity - p.x_ref[k].velocity, w.r2)
        effort += w.r3 * a * a
        if snap is not None:
            m = snap.mean4(x.position, x.velocity, lead[k].position,
                           lead[k].velocity)
            channel += p.lam * m * m
    xN = states[p.horizon - 1]
    terminal = _quad(xN.position - p.x_ref[p.horizon].position,
                     xN.velocity - p.x_ref[p.horizon].velocity, w.terminal)
    return CostBreakdown(tracking, reference, effort, terminal, channel)


def solve(p: MpcProblem, u0=None) -> MpcSolution:
    """Minimize the channel-aware cost over the control sequence.

    Runs an l1 penalty loop (doubling on violation) around a box-bounded
    quasi-Newton inner solver. Falls back to maximal braking, flagged not
    converged, when no feasible sequence is found.
    """
    N = p.horizon
    b = p.bounds
    dt = b.dt
    w = p.weights
    ne = p.track_horizon
    lead = _extend_lead(p.lead_pred, N, dt)
    lead_pos = np.array([s.position for s in lead])
    lead_vel = np.array([s.velocity for s in lead])
    ref_pos = np.array([s.position for s in p.x_ref[:N + 1]])
    ref_vel = np.array([s.velocity for s in p.x_ref[:N + 1]])
    snap = _GpSnapshot(p.cache) if (p.lam > 0.0 and p.cache is not None) else None
    if snap is not None and snap.inputs is None:
        log.info("solving against the GP prior mean (empty window)")

    qw = w.terminal

    def evaluate(uv: np.ndarray, mu: float):
        """Penalized value, gradient, and diagnostics at a control vector."""
        pos = np.empty(N + 1)
        vel = np.empty(N + 1)
        sat = np.zeros(N + 1, dtype=bool)
        sgn = np.zeros(N + 1)  # sign of the clamp violation at each step
        pos[0], vel[0] = p.x0.position, p.x0.velocity
        for k in range(1, N + 1):
            u = uv[k - 1]
            vraw = vel[k - 1] + u * dt
            vcl = min(max(vraw, b.v_min), b.v_max)
            pos[k] = pos[k - 1] + vel[k - 1] * dt + 0.5 * u * dt * dt
            vel[k] = vcl
            if vraw != vcl:
                sat[k] = True
                sgn[k] = 1.0 if vraw > vcl else -1.0

        tracking = reference = effort = channel = 0.0
        penalty = 0.0
        viol_max = 0.0
        gpos = np.zeros(N + 1)
        gvel = np.zeros(N + 1)
        gu = np.zeros(N)
        for k in range(1, N + 1):
            u = uv[k - 1]
            if k <= ne:
                dp = pos[k] - (lead_pos[k] - w.gap_ref)
                dv = vel[k] - lead_vel[k]
                tracking += w.r1[0] * dp * dp + w.r1[1] * dv * dv
                gpos[k] += 2.0 * w.r1[0] * dp
                gvel[k] += 2.0 * w.r1[1] * dv
            rp = pos[k] - ref_pos[k]
            rv = vel[k] - ref_vel[k]
            reference += w.r2[0] * rp * rp + w.r2[1] * rv * rv
            gpos[k] += 2.0 * w.r2[0] * rp
            gvel[k] += 2.0 * w.r2[1] * rv
            effort += w.r3 * u * u
            gu[k - 1] += 2.0 * w.r3 * u
            if snap is not None:
                m = snap.mean4(pos[k], vel[k], lead_pos[k], lead_vel[k])
                channel += p.lam * m * m
                mdp, mdv = _fd_mean_grad(snap, pos[k], vel[k], lead_pos[k],
                                         lead_vel[k])
                gpos[k] += 2.0 * p.lam * m * mdp
                gvel[k] += 2.0 * p.lam * m * mdv
            # TTC floor and collision, l1-penalized on violation
            d = lead_pos[k] - pos[k] - p.vehicle_length
            closing = vel[k] - lead_vel[k]
            c = d - p.phi * (closing if closing > 0.0 else 0.0)
            if c < 0.0:
                penalty += mu * (-c)
                gpos[k] += mu
                if closing > 0.0:
                    gvel[k] += mu * p.phi
                viol_max = max(viol_max, -c)
            if d < 0.0:
                penalty += mu * (-d)
                gpos[k] += mu
                viol_max = max(viol_max, -d)
            if sat[k]:
                # discourage plans that lean on the velocity clamp
                vraw = vel[k - 1] + u * dt
                ov = abs(vraw - vel[k])
                penalty += mu * ov
                viol_max = max(viol_max, ov)
        tp = pos[N] - ref_pos[N]
        tv = vel[N] - ref_vel[N]
        terminal = qw[0] * tp * tp + qw[1] * tv * tv
        gpos[N] += 2.0 * qw[0] * tp
        gvel[N] += 2.0 * qw[1] * tv

        # adjoint sweep through the rollout
        for k in range(N, 0, -1):
            dvel_du = 0.0 if sat[k] else dt
            gu[k - 1] += gpos[k] * (0.5 * dt * dt) + gvel[k] * dvel_du \
                + mu * sgn[k] * dt
            gpos[k - 1] += gpos[k]
            gvel[k - 1] += gpos[k] * dt + (0.0 if sat[k] else gvel[k]) \
                + mu * sgn[k]

        breakdown = CostBreakdown(float(tracking), float(reference),
                                  float(effort), float(terminal),
                                  float(channel))
        f = breakdown.total + penalty
        return f, gu, viol_max, breakdown

    if u0 is None:
        u = np.zeros(N)
    else:
        u = np.asarray(u0, dtype=float).copy()
    u = np.clip(u, b.u_min, b.u_max)

    mu = 10.0
    box = [(b.u_min, b.u_max)] * N
    total_iters = 0
    rounds = 0
    iter_log: list = []
    res = None
    viol = math.inf
    for _ in range(MAX_PENALTY_ROUNDS):
        rounds += 1
        seen: dict = {}

        def fg(uv, _mu=mu):
            f, g, _, _ = evaluate(uv, _mu)
            seen[uv.tobytes()] = f
            return f, g

        round_log = [fg(u)[0]]

        def track(xk):
            key = np.asarray(xk).tobytes()
            round_log.append(seen.get(key, evaluate(np.asarray(xk), mu)[0]))

        res = minimize(fg, u, jac=True, method="L-BFGS-B", bounds=box,
                       callback=track,
                       options={"maxiter": MAX_INNER_ITERS, "ftol": 1e-14,
                                "gtol": 1e-10})
        u = res.x
        total_iters += res.nit
        iter_log.append(round_log)
        _, g, viol, breakdown = evaluate(u, mu)
        if viol <= FEAS_TOL:
            break
        mu *= 2.0

    if viol > FEAS_TOL:
        log.warning("no feasible plan found (residual %.3e); braking", viol)
        u = np.full(N, b.u_min)
        _, g, viol, breakdown = evaluate(u, mu)
        converged = False
    else:
        proj = np.where((u <= b.u_min) & (g > 0), 0.0,
                        np.where((u >= b.u_max) & (g < 0), 0.0, g))
        stationary = float(np.max(np.abs(proj))) if N else 0.0
        converged = bool(res.success) or stationary <= STATIONARITY_TOL
        final_station = stationary

    if viol > FEAS_TOL or not converged:
        proj = np.where((u <= b.u_min) & (g > 0), 0.0,
                        np.where((u >= b.u_max) & (g < 0), 0.0, g))
        final_station = float(np.max(np.abs(proj))) if N else 0.0

    states = []
    s = p.x0
    controls = [ControlInput(float(a)) for a in u]
    for c in controls:
        s = step(s, c, b)
        states.append(s)
    return MpcSolution(states=states, controls=controls,
                       cost_breakdown=breakdown, iterations=total_iters,
                       converged=converged and viol <= FEAS_TOL,
                       stationarity=final_station, violation=float(viol),
                       penalty_rounds=rounds, iteration_log=iter_log)


def max_braking(p: MpcProblem) -> MpcSolution:
    """The maximal-braking fallback sequence, flagged not converged."""
    u = np.full(p.horizon, p.bounds.u_min)
    controls = [ControlInput(float(a)) for a in u]
    states = []
    s = p.x0
    for c in controls:
        s = step(s, c, p.bounds)
        states.append(s)
    breakdown = objective_breakdown(p, states, controls)
    return MpcSolution(states=states, controls=controls,
                       cost_breakdown=breakdown, iterations=0, converged=False)


class Controller:
    """Receding-horizon planner: packet intake, window upkeep, solve.

    Holds the full training set, the active kernel window, and the last
    solution for warm starts. The window is kept equal to the fresh
    reachable-set selection at every step by removing departed rows and
    appending arrivals, then restoring sorted tag order.
    """

    def __init__(self, ts, hyper, bounds: Bounds, horizon: int = 10,
                 weights: Weights | None = None, lam: float = 1.0,
                 phi: float = 2.0, v_ref: float = 7.0,
                 lead_tol: tuple = DEFAULT_LEAD_TOL,
                 v_nominal: float | None = None, prior_mean: float | None = None,
                 refresh_every: int = 100, fallback_speed_frac: float = 0.8,
                 initial_lead: VehicleState | None = None,
                 vehicle_length: float = 0.0):
        self.ts = ts
        self.hyper = hyper
        self.bounds = bounds
        self.horizon = horizon
        self.weights = weights if weights is not None else Weights()
        self.lam = lam
        self.phi = phi
        self.v_ref = v_ref
        self.lead_tol = lead_tol
        self.v_nominal = v_nominal if v_nominal is not None else v_ref
        self.fallback_speed_frac = fallback_speed_frac
        self.vehicle_length = vehicle_length
        self.cache = KernelCache(hyper=hyper, prior_mean=prior_mean,
                                 refresh_every=refresh_every)
        self.solution: MpcSolution | None = None
        self.last_lead = initial_lead  # onboard-sensed lead state at start
        self.last_lead_time = 0
        self.last_n_eff: int | None = None
        self.last_packet_origin: int | None = None
        self.last_sync_seconds = 0.0
        self.window_rejects = 0

    def start_tag(self, ego: VehicleState) -> int:
        return int(math.floor(ego.position / (self.v_nominal * self.bounds.dt)))

    def sync_window(self, target_ids: list) -> None:
        """Make the kernel window hold exactly the given training rows."""
        t0 = time.perf_counter()
        cache = self.cache
        want = set(target_ids)
        changed = False
        for pos in range(len(cache) - 1, -1, -1):
            if int(cache.row_ids[pos]) not in want:
                cache._remove_index(pos)
                changed = True
        have = set(int(r) for r in cache.row_ids)
        for i in target_ids:
            if i in have:
                continue
            ok = cache._append(self.ts.inputs[i], float(self.ts.targets[i]),
                               int(self.ts.step_tags[i]), row_id=int(i))
            changed = True
            if not ok:
                self.window_rejects += 1
                log.debug("window append rejected near-duplicate row %d", i)
        if changed:
            cache.sort_by_tag()
            cache.slides += 1
            if cache.refresh_every and cache.slides % cache.refresh_every == 0:
                cache.refresh()
            cache._sampled_check()
        self.last_sync_seconds = time.perf_counter() - t0

    def _reference(self, ego: VehicleState, v_ref: float) -> list:
        dt = self.bounds.dt
        v = min(max(v_ref, self.bounds.v_min), self.bounds.v_max)
        return [VehicleState(ego.position + v * k * dt, v)
                for k in range(self.horizon + 1)]

    def solve_now(self, world) -> MpcSolution:
        """Read the mailbox, refresh the window, and solve from the world state."""
        now = world.now
        ego = world.ego
        pkt = latest_packet(world.mailbox, now)
        if pkt is not None:
            lead_pred = prune(pkt, now)
            n_eff = effective_horizon(pkt, now, self.horizon)
            self.last_lead = lead_pred[0]
            self.last_lead_time = now
            self.last_packet_origin = pkt.origin_time
            v_ref_now = self.v_ref
        else:
            if self.last_lead is None:
                raise RuntimeError("no packet and no sensed lead state to fall back on")
            age = now - self.last_lead_time
            dt = self.bounds.dt
            guess = VehicleState(
                self.last_lead.position + self.last_lead.velocity * age * dt,
                self.last_lead.velocity)
            lead_pred = [guess]
            n_eff = 0
            self.last_packet_origin = None
            v_ref_now = self.fallback_speed_frac * self.v_ref
            log.info("t=%d no usable packet; tracking reference at reduced "
                     "speed against coasted lead", now)
        self.last_n_eff = n_eff

        tube = reach_n(ego, self.horizon, self.bounds)
        ids = select_training(self.ts, tube, lead_pred, self.lead_tol,
                              start_step=self.start_tag(ego))
        self.sync_window(ids)

        problem = MpcProblem(
            x0=ego, horizon=self.horizon, lead_pred=lead_pred,
            x_ref=self._reference(ego, v_ref_now), weights=self.weights,
            bounds=self.bounds, cache=self.cache, lam=self.lam, phi=self.phi,
            track_horizon=min(n_eff, self.horizon),
            vehicle_length=self.vehicle_length)
        u0 = None
        if self.solution is not None:
            prev = [c.acceleration for c in self.solution.controls]
            u0 = prev[1:] + prev[-1:]
        self.solution = solve(problem, u0=u0)
        log.debug("t=%d n_eff=%d window=%d iters=%d cost=%.4f", now, n_eff,
                  len(self.cache), self.solution.iterations,
                  self.solution.cost_breakdown.total)
        return self.solution


def receding_step(world, ctrl: Controller) -> MpcSolution:
    """Apply the head control, advance the world one step, and re-solve."""
    sol = ctrl.solution if ctrl.solution is not None else ctrl.solve_now(world)
    world.apply_control(sol.controls[0])
    return ctrl.solve_now(world)
