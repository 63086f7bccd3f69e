import math

import numpy as np
import pytest

from linkmpc.channel import ChannelField, DelayBump
from linkmpc.dynamics import Bounds, ControlInput, VehicleState, step
from linkmpc.gp import Hyperparameters, aggregate, posterior
from linkmpc.kernel_cache import KernelCache
from linkmpc.mpc import (
    CostBreakdown,
    MpcProblem,
    MpcSolution,
    Weights,
    _extend_lead,
    channel_cost,
    max_braking,
    objective_breakdown,
    solve,
    stage_cost,
)

BOUNDS = Bounds(v_min=3.0, v_max=10.0, u_min=-3.0, u_max=2.0, dt=1.0)
H = Hyperparameters(1.0, np.array([15.0, 5.0, 15.0, 5.0]), 1e-4)


def lead_walk(n, p0=12.0, v=5.0):
    out = [VehicleState(p0, v)]
    for _ in range(n):
        out.append(VehicleState(out[-1].position + v, v))
    return out


def ref_walk(n, p0=0.0, v=5.0):
    return [VehicleState(p0 + v * k, v) for k in range(n + 1)]


def tracking_problem(n=6, lam=0.0, cache=None, weights=None, x0=None,
                     lead=None, **kw):
    x0 = x0 or VehicleState(0.0, 5.0)
    lead = lead or lead_walk(n)
    return MpcProblem(x0=x0, horizon=n, lead_pred=lead,
                      x_ref=ref_walk(n), weights=weights or Weights(),
                      bounds=BOUNDS, cache=cache, lam=lam, **kw)


def constant_delay_cache(w0, m=20, seed=0):
    # every target identical: the posterior mean is exactly w0 everywhere
    # because alpha = K_inv (targets - mean) vanishes
    rng = np.random.default_rng(seed)
    X = rng.uniform(0.0, 100.0, size=(m, 4))
    return KernelCache.from_data(X, np.full(m, w0), np.zeros(m, dtype=int), H)


def test_weights_validation():
    with pytest.raises(ValueError):
        Weights(r1=(1.0, -1.0))
    with pytest.raises(ValueError):
        Weights(r3=-0.1)
    with pytest.raises(ValueError):
        Weights(gap_ref=-1.0)
    assert Weights().terminal == (0.2, 0.2)
    assert Weights(q=(3.0, 4.0)).terminal == (3.0, 4.0)


def test_stage_cost_zero_residual():
    w = Weights(gap_ref=10.0)
    lead = VehicleState(30.0, 5.0)
    x = VehicleState(20.0, 5.0)  # exactly at lead - gap_ref
    assert stage_cost(x, 0.0, lead, x, w) == 0.0


def test_stage_cost_effort_only():
    w = Weights(r1=(0.0, 0.0), r2=(0.0, 0.0), r3=1.0)
    x = VehicleState(0.0, 5.0)
    assert stage_cost(x, 2.0, x, x, w) == 4.0
    assert stage_cost(x, ControlInput(2.0), x, x, w) == 4.0


def test_stage_cost_expanded_quadratic_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        w = Weights(r1=tuple(rng.uniform(0, 2, 2)), r2=tuple(rng.uniform(0, 2, 2)),
                    r3=float(rng.uniform(0, 2)), gap_ref=float(rng.uniform(0, 20)))
        x = VehicleState(*rng.uniform(-10, 10, 2))
        xp = VehicleState(*rng.uniform(-10, 10, 2))
        xr = VehicleState(*rng.uniform(-10, 10, 2))
        u = float(rng.uniform(-3, 3))
        # expanded a^2 - 2ab + b^2 form, written separately on purpose
        tp = xp.position - w.gap_ref
        want = (w.r1[0] * (x.position ** 2 - 2 * x.position * tp + tp ** 2)
                + w.r1[1] * (x.velocity ** 2 - 2 * x.velocity * xp.velocity
                             + xp.velocity ** 2)
                + w.r2[0] * (x.position ** 2 - 2 * x.position * xr.position
                             + xr.position ** 2)
                + w.r2[1] * (x.velocity ** 2 - 2 * x.velocity * xr.velocity
                             + xr.velocity ** 2)
                + w.r3 * u ** 2)
        assert stage_cost(x, u, xp, xr, w) == pytest.approx(want, rel=1e-12)


def test_channel_cost_zero_weight():
    states = lead_walk(4, p0=0.0)
    assert channel_cost(states, lead_walk(4), None, 0.0) == 0.0


def test_channel_cost_constant_field_fixture():
    w0, lam, n = 0.4, 2.0, 6
    cache = constant_delay_cache(w0)
    states = lead_walk(n, p0=2.0)
    lead = lead_walk(n)
    got = channel_cost(states, lead, cache, lam)
    assert got == pytest.approx((n + 1) * lam * w0 * w0, rel=1e-12)


def test_channel_cost_empty_cache_uses_prior():
    cache = KernelCache(hyper=H, prior_mean=0.3)
    states = lead_walk(2, p0=0.0)
    got = channel_cost(states, lead_walk(2), cache, 5.0)
    assert got == pytest.approx(3 * 5.0 * 0.09, rel=1e-12)


def test_channel_cost_rejects_short_lead():
    with pytest.raises(ValueError):
        channel_cost(lead_walk(4), lead_walk(2), constant_delay_cache(0.1), 1.0)


def test_channel_cost_through_bump_exceeds_around():
    field = ChannelField(base_delay=0.1,
                         bumps=(DelayBump(center=60.0, amplitude=2.0, width=15.0),))
    rng = np.random.default_rng(2)
    X, y = [], []
    for _ in range(200):
        ep = rng.uniform(0.0, 120.0)
        ev = rng.uniform(3.0, 10.0)
        lp = ep + rng.uniform(5.0, 15.0)
        lv = 5.0 + rng.uniform(-1.0, 1.0)
        X.append([ep, ev, lp, lv])
        y.append(field.mean_delay_at(0.5 * (ep + lp)))
    cache = KernelCache.from_data(np.array(X), np.array(y),
                                  np.zeros(200, dtype=int), H)
    through = [VehicleState(45.0 + 5.0 * k, 5.0) for k in range(5)]
    lead_t = [VehicleState(55.0 + 5.0 * k, 5.0) for k in range(5)]
    around = [VehicleState(0.0 + 5.0 * k, 5.0) for k in range(5)]
    lead_a = [VehicleState(10.0 + 5.0 * k, 5.0) for k in range(5)]
    c_through = channel_cost(through, lead_t, cache, 1.0)
    c_around = channel_cost(around, lead_a, cache, 1.0)
    assert c_through > 2.0 * c_around


def test_extend_lead():
    lead = [VehicleState(10.0, 4.0)]
    out = _extend_lead(lead, 3, 1.0)
    assert len(out) == 4
    assert out[3] == VehicleState(22.0, 4.0)
    # already long enough: unchanged
    assert _extend_lead(lead_walk(5), 3, 1.0) == lead_walk(5)


def test_problem_validation():
    with pytest.raises(ValueError):
        tracking_problem(n=0)
    with pytest.raises(ValueError):
        MpcProblem(x0=VehicleState(0, 5), horizon=3, lead_pred=[],
                   x_ref=ref_walk(3), weights=Weights(), bounds=BOUNDS)
    with pytest.raises(ValueError):
        MpcProblem(x0=VehicleState(0, 5), horizon=3, lead_pred=lead_walk(3),
                   x_ref=ref_walk(2), weights=Weights(), bounds=BOUNDS)
    with pytest.raises(ValueError):
        tracking_problem(lam=-1.0)
    with pytest.raises(ValueError):
        tracking_problem(phi=0.0)
    with pytest.raises(ValueError):
        tracking_problem(track_horizon=9)
    p = tracking_problem(n=6)
    assert p.track_horizon == 6
    p2 = MpcProblem(x0=VehicleState(0, 5), horizon=6, lead_pred=lead_walk(2),
                    x_ref=ref_walk(6), weights=Weights(), bounds=BOUNDS)
    assert p2.track_horizon == 2


def lq_oracle(p):
    """Dense least-squares solution of the unconstrained quadratic program.

    Valid only when no velocity clamp or control bound is active at the
    optimum: stack sqrt-weighted residual rows linear in u and solve.
    """
    n = p.horizon
    dt = p.bounds.dt
    w = p.weights
    lead = _extend_lead(p.lead_pred, n, dt)
    rows, rhs = [], []

    def pos_row(k):
        a = np.zeros(n)
        for j in range(k):
            a[j] = dt * dt * (k - j - 0.5)
        return a, p.x0.position + p.x0.velocity * k * dt

    def vel_row(k):
        a = np.zeros(n)
        a[:k] = dt
        return a, p.x0.velocity

    for k in range(1, n + 1):
        ap, bp = pos_row(k)
        av, bv = vel_row(k)
        if k <= p.track_horizon:
            rows.append(math.sqrt(w.r1[0]) * ap)
            rhs.append(math.sqrt(w.r1[0]) * (lead[k].position - w.gap_ref - bp))
            rows.append(math.sqrt(w.r1[1]) * av)
            rhs.append(math.sqrt(w.r1[1]) * (lead[k].velocity - bv))
        rows.append(math.sqrt(w.r2[0]) * ap)
        rhs.append(math.sqrt(w.r2[0]) * (p.x_ref[k].position - bp))
        rows.append(math.sqrt(w.r2[1]) * av)
        rhs.append(math.sqrt(w.r2[1]) * (p.x_ref[k].velocity - bv))
        e = np.zeros(n)
        e[k - 1] = math.sqrt(w.r3)
        rows.append(e)
        rhs.append(0.0)
    qw = w.terminal
    ap, bp = pos_row(n)
    av, bv = vel_row(n)
    rows.append(math.sqrt(qw[0]) * ap)
    rhs.append(math.sqrt(qw[0]) * (p.x_ref[n].position - bp))
    rows.append(math.sqrt(qw[1]) * av)
    rhs.append(math.sqrt(qw[1]) * (p.x_ref[n].velocity - bv))
    A = np.vstack(rows)
    b = np.array(rhs)
    u, *_ = np.linalg.lstsq(A, b, rcond=None)
    resid = A @ u - b
    return u, float(resid @ resid)


def test_solve_matches_lq_oracle():
    p = tracking_problem(n=6)
    sol = solve(p)
    assert sol.converged
    u_star, f_star = lq_oracle(p)
    # oracle is valid only off the constraint boundary
    assert all(BOUNDS.u_min + 1e-6 < a < BOUNDS.u_max - 1e-6 for a in u_star)
    vel = p.x0.velocity + np.cumsum(u_star)
    assert np.all(vel > BOUNDS.v_min + 1e-6)
    assert np.all(vel < BOUNDS.v_max - 1e-6)
    got = np.array([c.acceleration for c in sol.controls])
    assert sol.cost_breakdown.total == pytest.approx(f_star, abs=1e-4)
    assert np.max(np.abs(got - u_star)) < 1e-3
    assert sol.violation <= 1e-6
    assert sol.iterations <= 200


def test_solve_on_reference_needs_no_control():
    # start exactly on the reference with the lead far away and untracked
    w = Weights(r1=(0.0, 0.0))
    p = tracking_problem(n=5, weights=w, lead=lead_walk(5, p0=500.0))
    sol = solve(p)
    assert sol.converged
    assert max(abs(c.acceleration) for c in sol.controls) < 1e-6
    assert sol.cost_breakdown.total < 1e-10


def test_solution_states_are_exact_rollout():
    p = tracking_problem(n=6)
    sol = solve(p)
    s = p.x0
    for c, got in zip(sol.controls, sol.states):
        s = step(s, c, BOUNDS)
        assert got == s  # bit-exact: same arithmetic path


def test_solve_respects_bounds_and_ttc():
    # fast ego close behind a slow lead: must brake hard but stay feasible
    x0 = VehicleState(0.0, 9.0)
    lead = [VehicleState(14.0 + 3.5 * k, 3.5) for k in range(9)]
    p = MpcProblem(x0=x0, horizon=8, lead_pred=lead,
                   x_ref=[VehicleState(9.0 * k, 9.0) for k in range(9)],
                   weights=Weights(), bounds=BOUNDS, phi=2.0)
    sol = solve(p)
    assert sol.violation <= 1e-6
    for c in sol.controls:
        assert BOUNDS.u_min - 1e-9 <= c.acceleration <= BOUNDS.u_max + 1e-9
    for k, s in enumerate(sol.states, start=1):
        assert BOUNDS.v_min - 1e-6 <= s.velocity <= BOUNDS.v_max + 1e-6
        d = lead[k].position - s.position
        closing = max(s.velocity - lead[k].velocity, 0.0)
        assert d - p.phi * closing >= -1e-6


def test_infeasible_returns_braking_fallback():
    # lead essentially on top of the ego and slower: collision unavoidable
    x0 = VehicleState(0.0, 10.0)
    lead = [VehicleState(1.0 + 3.0 * k, 3.0) for k in range(7)]
    p = MpcProblem(x0=x0, horizon=6, lead_pred=lead,
                   x_ref=[VehicleState(10.0 * k, 10.0) for k in range(7)],
                   weights=Weights(), bounds=BOUNDS)
    sol = solve(p)
    assert not sol.converged
    assert all(c.acceleration == BOUNDS.u_min for c in sol.controls)
    assert sol.violation > 1e-6


def test_max_braking_helper():
    p = tracking_problem(n=4)
    sol = max_braking(p)
    assert not sol.converged
    assert all(c.acceleration == BOUNDS.u_min for c in sol.controls)
    assert len(sol.states) == 4
    assert sol.states[0] == step(p.x0, ControlInput(BOUNDS.u_min), BOUNDS)


def test_breakdown_identity_lambda_zero():
    p = tracking_problem(n=6)
    sol = solve(p)
    want = objective_breakdown(p, sol.states, sol.controls)
    assert sol.cost_breakdown.astuple() == want.astuple()
    assert sol.cost_breakdown.channel == 0.0
    # and the total is the plain left-to-right sum of the parts
    t = sol.cost_breakdown
    assert t.total == ((((t.tracking + t.reference) + t.effort) + t.terminal)
                       + t.channel)


def test_breakdown_identity_with_channel():
    cache = constant_delay_cache(0.3)
    p = tracking_problem(n=5, lam=2.0, cache=cache)
    sol = solve(p)
    want = objective_breakdown(p, sol.states, sol.controls)
    assert sol.cost_breakdown.astuple() == pytest.approx(want.astuple(), rel=1e-12)
    assert sol.cost_breakdown.channel > 0.0


def test_iteration_log_monotone_within_rounds():
    p = tracking_problem(n=6)
    sol = solve(p)
    assert sol.iteration_log
    for round_log in sol.iteration_log:
        for a, b in zip(round_log, round_log[1:]):
            assert b <= a + 1e-9


def test_channel_weight_changes_plan():
    # GP trained on a bump ahead of the ego: with delay weighting on, the
    # planner should hang back relative to the unweighted plan
    field = ChannelField(base_delay=0.05,
                         bumps=(DelayBump(center=40.0, amplitude=3.0, width=12.0),))
    rng = np.random.default_rng(3)
    X, y = [], []
    for _ in range(250):
        ep = rng.uniform(0.0, 90.0)
        ev = rng.uniform(3.0, 10.0)
        lp = ep + rng.uniform(5.0, 15.0)
        lv = 5.0 + rng.uniform(-1.0, 1.0)
        X.append([ep, ev, lp, lv])
        y.append(field.mean_delay_at(0.5 * (ep + lp)))
    cache = KernelCache.from_data(np.array(X), np.array(y),
                                  np.zeros(250, dtype=int), H)
    lead = lead_walk(8, p0=12.0)
    base = solve(tracking_problem(n=8, lead=lead, lam=0.0, cache=cache))
    p_aware = tracking_problem(n=8, lead=lead, lam=50.0, cache=cache)
    aware = solve(p_aware)
    assert aware.converged and base.converged
    # the plans must actually differ, and under the delay-weighted objective
    # the aware plan beats the delay-blind one on both counts
    got = [c.acceleration for c in aware.controls]
    ref = [c.acceleration for c in base.controls]
    assert not np.allclose(got, ref, atol=1e-6)
    base_as_aware = objective_breakdown(p_aware, base.states, base.controls)
    assert aware.cost_breakdown.channel < base_as_aware.channel
    assert aware.cost_breakdown.total < base_as_aware.total


def test_warm_start_not_much_worse_than_cold():
    p = tracking_problem(n=8)
    cold = solve(p)
    warm_u0 = [c.acceleration for c in cold.controls]
    warm = solve(p, u0=np.array(warm_u0))
    assert warm.converged
    assert warm.iterations <= max(2 * cold.iterations, cold.iterations + 5)


def test_solution_record_shape():
    p = tracking_problem(n=5)
    sol = solve(p)
    assert isinstance(sol, MpcSolution)
    assert len(sol.states) == 5
    assert len(sol.controls) == 5
    assert isinstance(sol.cost_breakdown, CostBreakdown)
    assert sol.penalty_rounds >= 1
    assert math.isfinite(sol.stationarity)
