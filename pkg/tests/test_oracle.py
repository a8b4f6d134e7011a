import math

import numpy as np
import pytest

from movingns.fields import (
    Grid,
    VectorField,
    leray_project,
    norm_L2,
    taylor_green,
)
from movingns.geometry import IdentityMotion, ShearMotion
from movingns.operators import build_bundle
from movingns.oracle import oracle_step, oracle_trajectory
from movingns.sde import (
    RngCursor,
    SimConfig,
    SolverState,
    make_noise_model,
    sample_increments,
    simulate,
    step,
    _noise_combination,
)


def test_oracle_zero_stays_zero(grid16):
    out = oracle_step(VectorField.zeros(grid16), 1e-3)
    assert norm_L2(out) <= 1e-14


def test_oracle_step_matches_transformed_stepper(grid16):
    # identical per-step results under the identity motion
    b = build_bundle(IdentityMotion(t_max=1.0), 0.0, grid16)
    v = leray_project(taylor_green(grid16))
    state = SolverState(t=0.0, t0=0.0, v=v, n_level=math.inf,
                        rng=RngCursor(3, 0, 0))
    s1 = step(state, 1e-3, b)
    s2 = oracle_step(v, 1e-3)
    assert norm_L2(s1.v - s2) <= 1e-10 * max(norm_L2(s2), 1.0)


def test_oracle_step_matches_with_noise(grid16):
    nm = make_noise_model(grid16, K=4, coupling="diagonal", amplitude=0.3)
    b = build_bundle(IdentityMotion(t_max=1.0), 0.0, grid16)
    v = leray_project(taylor_green(grid16))
    state = SolverState(t=0.0, t0=0.0, v=v, n_level=math.inf,
                        rng=RngCursor(9, 0, 0))
    s1 = step(state, 1e-3, b, nm)
    db = sample_increments(state.rng, 1e-3, nm.K)
    forcing = _noise_combination(v, nm, db)
    s2 = oracle_step(v, 1e-3, forcing=forcing)
    assert norm_L2(s1.v - s2) <= 1e-10 * max(norm_L2(s2), 1.0)


def test_oracle_self_convergence_first_order(grid16):
    v0 = leray_project(taylor_green(grid16))
    T = 0.04
    ends = {}
    for dt in (2e-3, 1e-3, 5e-4):
        v = v0
        for _ in range(round(T / dt)):
            v = oracle_step(v, dt)
        ends[dt] = v
    d1 = norm_L2(ends[2e-3] - ends[1e-3])
    d2 = norm_L2(ends[1e-3] - ends[5e-4])
    assert 1.4 <= d1 / d2 <= 3.0


def test_oracle_trajectory_matches_simulate(grid16):
    cfg = SimConfig(grid=grid16, motion=IdentityMotion(t_max=1.0),
                    t_final=0.02, dt=1e-3, v0=taylor_green(grid16))
    a = simulate(cfg, seed=4)
    b = oracle_trajectory(cfg, seed=4)
    assert norm_L2(a.final_state.v - b.final_state.v) <= 1e-10
    for x, y in zip(a.l2_moving, b.l2_moving):
        assert x == pytest.approx(y, abs=1e-10)


def test_oracle_trajectory_seed_determinism(grid16):
    nm = make_noise_model(grid16, K=4, coupling="additive", amplitude=0.3)
    cfg = SimConfig(grid=grid16, motion=IdentityMotion(t_max=1.0),
                    t_final=0.01, dt=1e-3, v0=taylor_green(grid16), noise=nm)
    a = oracle_trajectory(cfg, seed=7)
    b = oracle_trajectory(cfg, seed=7)
    assert np.array_equal(a.final_state.v.u1, b.final_state.v.u1)
    c = oracle_trajectory(cfg, seed=8)
    assert not np.array_equal(a.final_state.v.u1, c.final_state.v.u1)


def test_oracle_rejects_moving_domains(grid16):
    cfg = SimConfig(grid=grid16, motion=ShearMotion(0.2, 1.0, t_max=1.0),
                    t_final=0.01, dt=1e-3, v0=taylor_green(grid16))
    with pytest.raises(ValueError):
        oracle_trajectory(cfg, seed=0)
