import math
from dataclasses import replace

import numpy as np
import pytest

from movingns.fields import (
    FaceMetric,
    Grid,
    inner_0t,
    leray_project,
    norm_L2,
    smooth_solenoidal,
    taylor_green,
    u2_to_u1_points,
)
from movingns.geometry import (
    IdentityMotion,
    RotationMotion,
    ShearMotion,
    SineShearMotion,
    evaluate_motion,
)
from movingns.rereference import (
    ReferencePolicy,
    estimate_delta,
    rereference,
    rereference_signal,
    should_rereference,
)
from movingns.sde import RngCursor, SimConfig, SolverState, make_noise_model, simulate


def _policy(**kw):
    args = dict(c0=1.0, safety=0.5, max_interval=0.25)
    args.update(kw)
    return ReferencePolicy(**args)


def _state(grid, v, t=0.0, t0=0.0):
    return SolverState(t=t, t0=t0, v=v, n_level=math.inf,
                       rng=RngCursor(0, 0, 0))


def test_policy_validation():
    with pytest.raises(ValueError):
        ReferencePolicy(c0=1.0, safety=1.5)
    with pytest.raises(ValueError):
        ReferencePolicy(c0=-1.0)


def test_no_trigger_at_reference_time(grid16):
    pol = _policy()
    for motion in (IdentityMotion(t_max=1.0), ShearMotion(0.25, math.pi, t_max=1.0)):
        assert not should_rereference(pol, motion, 0.3, 0.3, grid16)
    with pytest.raises(ValueError):
        should_rereference(pol, IdentityMotion(t_max=1.0), 0.5, 0.2, grid16)


def test_identity_triggers_only_at_max_interval(grid16):
    pol = _policy(max_interval=0.2)
    mot = IdentityMotion(t_max=1.0)
    for age in (0.05, 0.15, 0.19):
        assert not should_rereference(pol, mot, 0.1, 0.1 + age, grid16)
    assert should_rereference(pol, mot, 0.1, 0.3, grid16)


def test_smaller_safety_triggers_earlier(grid16):
    mot = ShearMotion(0.4, math.pi, t_max=1.0)

    def first_trigger(safety):
        pol = _policy(safety=safety, max_interval=math.inf)
        for t in np.linspace(0.01, 0.6, 60):
            if should_rereference(pol, mot, 0.0, t, grid16):
                return t
        return math.inf

    ts = [first_trigger(s) for s in (0.8, 0.4, 0.2)]
    assert ts[0] > ts[1] > ts[2]


def test_drift_threshold_is_a_trigger(grid16):
    mot = ShearMotion(0.25, math.pi, t_max=1.0)
    pol = _policy(drift_threshold=0.02, max_interval=math.inf)
    sig = rereference_signal(pol, mot, 0.0, 0.05, grid16)
    assert sig["drift"] >= 0.02 and sig["trigger"]


def test_rereference_at_current_time_only(grid16):
    v = leray_project(taylor_green(grid16))
    st = _state(grid16, v, t=0.2)
    with pytest.raises(ValueError):
        rereference(st, ShearMotion(0.25, math.pi, t_max=1.0), 0.3)


def test_rereference_identity_cases(grid16):
    v = leray_project(taylor_green(grid16))
    # at t = t0 the hand-off is an exact round trip plus one projection
    st = _state(grid16, v, t=0.0, t0=0.0)
    out = rereference(st, ShearMotion(0.25, math.pi, t_max=1.0), 0.0)
    assert norm_L2(out.v - v) <= 1e-12
    assert out.t0 == 0.0
    # identity motion: any re-reference time leaves the field untouched
    st2 = _state(grid16, v, t=0.4)
    out2 = rereference(st2, IdentityMotion(t_max=1.0), 0.4)
    assert norm_L2(out2.v - v) <= 1e-12
    assert out2.t0 == 0.4


def test_rereference_shear_composed_jacobian(grid32):
    # the matched-point hand-off applies the composed shear Jacobian
    # [[1, ds], [0, 1]] to the completed field vectors, exactly
    from movingns.transform import piola_forward, piola_inverse

    a, om, t = 0.3, math.pi, 0.3
    sv = a * math.sin(om * t)
    mot = ShearMotion(a, om, t_max=1.0)
    v = leray_project(smooth_solenoidal(grid32, np.random.default_rng(3)))
    moving = piola_inverse(v, evaluate_motion(mot, t, grid32))
    raw = piola_forward(moving, evaluate_motion(mot.with_reference(t), t, grid32))
    expected_u1 = v.u1 + sv * u2_to_u1_points(v.u2)
    assert np.max(np.abs(raw.u1[1:-1] - expected_u1[1:-1])) <= 1e-13
    assert np.max(np.abs(raw.u2 - v.u2)) <= 1e-13
    # the full operation additionally restores discrete solenoidality,
    # which costs O(relative deformation); here ds is large on purpose
    st = _state(grid32, v, t=t, t0=0.0)
    out = rereference(st, mot, t)
    assert out.t0 == t
    from movingns.fields import divergence

    assert np.max(np.abs(divergence(out.v).data)) <= 1e-9


def test_handoff_preserves_moving_l2_norm():
    # the moving-domain L2 norm is a geometric invariant of the raw
    # matched-point hand-off, up to discretization
    from movingns.transform import piola_forward, piola_inverse

    a, om, t = 0.3, math.pi, 0.3
    mot = ShearMotion(a, om, t_max=1.0)
    errs = {}
    for n in (16, 32):
        g = Grid(n)
        v = leray_project(smooth_solenoidal(g, np.random.default_rng(4)))
        s_old = evaluate_motion(mot, t, g)
        h1 = np.einsum("...mj,...mk->...jk", s_old.u1.jac, s_old.u1.jac)
        h2 = np.einsum("...mj,...mk->...jk", s_old.u2.jac, s_old.u2.jac)
        before = math.sqrt(inner_0t(v, v, FaceMetric(h1, h2)))
        raw = piola_forward(piola_inverse(v, s_old),
                            evaluate_motion(mot.with_reference(t), t, g))
        errs[n] = abs(norm_L2(raw) - before) / before
    assert errs[32] < 0.5 * errs[16]
    assert errs[32] < 0.01


def test_gluing_forced_rereference_matches_single_reference(grid16):
    # shear returning to its initial configuration at T/2: forced
    # re-referencing there must not disturb the trajectory
    T = 0.04
    motion = ShearMotion(0.25, 2 * math.pi / T, t_max=1.0)
    nm = make_noise_model(grid16, K=4, coupling="additive", amplitude=0.3)
    base = SimConfig(grid=grid16, motion=motion, t_final=T, dt=1e-3,
                     v0=taylor_green(grid16), noise=nm, escalate=False)
    plain = simulate(base, seed=9)
    forced = simulate(replace(base, forced_rereference=(T / 2,)), seed=9)
    assert any(e["kind"] == "rereference" for e in forced.events)
    gap = norm_L2(plain.final_state.v - forced.final_state.v)
    assert gap <= 1e-6 * max(norm_L2(plain.final_state.v), 1e-12)


def test_estimate_delta_identity_exact(grid16):
    pol = _policy(max_interval=0.2)
    res = estimate_delta(pol, IdentityMotion(t_max=1.0), grid16,
                         np.linspace(0.0, 0.5, 8), scan_points=20)
    assert res["delta"] == 0.2
    assert res["resolution"] == pytest.approx(0.01)


def test_estimate_delta_rotation_rate_ordering(grid16):
    pol = _policy(max_interval=0.2)
    scan = np.linspace(0.0, 0.4, 6)
    d1 = estimate_delta(pol, RotationMotion(1.0, t_max=1.0), grid16, scan,
                        scan_points=20)["delta"]
    d2 = estimate_delta(pol, RotationMotion(2.0, t_max=1.0), grid16, scan,
                        scan_points=20)["delta"]
    assert d2 <= d1


def test_estimate_delta_positive_and_resolution_stable(grid16):
    pol = _policy(c0=1.003, max_interval=0.25)
    mot = SineShearMotion(0.12, math.pi, 2, t_max=1.0)
    scan = np.linspace(0.0, 0.5, 6)
    coarse = estimate_delta(pol, mot, grid16, scan, scan_points=20)
    fine = estimate_delta(pol, mot, grid16, scan, scan_points=40)
    assert coarse["delta"] > 0 and fine["delta"] > 0
    assert abs(coarse["delta"] - fine["delta"]) <= coarse["resolution"] + 1e-12


def test_estimate_delta_too_coarse_raises(grid16):
    # an aggressive threshold trips at the very first scan step
    pol = _policy(c0=200.0, max_interval=0.25)
    mot = ShearMotion(0.4, math.pi, t_max=1.0)
    with pytest.raises(ValueError, match="too coarse"):
        estimate_delta(pol, mot, grid16, [0.4], scan_points=10)
