"""Independent fixed-domain incompressible flow solver.

This is the brute-force cross-check for the identity-motion configuration:
the same semi-implicit projection scheme, assembled from plain Laplacian and
advection stencils, deliberately bypassing the whole metric code path.  It
shares only the grid/field primitives, the projection, and the Krylov
kernels, so a regression anywhere in the geometry-aware machinery shows up
as a divergence between the two solvers under identity motion.
"""

from __future__ import annotations

import math
from dataclasses import replace

import numpy as np

from . import fields
from .fields import (
    PoissonSolver,
    SolverError,
    VectorField,
    component_tables,
    leray_project,
    pack,
    u1_to_u2_points,
    u2_to_u1_points,
    unpack,
)
from .sde import (
    NumericalError,
    RngCursor,
    SimConfig,
    SolverState,
    Trajectory,
    _noise_combination,
    sample_increments,
)
from .geometry import IdentityMotion
from .operators import build_bundle

__all__ = ["oracle_advection", "oracle_laplacian", "oracle_step",
           "oracle_trajectory"]


def oracle_laplacian(v: VectorField) -> VectorField:
    """Plain componentwise five-point Laplacian with no-slip ghosts."""
    dx = v.grid.dx
    t1 = component_tables(v.u1, 0, dx)
    t2 = component_tables(v.u2, 1, dx)
    return VectorField(v.grid, t1["d11"] + t1["d22"], t2["d11"] + t2["d22"])


def oracle_advection(v: VectorField) -> VectorField:
    """Plain (v . grad) v with four-point cross-component averages."""
    dx = v.grid.dx
    t1 = component_tables(v.u1, 0, dx)
    t2 = component_tables(v.u2, 1, dx)
    v2_at1 = u2_to_u1_points(v.u2)
    v1_at2 = u1_to_u2_points(v.u1)
    a1 = v.u1 * t1["d1"] + v2_at1 * t1["d2"]
    a2 = v1_at2 * t2["d1"] + v.u2 * t2["d2"]
    return VectorField(v.grid, a1, a2)


def oracle_step(v: VectorField, dt: float, forcing: VectorField | None = None,
                step_tol: float = 1e-12, step_maxiter: int = 800,
                solver: PoissonSolver | None = None) -> VectorField:
    """One semi-implicit projection step of the classical equation.

    Implicit diffusion, explicit advection (plus an optional explicit
    forcing increment), final re-projection; the same solve tolerances as
    the transformed stepper.
    """
    grid = v.grid
    explicit = v - dt * oracle_advection(v)
    if forcing is not None:
        explicit = explicit + forcing
    rhs = leray_project(explicit, solver=solver)

    def op(x):
        w = unpack(grid, x)
        return pack(leray_project(w - dt * oracle_laplacian(w), solver=solver))

    try:
        xstar, _, _ = fields.bicgstab_solve(op, pack(rhs), x0=pack(v),
                                            tol=step_tol, maxiter=step_maxiter)
    except SolverError as e:
        raise NumericalError(f"oracle implicit solve failed: {e}") from e
    out = leray_project(unpack(grid, xstar), solver=solver)
    if not out.is_finite():
        raise NumericalError("oracle produced a non-finite state")
    return out


def oracle_trajectory(config: SimConfig, seed: int, member: int = 0) -> Trajectory:
    """Deterministic or shared-noise run of the plain solver.

    Only the identity motion is supported; diagnostics are recorded with the
    flat-metric bundle so the output format matches the transformed solver.
    """
    if not isinstance(config.motion, IdentityMotion):
        raise ValueError("the reference solver only runs the identity motion")
    grid = config.grid
    solver = PoissonSolver(grid, config.opts.poisson_method,
                           config.opts.poisson_tol)
    bundle = build_bundle(config.motion, 0.0, grid)
    v = leray_project(config.v0, solver=solver)
    state = SolverState(t=0.0, t0=0.0, v=v, n_level=math.inf,
                        rng=RngCursor(seed, member, 0))
    traj = Trajectory(grid.n, member)
    n_steps = config.n_steps()
    for k in range(n_steps):
        traj.record(state, bundle)
        forcing = None
        if config.noise is not None:
            db = sample_increments(state.rng, config.dt, config.noise.K)
            forcing = _noise_combination(state.v, config.noise, db)
        v_new = oracle_step(state.v, config.dt, forcing,
                            step_tol=config.opts.step_tol,
                            step_maxiter=config.opts.step_maxiter,
                            solver=solver)
        state = replace(state, t=state.t + config.dt, v=v_new,
                        rng=state.rng.advance())
    traj.record(state, bundle)
    traj.final_state = state
    return traj
