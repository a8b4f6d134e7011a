"""Time integration of the transformed stochastic flow equation.

One trajectory advances a reference-square velocity with a semi-implicit
Euler-Maruyama scheme: the stiff pulled-back second-order term is implicit,
the cutoff advection, domain-velocity and noise terms are explicit at the
old state, and every new state is re-projected onto the discretely
solenoidal subspace.  Multiplying the update equation by the metric-weighted
projection turns the implicit solve into

    P0(h v* - dt L v*) = P0( h (v_n - dt (g_N N(v_n) + M v_n) + noise) )

so no inner inverse-projection solve is needed during stepping.

Noise is a K-mode truncation driven by counter-based Gaussian increments:
the increment at a given (seed, member, step, mode) never depends on how the
trajectory got there, which is what makes cutoff escalation and
re-referencing exactly path-preserving.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import fields, rereference as reref
from .diagnostics import theta
from .fields import (
    Grid,
    PoissonSolver,
    SolverError,
    VectorField,
    divergence,
    inner_L2,
    leray_project,
    norm_H1,
    norm_L2,
    pack,
    stream_to_field,
    unpack,
)
from .geometry import DomainMotion
from .operators import (
    OperatorBundle,
    apply_h,
    apply_Lh_sharp,
    apply_M,
    build_bundle,
    cutoff_gN,
    nonlinear_N,
)

__all__ = [
    "NumericalError",
    "NoiseModel",
    "make_noise_model",
    "RngCursor",
    "sample_increments",
    "apply_noise",
    "sigma_modes",
    "SolverState",
    "StepperOptions",
    "SimConfig",
    "Trajectory",
    "step",
    "detect_stopping",
    "escalate",
    "simulate",
    "save_checkpoint",
    "load_checkpoint",
]


class NumericalError(RuntimeError):
    """Non-finite state or unrecoverable solver failure during stepping."""


# --------------------------------------------------------------------------
# noise
# --------------------------------------------------------------------------

_MODE_ORDER = [(1, 1), (2, 1), (1, 2), (2, 2), (3, 1), (1, 3), (3, 2), (2, 3),
               (3, 3), (4, 1), (1, 4), (4, 2), (2, 4), (4, 3), (3, 4), (4, 4)]


@dataclass(frozen=True)
class NoiseModel:
    """Truncated noise: K solenoidal mode shapes with a coupling rule.

    coupling 'additive' uses state-independent increments a_k m_k dB_k;
    'diagonal' scales each mode by the state's own component along it.
    ``f_bound`` is the declared growth constant: the summed squared H1 size
    of the noise is at most f_bound * (1 + |v|_H1^2) for either coupling.
    """

    K: int
    modes: tuple
    coupling: str
    amplitudes: np.ndarray
    f_bound: float

    def __post_init__(self):
        if self.coupling not in ("additive", "diagonal"):
            raise ValueError(f"unknown noise coupling '{self.coupling}'")
        if len(self.modes) != self.K or len(self.amplitudes) != self.K:
            raise ValueError("noise model needs K modes and K amplitudes")


def _orthonormalize(modes, tol=1e-12):
    out = []
    for m in modes:
        w = m.copy()
        for q in out:
            w = w - inner_L2(w, q) * q
        nrm = norm_L2(w)
        if nrm < tol:
            raise ValueError("noise modes are numerically dependent")
        out.append((1.0 / nrm) * w)
    return out


def make_noise_model(grid: Grid, K: int = 8, coupling: str = "additive",
                     amplitude: float = 0.1, decay: float = 0.8) -> NoiseModel:
    """Built-in noise: windowed trigonometric stream modes, orthonormalized.

    Modes are discrete curls of no-slip stream functions, hence exactly
    divergence-free; amplitudes decay geometrically mode by mode.
    """
    if K < 1 or K > len(_MODE_ORDER):
        raise ValueError(f"K must be in [1, {len(_MODE_ORDER)}]")
    x = grid.node_points[..., 0]
    y = grid.node_points[..., 1]
    window = 256.0 * (x * (1 - x) * y * (1 - y)) ** 2
    raw = []
    for a, b in _MODE_ORDER[:K]:
        psi = window * np.sin(a * np.pi * x) * np.sin(b * np.pi * y)
        raw.append(stream_to_field(grid, psi))
    modes = tuple(_orthonormalize(raw))
    amps = amplitude * decay ** np.arange(K)
    h1 = np.array([norm_H1(m) for m in modes])
    if coupling == "additive":
        f_bound = float(np.sum(amps ** 2 * h1 ** 2))
    else:
        f_bound = float(np.max(amps ** 2 * h1 ** 2))
    return NoiseModel(K=K, modes=modes, coupling=coupling,
                      amplitudes=amps, f_bound=f_bound)


def sigma_modes(v: VectorField, noise: NoiseModel):
    """Per-mode noise fields sigma_k(v) (before any Wiener increment)."""
    if noise.coupling == "additive":
        return [a * m for a, m in zip(noise.amplitudes, noise.modes)]
    return [a * inner_L2(v, m) * m for a, m in zip(noise.amplitudes, noise.modes)]


def _noise_combination(v: VectorField, noise: NoiseModel,
                       increments: np.ndarray) -> VectorField:
    out = VectorField.zeros(v.grid)
    if noise.coupling == "additive":
        for a, m, db in zip(noise.amplitudes, noise.modes, increments):
            out = out + (a * db) * m
    else:
        for a, m, db in zip(noise.amplitudes, noise.modes, increments):
            out = out + (a * inner_L2(v, m) * db) * m
    return out


def apply_noise(v: VectorField, noise: NoiseModel, increments,
                solver=None) -> VectorField:
    """Sum of mode contributions weighted by the increments, projected."""
    increments = np.asarray(increments, dtype=float)
    if increments.shape != (noise.K,):
        raise ValueError("need one increment per noise mode")
    return leray_project(_noise_combination(v, noise, increments), solver=solver)


# --------------------------------------------------------------------------
# counter-based increments
# --------------------------------------------------------------------------

class RngCursor(NamedTuple):
    """Pure cursor into the counter-based Gaussian stream."""

    seed: int
    member: int
    step: int

    def advance(self) -> "RngCursor":
        return self._replace(step=self.step + 1)


def sample_increments(rng: RngCursor, dt: float, K: int) -> np.ndarray:
    """K independent N(0, dt) increments for the cursor's step.

    Counter-based: the value depends only on (seed, member, step, mode), so
    replaying any step of any trajectory reproduces the same numbers.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    bitgen = np.random.Philox(key=[rng.seed, rng.member],
                              counter=[0, 0, 0, rng.step])
    g = np.random.Generator(bitgen)
    return math.sqrt(dt) * g.standard_normal(K)


# --------------------------------------------------------------------------
# state and stepping
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SolverState:
    """Complete integration state: carrying it forward is side-effect free."""

    t: float
    t0: float
    v: VectorField
    n_level: float
    rng: RngCursor
    escalations: int = 0
    stopped: bool = False
    non_terminated: bool = False

    @property
    def step_index(self) -> int:
        return self.rng.step


@dataclass(frozen=True)
class StepperOptions:
    step_tol: float = 1e-12
    step_maxiter: int = 800
    p0h_tol: float = 1e-8
    poisson_method: str = "direct"
    poisson_tol: float = 1e-10
    dt_max: float = math.inf


def step(state: SolverState, dt: float, bundle: OperatorBundle,
         noise: NoiseModel | None = None, opts: StepperOptions = StepperOptions(),
         solver: PoissonSolver | None = None,
         increments: np.ndarray | None = None) -> SolverState:
    """One semi-implicit Euler-Maruyama step from the bundle's time.

    Implicit in the second-order term, explicit in cutoff advection,
    domain-velocity transport and noise; the result is re-projected.
    ``increments`` overrides the counter-based draw (coupled-refinement
    studies); by default the cursor's own step supplies them.
    """
    if dt <= 0 or dt > opts.dt_max * (1 + 1e-12):
        raise ValueError(f"dt {dt} outside (0, {opts.dt_max}]")
    if not state.v.is_finite():
        raise NumericalError(f"non-finite state entering step at t={state.t:.6g}")
    grid = state.v.grid
    v = state.v
    g = cutoff_gN(fields.norm_1t(v, bundle.metric_c), state.n_level)
    explicit = v - dt * (g * nonlinear_N(v, bundle) + apply_M(v, bundle))
    if noise is not None:
        db = sample_increments(state.rng, dt, noise.K) if increments is None \
            else np.asarray(increments, dtype=float)
        explicit = explicit + _noise_combination(v, noise, db)
    rhs = leray_project(apply_h(explicit, bundle), solver=solver)

    def op(x):
        w = unpack(grid, x)
        return pack(leray_project(apply_h(w, bundle) - dt * apply_Lh_sharp(w, bundle),
                                  solver=solver))

    try:
        xstar, _, _ = fields.bicgstab_solve(op, pack(rhs), x0=pack(v),
                                            tol=opts.step_tol,
                                            maxiter=opts.step_maxiter)
    except SolverError as e:
        raise NumericalError(
            f"implicit step solve failed at t={state.t:.6g}: {e}") from e
    v_new = leray_project(unpack(grid, xstar), solver=solver)
    if not v_new.is_finite():
        raise NumericalError(f"non-finite state detected at t={state.t + dt:.6g}")
    return replace(state, t=state.t + dt, v=v_new, rng=state.rng.advance())


def detect_stopping(state: SolverState, bundle: OperatorBundle) -> bool:
    """True when the metric first-order norm exceeds the cutoff level."""
    if math.isinf(state.n_level):
        return False
    return fields.norm_1t(state.v, bundle.metric_c) > state.n_level


def escalate(state: SolverState) -> SolverState:
    """Double the cutoff level, keeping state and noise path untouched."""
    return replace(state, n_level=2.0 * state.n_level,
                   escalations=state.escalations + 1)


# --------------------------------------------------------------------------
# trajectory bookkeeping
# --------------------------------------------------------------------------

_CSV_HEADER = "step,t,t0,N,l2_moving,h1_t,theta,max_div,event,event_info"


@dataclass
class Trajectory:
    """Per-step scalar diagnostics plus events and optional snapshots."""

    grid_n: int
    member: int
    steps: list = field(default_factory=list)
    times: list = field(default_factory=list)
    t0s: list = field(default_factory=list)
    levels: list = field(default_factory=list)
    l2_moving: list = field(default_factory=list)
    h1t: list = field(default_factory=list)
    theta_vals: list = field(default_factory=list)
    max_div: list = field(default_factory=list)
    events: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)
    non_terminated: bool = False
    final_state: SolverState | None = None
    _row_events: dict = field(default_factory=dict)

    def record(self, state: SolverState, bundle: OperatorBundle):
        h1 = fields.norm_1t(state.v, bundle.metric_c)
        l2m = math.sqrt(max(fields.inner_0t(state.v, state.v, bundle), 0.0))
        self.steps.append(state.step_index)
        self.times.append(state.t)
        self.t0s.append(state.t0)
        self.levels.append(state.n_level)
        self.l2_moving.append(l2m)
        self.h1t.append(h1)
        self.theta_vals.append(theta(h1 * h1))
        self.max_div.append(float(np.max(np.abs(divergence(state.v).data))))

    def log_event(self, step_index: int, t: float, kind: str, info: str = ""):
        self.events.append({"step": step_index, "t": t, "kind": kind, "info": info})
        prev = self._row_events.get(step_index)
        entry = (kind, info)
        self._row_events[step_index] = prev + [entry] if prev else [entry]

    def tau_hits(self):
        return [e for e in self.events if e["kind"] == "tau_hit"]

    def csv_rows(self) -> list[str]:
        rows = [_CSV_HEADER]
        for k in range(len(self.times)):
            s = self.steps[k]
            ev = self._row_events.get(s, [])
            kinds = ";".join(e[0] for e in ev)
            infos = ";".join(e[1] for e in ev)
            rows.append(
                f"{s},{self.times[k]!r},{self.t0s[k]!r},{self.levels[k]!r},"
                f"{self.l2_moving[k]!r},{self.h1t[k]!r},{self.theta_vals[k]!r},"
                f"{self.max_div[k]!r},{kinds},{infos}"
            )
        return rows


# --------------------------------------------------------------------------
# orchestration
# --------------------------------------------------------------------------

@dataclass
class SimConfig:
    """Everything one trajectory needs; built by the CLI from a config file."""

    grid: Grid
    motion: DomainMotion
    t_final: float
    dt: float
    v0: VectorField
    noise: NoiseModel | None = None
    n0: float = math.inf
    ceiling: float = math.inf
    escalate: bool = True
    policy: "reref.ReferencePolicy | None" = None
    forced_rereference: tuple = ()
    sample_every: int = 1
    snapshot_every: int = 0
    opts: StepperOptions = field(default_factory=StepperOptions)

    def n_steps(self) -> int:
        steps = round(self.t_final / self.dt)
        if abs(steps * self.dt - self.t_final) > 1e-9:
            raise ValueError("t_final must be an integer number of steps")
        return int(steps)


def simulate(config: SimConfig, seed: int, member: int = 0,
             start_state: SolverState | None = None,
             trajectory: Trajectory | None = None,
             hook=None) -> Trajectory:
    """Run one trajectory; deterministic in (config, seed, member).

    Per step: rebuild the operator bundle at the current (reference, time)
    pair, escalate the cutoff if the stopping criterion fired, apply any
    re-referencing due at this step boundary, record diagnostics, then
    advance.  ``start_state``/``trajectory`` support checkpoint resume, and
    ``hook(state, traj)`` runs after every completed step (checkpointing).
    """
    grid = config.grid
    solver = PoissonSolver(grid, config.opts.poisson_method, config.opts.poisson_tol)
    opts = replace(config.opts, dt_max=min(config.opts.dt_max, config.dt))
    if start_state is None:
        v0 = leray_project(config.v0, solver=solver)
        state = SolverState(t=0.0, t0=0.0, v=v0, n_level=config.n0,
                            rng=RngCursor(seed, member, 0))
    else:
        state = start_state
    traj = trajectory if trajectory is not None else Trajectory(grid.n, member)

    composed_cache: dict[float, DomainMotion] = {}

    def rebased(t0: float) -> DomainMotion:
        if t0 not in composed_cache:
            composed_cache[t0] = config.motion.with_reference(t0)
        return composed_cache[t0]

    forced = sorted(config.forced_rereference)
    n_steps = config.n_steps()
    while state.step_index < n_steps:
        k = state.step_index
        bundle = build_bundle(rebased(state.t0), state.t, grid)

        if config.escalate:
            while detect_stopping(state, bundle):
                new_level = 2.0 * state.n_level
                traj.log_event(k, state.t, "tau_hit", f"N={state.n_level!r}")
                if new_level > config.ceiling:
                    traj.log_event(k, state.t, "ceiling",
                                   f"N={state.n_level!r}")
                    state = replace(state, stopped=True, non_terminated=True)
                    break
                state = escalate(state)
                traj.log_event(k, state.t, "escalate", f"N={state.n_level!r}")
        elif detect_stopping(state, bundle) and not traj.tau_hits():
            # fixed-level run: record the first crossing time only
            traj.log_event(k, state.t, "tau_hit", f"N={state.n_level!r}")

        if state.stopped:
            break

        do_reref = False
        reason = ""
        while forced and state.t >= forced[0] - 1e-9:
            forced.pop(0)
            do_reref = True
            reason = "forced"
        if not do_reref and config.policy is not None and state.t > state.t0:
            if k % max(config.policy.check_every, 1) == 0:
                sig = reref.rereference_signal(config.policy, config.motion,
                                               state.t0, state.t, grid, bundle)
                if sig["trigger"]:
                    do_reref = True
                    reason = (f"deviation={sig['deviation']!r};"
                              f"drift={sig['drift']!r}")
        if do_reref:
            old_t0 = state.t0
            state = reref.rereference(state, config.motion, state.t, solver=solver)
            traj.log_event(k, state.t, "rereference",
                           f"old_t0={old_t0!r};{reason}")
            bundle = build_bundle(rebased(state.t0), state.t, grid)

        if k % config.sample_every == 0:
            traj.record(state, bundle)
        if config.snapshot_every and k % config.snapshot_every == 0:
            traj.snapshots.append((state.t, state.v.copy()))

        state = step(state, config.dt, bundle, config.noise, opts, solver=solver)
        if hook is not None:
            hook(state, traj)

    final_bundle = build_bundle(rebased(state.t0), state.t, grid)
    if config.escalate and not state.stopped and detect_stopping(state, final_bundle):
        traj.log_event(state.step_index, state.t, "tau_hit",
                       f"N={state.n_level!r}")
    traj.record(state, final_bundle)
    if config.snapshot_every:
        traj.snapshots.append((state.t, state.v.copy()))
    traj.non_terminated = state.non_terminated
    traj.final_state = state
    return traj


# --------------------------------------------------------------------------
# checkpointing (bit-exact resume)
# --------------------------------------------------------------------------

_CKPT_MAGIC = b"MNSC"
_CKPT_VERSION = 1


def save_checkpoint(path, state: SolverState, config_text: str,
                    csv_rows: list[str]):
    """Binary checkpoint: exact state arrays plus run context.

    Floats go through hex encoding so the resumed run is bit-identical.
    """
    meta = {
        "t": state.t.hex(),
        "t0": state.t0.hex(),
        "n_level": float(state.n_level).hex(),
        "seed": state.rng.seed,
        "member": state.rng.member,
        "step": state.rng.step,
        "escalations": state.escalations,
        "stopped": state.stopped,
        "non_terminated": state.non_terminated,
        "grid_n": state.v.grid.n,
        "config_text": config_text,
        "csv_rows": csv_rows,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    u1 = np.ascontiguousarray(state.v.u1, dtype="<f8").tobytes()
    u2 = np.ascontiguousarray(state.v.u2, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(struct.pack("<4sIQQQ", _CKPT_MAGIC, _CKPT_VERSION,
                            len(blob), len(u1), len(u2)))
        f.write(blob)
        f.write(u1)
        f.write(u2)


def load_checkpoint(path):
    with open(path, "rb") as f:
        magic, version, nb, n1, n2 = struct.unpack("<4sIQQQ", f.read(32))
        if magic != _CKPT_MAGIC or version != _CKPT_VERSION:
            raise ValueError(f"bad checkpoint header in {path}")
        meta = json.loads(f.read(nb).decode())
        u1 = np.frombuffer(f.read(n1), dtype="<f8")
        u2 = np.frombuffer(f.read(n2), dtype="<f8")
    n = meta["grid_n"]
    grid = Grid(n)
    v = VectorField(grid, u1.reshape(n + 1, n).copy(),
                    u2.reshape(n, n + 1).copy(), clamp=False)
    state = SolverState(
        t=float.fromhex(meta["t"]),
        t0=float.fromhex(meta["t0"]),
        v=v,
        n_level=float.fromhex(meta["n_level"]),
        rng=RngCursor(meta["seed"], meta["member"], meta["step"]),
        escalations=meta["escalations"],
        stopped=meta["stopped"],
        non_terminated=meta["non_terminated"],
    )
    return state, meta["config_text"], meta["csv_rows"]
