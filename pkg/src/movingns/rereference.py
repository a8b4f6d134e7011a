"""Piecewise re-referencing of the pulled-back formulation.

As the domain deforms away from the configuration it was referenced at, the
pulled-back second-order operator drifts away from the flat Laplacian and
the solver's variational structure degrades.  This module watches that
drift, decides when to advance the reference time, re-expresses the state
with respect to the new reference via an inverse/forward transform pair, and
estimates the guaranteed re-referencing interval by scanning reference
times.

The trigger compares a measured operator-deviation ratio against
safety/(2*C0), where C0 is the empirical constant relating the second-order
Sobolev norm to the projected-Laplacian norm (from the diagnostics audit),
with the coefficient sup-drift as a cheap secondary signal and a hard cap on
the interval length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .fields import (Grid, VectorField, cross_tables, leray_project,
                     norm_H2, random_solenoidal)
from .geometry import DomainMotion, evaluate_motion
from .operators import (OperatorBundle, build_bundle, deviation_on_tables,
                        table_drift_from_flat)
from .transform import piola_forward, piola_inverse

__all__ = [
    "ReferencePolicy",
    "rereference_signal",
    "should_rereference",
    "rereference",
    "estimate_delta",
]


@dataclass(frozen=True)
class ReferencePolicy:
    """Trigger thresholds for advancing the reference time.

    ``c0`` is the empirical norm constant (positive); ``safety`` in (0, 1)
    shrinks the theoretical deviation budget 1/(2 c0); ``max_interval`` caps
    the age of a reference unconditionally.  ``drift_threshold`` (optional)
    triggers on raw coefficient sup-drift.  Probe fields for the deviation
    measurement are regenerated deterministically from ``probe_seed``.
    """

    c0: float
    safety: float = 0.5
    max_interval: float = math.inf
    drift_threshold: float | None = None
    n_probes: int = 4
    probe_seed: int = 2024
    check_every: int = 1

    def __post_init__(self):
        if not (0.0 < self.safety < 1.0):
            raise ValueError("safety must be in (0, 1)")
        if not self.c0 > 0:
            raise ValueError("c0 must be positive")

    def deviation_budget(self) -> float:
        return self.safety / (2.0 * self.c0)


_PROBE_CACHE: dict = {}


def _probe_tables(policy: ReferencePolicy, grid: Grid):
    """Probe fields with precomputed derivative tables and H2 norms.

    The probes are fixed per (grid, seed, count), so their tables are
    cached; only the contraction with the coefficient tables varies in t.
    """
    key = (grid.n, policy.probe_seed, policy.n_probes)
    if key not in _PROBE_CACHE:
        rng = np.random.default_rng(policy.probe_seed)
        entries = []
        for _ in range(policy.n_probes):
            v = random_solenoidal(grid, rng)
            at1, at2 = cross_tables(v)
            entries.append((at1, at2, norm_H2(v)))
        _PROBE_CACHE[key] = entries
    return _PROBE_CACHE[key]


def _probe_fields(policy: ReferencePolicy, grid: Grid):
    rng = np.random.default_rng(policy.probe_seed)
    return [random_solenoidal(grid, rng)
            for _ in range(policy.n_probes)]


def rereference_signal(policy: ReferencePolicy, motion: DomainMotion,
                       t0: float, t: float, grid: Grid,
                       bundle: OperatorBundle | None = None) -> dict:
    """Measured deviation, coefficient drift, and the trigger decision."""
    if t < t0 - 1e-12:
        raise ValueError(f"invalid time ordering: t={t} < t0={t0}")
    if bundle is None:
        bundle = build_bundle(motion.with_reference(t0), t, grid)
    deviation = max(deviation_on_tables(bundle, at1, at2, h2)
                    for at1, at2, h2 in _probe_tables(policy, grid))
    drift = table_drift_from_flat(bundle)
    age = t - t0
    trigger = deviation >= policy.deviation_budget()
    if policy.drift_threshold is not None and drift >= policy.drift_threshold:
        trigger = True
    if age >= policy.max_interval - 1e-12:
        trigger = True
    return {
        "deviation": deviation,
        "drift": drift,
        "age": age,
        "budget": policy.deviation_budget(),
        "trigger": bool(trigger),
    }


def should_rereference(policy: ReferencePolicy, motion: DomainMotion,
                       t0: float, t: float, grid: Grid,
                       bundle: OperatorBundle | None = None) -> bool:
    return rereference_signal(policy, motion, t0, t, grid, bundle)["trigger"]


def rereference(state, motion: DomainMotion, t_new: float, solver=None):
    """Advance the reference time of a solver state to t_new (= state.t).

    The velocity is pushed to the moving domain with the outgoing reference
    map and pulled straight back with the incoming one; at the matched
    sample points that composes the two Jacobian factors.  Subsequent
    operator bundles must be built from the rebased motion.
    """
    if abs(t_new - state.t) > 1e-12:
        raise ValueError("re-referencing is only allowed at the current time")
    grid = state.v.grid
    old_sample = evaluate_motion(motion.with_reference(state.t0), t_new, grid)
    moving = piola_inverse(state.v, old_sample)
    new_sample = evaluate_motion(motion.with_reference(t_new), t_new, grid)
    v_new = piola_forward(moving, new_sample)
    v_new = leray_project(v_new, solver=solver)
    return replace(state, t0=float(t_new), v=v_new)


def estimate_delta(policy: ReferencePolicy, motion: DomainMotion, grid: Grid,
                   time_samples, scan_points: int = 40) -> dict:
    """Lower bound on the usable reference-interval length.

    For each scanned reference time the first trigger age of the policy is
    measured on a uniform scan of ``scan_points`` sub-steps covering
    max_interval; the reported delta is the minimum over reference times,
    with the scan resolution attached.  Raises if any reference trips the
    policy at the very first sub-step (scan too coarse for this motion).
    """
    time_samples = list(time_samples)
    if not time_samples:
        raise ValueError("need at least one reference time")
    horizon = min(policy.max_interval, motion.t_max)
    if not math.isfinite(horizon):
        horizon = motion.t_max
    res = horizon / scan_points
    first_ages = []
    for t0 in time_samples:
        age = None
        for k in range(1, scan_points + 1):
            t = t0 + k * res
            if t > motion.t_max + 1e-12:
                break
            if should_rereference(policy, motion, t0, t, grid):
                age = k * res
                if k == 1 and res < policy.max_interval - 1e-12:
                    raise ValueError(
                        f"policy triggers within one scan step at t0={t0:g}; "
                        "scan resolution too coarse")
                break
        if age is None:
            # never triggered before the horizon or time range ran out
            age = min(horizon, motion.t_max - t0)
            if age <= 0:
                continue
        if abs(age - policy.max_interval) < 1e-9:
            age = policy.max_interval
        first_ages.append(age)
    delta = float(min(first_ages))
    if not delta > 0:
        raise ValueError("estimated interval is not positive")
    return {"delta": delta, "resolution": res, "per_t0": first_ages}
