"""Audit quantities: moment diagnostics, norm-equivalence constants, and
empirical checks of the structural inequalities the scheme relies on.

Everything here reports fitted constants; nothing is asserted against
closed-form values, because none exist.  Audits are deterministic functions
of (seed, configuration) and serialize to flat key = value text files.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import fields
from .fields import (
    Grid,
    VectorField,
    inner_L2,
    leray_project,
    norm_A,
    norm_H2,
    norm_L2,
    pack,
    random_solenoidal,
    unpack,
    vector_laplacian,
)
from .geometry import DomainMotion, evaluate_motion, metric_tensors
from .operators import (
    OperatorBundle,
    apply_Lh_sharp,
    apply_M,
    apply_h,
    build_bundle,
    cutoff_gN,
    drift,
    nonlinear_N,
    solve_P0h,
)

__all__ = [
    "theta",
    "theta_prime",
    "AuditReport",
    "moment_audit",
    "iota_audit",
    "iota_apply",
    "norm_equivalence_audit",
    "energy_series",
    "stokes_solve",
    "dual_pair",
    "monotonicity_probe",
    "metric_rate_pairing",
    "phi0_pairing",
]


def theta(x: float) -> float:
    """Doubly logarithmic moment gauge log(1 + log(1 + x)); monotone, 0 at 0."""
    if x < 0:
        raise ValueError("theta needs a nonnegative argument")
    return math.log(1.0 + math.log1p(x))


def theta_prime(x: float) -> float:
    if x < 0:
        raise ValueError("theta needs a nonnegative argument")
    return 1.0 / ((1.0 + x) * (1.0 + math.log1p(x)))


@dataclass
class AuditReport:
    """Named scalar results plus enough context to reproduce them."""

    name: str
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def check_finite(self):
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise ValueError(f"audit value {k} is not finite")

    def lines(self) -> list[str]:
        out = [f"audit = {self.name}"]
        for k in sorted(self.meta):
            out.append(f"meta.{k} = {self.meta[k]}")
        for k in sorted(self.counts):
            out.append(f"count.{k} = {self.counts[k]}")
        for k in sorted(self.values):
            out.append(f"{k} = {self.values[k]!r}")
        return out

    def save(self, path):
        with open(path, "w") as f:
            f.write("\n".join(self.lines()) + "\n")


# --------------------------------------------------------------------------
# moment diagnostics
# --------------------------------------------------------------------------

def moment_audit(ensembles: dict, u0_h1: float, u0_l2: float) -> AuditReport:
    """Monte Carlo estimate of E sup theta(|v|_{1,t}^2) per cutoff level.

    ``ensembles`` maps cutoff level -> list of trajectories.  Reports the
    per-level estimates, their relative spread, and the smallest constant C
    such that every estimate is bounded by theta(u0_h1^2) + C (1 + u0_l2^2).
    """
    if not ensembles:
        raise ValueError("empty ensemble")
    rep = AuditReport("moment")
    estimates = {}
    for lvl, trajs in sorted(ensembles.items()):
        if len(trajs) < 2:
            raise ValueError("need at least two trajectories per level")
        sups = [max(t.theta_vals) for t in trajs]
        estimates[lvl] = float(np.mean(sups))
        rep.values[f"esup_theta_N{lvl:g}"] = estimates[lvl]
        rep.counts[f"members_N{lvl:g}"] = len(trajs)
    vals = np.array(list(estimates.values()))
    base = theta(u0_h1 ** 2)
    denom = 1.0 + u0_l2 ** 2
    rep.values["fitted_C"] = float(max(0.0, (vals.max() - base) / denom))
    rep.values["theta_u0"] = base
    mean = float(vals.mean())
    rep.values["relative_spread"] = float(
        (vals.max() - vals.min()) / mean) if mean > 0 else 0.0
    rep.check_finite()
    return rep


# --------------------------------------------------------------------------
# Stokes solve and the reference-comparison operator
# --------------------------------------------------------------------------

def stokes_solve(f: VectorField, tol: float = 1e-10, maxiter: int = 20000,
                 solver=None) -> VectorField:
    """Solve (projected Laplacian) u = f on solenoidal no-slip fields.

    The operator is symmetric negative definite on the solenoidal subspace,
    so conjugate gradients on the negated system applies.
    """
    grid = f.grid

    def op(x):
        w = unpack(grid, x)
        return pack(leray_project(vector_laplacian(w), solver=solver) * -1.0)

    x, _, _ = fields.cg_solve(op, pack(leray_project(f, solver=solver) * -1.0),
                              tol=tol, maxiter=maxiter)
    return leray_project(unpack(grid, x), solver=solver)


def iota_apply(v: VectorField, bundle: OperatorBundle, tol: float = 1e-10,
               solver=None) -> VectorField:
    """Reference-comparison operator: Stokes-solve of the projected
    pulled-back second-order operator.  Identity at the reference time."""
    return stokes_solve(leray_project(apply_Lh_sharp(v, bundle), solver=solver),
                        tol=tol, solver=solver)


def iota_audit(motion: DomainMotion, t: float, grid: Grid, probes,
               tol: float = 1e-10, neumann_maxiter: int = 200,
               solver=None) -> AuditReport:
    """Bounds of the comparison operator and its inverse at one time.

    Reports the largest H2 amplification of the operator (c2 estimate), the
    deviation-from-identity ratio (flagging when it exceeds the 1/2
    perturbation margin), and the inverse amplification (c3) obtained by
    fixed-point iteration, which converges exactly when the deviation ratio
    is below one.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("iota audit needs probe fields")
    bundle = build_bundle(motion, t, grid)
    rep = AuditReport("iota", meta={"motion": motion.kind, "t": t, "n": grid.n})
    c2 = 0.0
    dev = 0.0
    c3 = 0.0
    for v in probes:
        vh = norm_H2(v)
        iv = iota_apply(v, bundle, tol=tol, solver=solver)
        c2 = max(c2, norm_H2(iv) / vh)
        dev = max(dev, norm_H2(iv - v) / vh)
        # inverse by fixed-point iteration x <- v + (x - iota x)
        x = v.copy()
        converged = False
        for _ in range(neumann_maxiter):
            x_next = v + (x - iota_apply(x, bundle, tol=tol, solver=solver))
            if norm_H2(x_next - x) <= 1e-8 * max(vh, 1.0):
                x = x_next
                converged = True
                break
            x = x_next
        if not converged:
            raise fields.SolverError(
                "fixed-point inversion did not converge; deviation beyond "
                "the perturbation regime")
        c3 = max(c3, norm_H2(x) / vh)
    rep.values["c2"] = float(c2)
    rep.values["c3"] = float(c3)
    rep.values["deviation"] = float(dev)
    rep.values["margin_ok"] = 1.0 if dev <= 0.5 else 0.0
    rep.counts["probes"] = len(probes)
    rep.check_finite()
    return rep


# --------------------------------------------------------------------------
# norm equivalence
# --------------------------------------------------------------------------

def norm_equivalence_audit(grid: Grid, n_samples: int = 50, seed: int = 7,
                           solver=None) -> AuditReport:
    """Pairwise ratio ranges among the five second-order norms.

    Samples random solenoidal interior-supported fields; reports min/max of
    each ratio, the constant C0 = max |v|_H2 / |Av|, and the spectral floor
    min |lap v| / |v|.
    """
    if n_samples < 2:
        raise ValueError("need at least two samples")
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(n_samples):
        v = random_solenoidal(grid, rng)
        l2 = norm_L2(v)
        lap = norm_L2(vector_laplacian(v))
        a = norm_A(v, solver=solver)
        h2 = norm_H2(v)
        n2 = math.sqrt(l2 ** 2 + lap ** 2)
        n3 = math.sqrt(l2 ** 2 + a ** 2)
        rows.append((h2, n2, n3, lap, a, l2))
    rows = np.array(rows)
    rep = AuditReport("norms", meta={"n": grid.n, "seed": seed})
    names = ["H2", "n2", "n3", "n4", "n5"]
    for i in range(5):
        for j in range(5):
            if i == j:
                continue
            r = rows[:, i] / rows[:, j]
            rep.values[f"ratio_{names[i]}_over_{names[j]}_max"] = float(r.max())
            rep.values[f"ratio_{names[i]}_over_{names[j]}_min"] = float(r.min())
    rep.values["C0"] = float(np.max(rows[:, 0] / rows[:, 4]))
    rep.values["rayleigh_floor"] = float(np.min(rows[:, 3] / rows[:, 5]))
    rep.counts["samples"] = n_samples
    rep.check_finite()
    return rep


def estimate_c0(grid: Grid, n_samples: int = 30, seed: int = 7,
                solver=None) -> float:
    """Empirical constant bounding |v|_H2 by the projected-Laplacian norm."""
    rep = norm_equivalence_audit(grid, n_samples=n_samples, seed=seed,
                                 solver=solver)
    return rep.values["C0"]


# --------------------------------------------------------------------------
# energy series and structural probes
# --------------------------------------------------------------------------

def energy_series(traj) -> list[dict]:
    """Per-sample energy table from a trajectory's recorded diagnostics."""
    rows = []
    for k in range(len(traj.times)):
        rows.append({
            "t": traj.times[k],
            "l2_moving": traj.l2_moving[k],
            "h1_t": traj.h1t[k],
            "theta": theta(traj.h1t[k] ** 2),
            "dissipation": (traj.l2_moving[k] ** 2 - traj.l2_moving[k - 1] ** 2)
            if k > 0 else 0.0,
        })
    return rows


def dual_pair(f: VectorField, x: VectorField, solver=None) -> float:
    """Variational dual pairing <f, x> = -(f, (projected Laplacian) x)."""
    return -inner_L2(f, leray_project(vector_laplacian(x), solver=solver))


def drift_dual_pair(v: VectorField, x: VectorField, bundle: OperatorBundle,
                    n=None, tol: float = 1e-8, solver=None) -> float:
    """Dual pairing of the full drift against the pulled-back operator of x.

    Equals -(drift(v), P L x)_{L2}; the building block of the contraction
    probe below.
    """
    d = drift(v, bundle, n=n, tol=tol, solver=solver)
    return -inner_L2(d, leray_project(apply_Lh_sharp(x, bundle), solver=solver))


def monotonicity_probe(bundle: OperatorBundle, pairs, n=5.0,
                       tol: float = 1e-8, solver=None) -> AuditReport:
    """Empirical contraction audit of the drift between pairs of states.

    For each pair (v, w) the quantity 2 <A(v) - A(w), v - w> is compared
    against -(c/2)|v-w|_H2^2 + C_N (1 + |w|_H2 |w|_{1,t}) |v-w|_{1,t}^2.
    The report contains fitted constants (c, C_N) making the bound hold on
    every sampled pair; the audit asserts c > 0, not the inequality itself.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("need probe pairs")
    q = []
    a_h2 = []
    b_wt = []
    for v, w in pairs:
        dv = drift(v, bundle, n=n, tol=tol, solver=solver)
        dw = drift(w, bundle, n=n, tol=tol, solver=solver)
        diff = v - w
        lhs = 2.0 * (-inner_L2(dv - dw,
                               leray_project(apply_Lh_sharp(diff, bundle),
                                             solver=solver)))
        q.append(lhs)
        a_h2.append(norm_H2(diff) ** 2)
        wt = fields.norm_1t(w, bundle.metric_c)
        b_wt.append((1.0 + norm_H2(w) * wt)
                    * fields.norm_1t(diff, bundle.metric_c) ** 2)
    q = np.array(q)
    a_h2 = np.array(a_h2)
    b_wt = np.array(b_wt)
    raw = -q / a_h2
    c_fit = float(max(1e-12, 0.5 * np.min(raw))) if np.min(raw) > 0 else 1e-12
    resid = q + 0.5 * c_fit * a_h2
    cn_fit = float(max(0.0, np.max(resid / b_wt)))
    rep = AuditReport("monotonicity", meta={"t": bundle.t, "n_cutoff": n})
    rep.values["c"] = c_fit
    rep.values["C_N"] = cn_fit
    rep.values["margin_worst"] = float(np.max(q + 0.5 * c_fit * a_h2
                                              - cn_fit * b_wt))
    rep.counts["pairs"] = len(pairs)
    rep.check_finite()
    return rep


def metric_rate_pairing(motion: DomainMotion, t: float, grid: Grid,
                        v: VectorField, w: VectorField,
                        eps: float = 1e-5) -> float:
    """Centered finite difference in time of the first-order metric pairing.

    Diagnostic realization of the metric-rate operator; never used by the
    stepper.
    """
    def val(tt):
        m = metric_tensors(motion.sample(tt, grid.center_points))
        return fields.inner_1t(v, w, m)

    return (val(t + eps) - val(t - eps)) / (2.0 * eps)


def phi0_pairing(bundle: OperatorBundle, v: VectorField, w: VectorField) -> float:
    """Pairing with the analytic time derivative of the metric weight:
    integral of (dh/dt)_ij v_i w_j over the square (face quadrature)."""
    s1, s2 = bundle.sample.u1, bundle.sample.u2

    def dh(s):
        return (np.einsum("...mj,...mk->...jk", s.d2r_dtdy, s.jac)
                + np.einsum("...mj,...mk->...jk", s.jac, s.d2r_dtdy))

    return fields.inner_0t(v, w, fields.FaceMetric(dh(s1), dh(s2)))
