"""Assembly and application of the fixed-domain transformed operators.

Everything acting on the reference-square state during time stepping lives
here: the pulled-back second-order operator in tabulated non-divergence
form, the domain-velocity advection operator, the quadratic advection term
built from the covariant derivative, the metric-weighted projection and its
inverse, and the global advection cutoff.

An OperatorBundle freezes one (motion, time) evaluation: motion samples at
every staggered family, metric data, and the coefficient tables.  Bundles
are immutable and regenerate bit-identically from their inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import fields
from .fields import (
    Grid,
    VectorField,
    SolverError,
    cross_tables,
    u1_to_u2_points,
    u2_to_u1_points,
    leray_project,
    norm_L2,
    norm_H2,
    pack,
    unpack,
)
from .geometry import (
    DomainMotion,
    MotionSample,
    MetricData,
    christoffel,
    coefficient_tables,
    evaluate_motion,
    metric_tensors,
)

__all__ = [
    "CutoffLevel",
    "OperatorBundle",
    "build_bundle",
    "apply_h",
    "apply_Lh_sharp",
    "apply_Lh_sharp_minus_laplacian",
    "apply_M",
    "nonlinear_N",
    "apply_P0h",
    "solve_P0h",
    "cutoff_gN",
    "drift",
    "stokes_deviation",
]


@dataclass(frozen=True)
class CutoffLevel:
    """Positive advection cutoff level; math.inf disables the cutoff."""

    value: float

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError("cutoff level must be positive")


def _level(n) -> float:
    if n is None:
        return math.inf
    if isinstance(n, CutoffLevel):
        return n.value
    return float(n)


def cutoff_gN(r: float, n) -> float:
    """Global advection cutoff: min(1, N/r), with g(0) = 1.

    Satisfies 0 <= r*g(r) <= N and the Lipschitz bound
    |g(a) - g(b)| <= g(a) g(b) |a - b| / N.
    """
    if r < 0:
        raise ValueError("cutoff argument must be nonnegative")
    lvl = _level(n)
    if r <= lvl:
        return 1.0
    return lvl / r


@dataclass(frozen=True)
class OperatorBundle:
    """All operator data for one (motion, t) pair on one grid."""

    grid: Grid
    t: float
    motion: DomainMotion
    sample: MotionSample
    metric_c: MetricData
    h_u1: np.ndarray
    h_u2: np.ndarray
    gamma_u1: np.ndarray
    gamma_u2: np.ndarray
    tables_u1: tuple
    tables_u2: tuple
    rbar_t_u1: np.ndarray
    rbar_t_u2: np.ndarray
    mcoef_u1: np.ndarray
    mcoef_u2: np.ndarray


def build_bundle(motion: DomainMotion, t: float, grid: Grid) -> OperatorBundle:
    sample = evaluate_motion(motion, t, grid)
    s1, s2 = sample.u1, sample.u2
    h1 = np.einsum("...mj,...mk->...jk", s1.jac, s1.jac)
    h2 = np.einsum("...mj,...mk->...jk", s2.jac, s2.jac)
    # domain-velocity coupling coefficient (J^{-1})_{ik} d2r_k/(dt dy_j)
    mc1 = np.einsum("...ik,...kj->...ij", s1.jac_inv, s1.d2r_dtdy)
    mc2 = np.einsum("...ik,...kj->...ij", s2.jac_inv, s2.d2r_dtdy)
    return OperatorBundle(
        grid=grid,
        t=float(t),
        motion=motion,
        sample=sample,
        metric_c=metric_tensors(sample.centers),
        h_u1=h1,
        h_u2=h2,
        gamma_u1=christoffel(s1),
        gamma_u2=christoffel(s2),
        tables_u1=coefficient_tables(s1),
        tables_u2=coefficient_tables(s2),
        rbar_t_u1=s1.rbar_t,
        rbar_t_u2=s2.rbar_t,
        mcoef_u1=mc1,
        mcoef_u2=mc2,
    )


def apply_h(v: VectorField, b: OperatorBundle) -> VectorField:
    """Pointwise metric multiplication (h v)_i = h_ij v_j on the faces."""
    v2_at1 = u2_to_u1_points(v.u2)
    v1_at2 = u1_to_u2_points(v.u1)
    w1 = b.h_u1[..., 0, 0] * v.u1 + b.h_u1[..., 0, 1] * v2_at1
    w2 = b.h_u2[..., 1, 0] * v1_at2 + b.h_u2[..., 1, 1] * v.u2
    return VectorField(v.grid, w1, w2)


def _apply_tables(tabs1, tabs2, at1, at2) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the tabulated second-order operator on derivative tables."""
    outs = []
    for l, (tabs, at) in enumerate(((tabs1, at1), (tabs2, at2))):
        p2, p1, p0 = tabs
        out = np.zeros_like(at[l + 1]["val"])
        for p in (0, 1):
            tp = at[p + 1]
            out += (
                p2[..., 0, 0, p, l] * tp["d11"]
                + 2.0 * p2[..., 0, 1, p, l] * tp["d12"]
                + p2[..., 1, 1, p, l] * tp["d22"]
                + p1[..., 0, p, l] * tp["d1"]
                + p1[..., 1, p, l] * tp["d2"]
                + p0[..., p, l] * tp["val"]
            )
        outs.append(out)
    return outs[0], outs[1]


def apply_Lh_sharp(v: VectorField, b: OperatorBundle) -> VectorField:
    """Pulled-back second-order operator in tabulated coefficient form.

    Reduces exactly to the componentwise discrete Laplacian when the motion
    is the identity (flat metric).
    """
    at1, at2 = cross_tables(v)
    o1, o2 = _apply_tables(b.tables_u1, b.tables_u2, at1, at2)
    return VectorField(v.grid, o1, o2)


def _identity_deficit(tabs):
    """Coefficient tables minus their flat-Laplacian values."""
    p2, p1, p0 = tabs
    p2d = p2.copy()
    for l in (0, 1):
        for j in (0, 1):
            p2d[..., j, j, l, l] -= 1.0
    return p2d, p1, p0


def apply_Lh_sharp_minus_laplacian(v: VectorField, b: OperatorBundle) -> VectorField:
    """Deviation of the pulled-back operator from the flat Laplacian.

    Applied through the difference of the coefficient tables, so the result
    is exactly zero when the tables coincide with the flat ones.
    """
    at1, at2 = cross_tables(v)
    o1, o2 = _apply_tables(
        _identity_deficit(b.tables_u1), _identity_deficit(b.tables_u2), at1, at2
    )
    return VectorField(v.grid, o1, o2)


def apply_M(v: VectorField, b: OperatorBundle) -> VectorField:
    """First-order domain-velocity operator.

    (M v)_i = rbar_t_k (D_k v)_i + (J^{-1})_{ik} d2r_k/(dt dy_j) v_j;
    identically zero for static motions.
    """
    at1, at2 = cross_tables(v)
    outs = []
    for i, (at, gam, bvel, mc) in enumerate((
        (at1, b.gamma_u1, b.rbar_t_u1, b.mcoef_u1),
        (at2, b.gamma_u2, b.rbar_t_u2, b.mcoef_u2),
    )):
        out = np.zeros_like(at[i + 1]["val"])
        for k, dkey in ((0, "d1"), (1, "d2")):
            cov = at[i + 1][dkey].copy()
            for mm in (0, 1):
                cov += gam[..., i, k, mm] * at[mm + 1]["val"]
            out += bvel[..., k] * cov
        for j in (0, 1):
            out += mc[..., i, j] * at[j + 1]["val"]
        outs.append(out)
    return VectorField(v.grid, outs[0], outs[1])


def nonlinear_N(v: VectorField, b: OperatorBundle) -> VectorField:
    """Quadratic advection v_j (D_j v)_i with the covariant derivative.

    For the identity motion this is the standard (v . grad) v stencil.
    """
    at1, at2 = cross_tables(v)
    outs = []
    for i, (at, gam) in enumerate(((at1, b.gamma_u1), (at2, b.gamma_u2))):
        out = np.zeros_like(at[i + 1]["val"])
        for j, dkey in ((0, "d1"), (1, "d2")):
            cov = at[i + 1][dkey].copy()
            for mm in (0, 1):
                cov += gam[..., i, j, mm] * at[mm + 1]["val"]
            out += at[j + 1]["val"] * cov
        outs.append(out)
    return VectorField(v.grid, outs[0], outs[1])


def apply_P0h(v: VectorField, b: OperatorBundle,
              solver=None) -> VectorField:
    """Metric-weighted projection: Leray projection of h v."""
    return leray_project(apply_h(v, b), solver=solver)


def solve_P0h(w: VectorField, b: OperatorBundle, tol: float = 1e-8,
              maxiter: int = 400, solver=None) -> VectorField:
    """Invert the metric-weighted projection on solenoidal fields.

    ``w`` must be discretely solenoidal.  The restriction of the operator to
    that subspace is positive definite; the discrete application is only
    symmetric up to interpolation error, so a stabilized Krylov iteration is
    used.  Residual tolerance is relative.
    """
    grid = w.grid

    def op(x):
        return pack(apply_P0h(unpack(grid, x), b, solver=solver))

    try:
        x, _, _ = fields.bicgstab_solve(op, pack(w), x0=pack(w), tol=tol,
                                        maxiter=maxiter)
    except SolverError as e:
        raise SolverError(f"metric-projection solve failed: {e}",
                          iterations=e.iterations, residual=e.residual) from e
    return unpack(grid, x)


def drift(v: VectorField, b: OperatorBundle, n=None,
          tol: float = 1e-8, solver=None) -> VectorField:
    """Full deterministic drift of the transformed equation.

    Assembles, in order: the implicit-candidate diffusion term, the
    cutoff-scaled advection term and the domain-velocity term, each composed
    with the metric-weighted projection inverse.  With ``n`` None the cutoff
    factor is identically 1.
    """
    g = cutoff_gN(fields.norm_1t(v, b.metric_c), n)
    diff_term = leray_project(apply_Lh_sharp(v, b), solver=solver)
    transported = g * nonlinear_N(v, b) + apply_M(v, b)
    rhs2 = leray_project(apply_h(transported, b), solver=solver)
    return solve_P0h(diff_term - rhs2, b, tol=tol, solver=solver)


def table_drift_from_flat(b: OperatorBundle) -> float:
    """Sup-norm distance of the bundle's coefficient tables from flat form.

    Numerically identical (to roundoff) to the geometry-level coefficient
    drift against the reference time, but free: the tables are already in
    the bundle.
    """
    worst = 0.0
    for tabs in (b.tables_u1, b.tables_u2):
        for arr in _identity_deficit(tabs):
            worst = max(worst, float(np.max(np.abs(arr))))
    return worst


def deviation_on_tables(b: OperatorBundle, at1: dict, at2: dict,
                        h2_norm: float) -> float:
    """Deviation ratio for one probe given its precomputed derivative tables."""
    o1, o2 = _apply_tables(
        _identity_deficit(b.tables_u1), _identity_deficit(b.tables_u2), at1, at2
    )
    dev = norm_L2(VectorField(b.grid, o1, o2))
    return dev / h2_norm


def stokes_deviation(b: OperatorBundle, probes) -> float:
    """Largest ratio |(pulled-back - flat) second-order op| / H2 norm.

    A lower bound on the operator deviation used by the re-referencing
    trigger.  Exactly zero at the reference time.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("stokes_deviation needs at least one probe field")
    worst = 0.0
    for v in probes:
        den = norm_H2(v)
        if den == 0.0:
            raise ValueError("zero probe field")
        at1, at2 = cross_tables(v)
        worst = max(worst, deviation_on_tables(b, at1, at2, den))
    return worst
