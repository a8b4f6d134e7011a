"""Staggered-grid vector fields on the unit square and their calculus.

Layout (MAC): for an n x n cell grid with spacing dx = 1/n,
  * component 1 lives on vertical faces,   shape (n+1, n), point (i*dx, (j+.5)*dx)
  * component 2 lives on horizontal faces, shape (n, n+1), point ((i+.5)*dx, j*dx)
  * scalars live at cell centers,          shape (n, n)
The discrete divergence and gradient are exact adjoints, which makes the
pressure-projection an orthogonal projector onto discretely solenoidal
fields.  Velocity boundary conditions are homogeneous no-slip: the stored
normal components on the boundary faces are exactly zero, tangential wall
values enter through odd-reflected ghost layers.

Axis convention: axis 0 of every array runs along the first coordinate (x),
axis 1 along the second (y).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import NamedTuple

import numpy as np
from scipy.sparse import csc_matrix, lil_matrix
from scipy.sparse.linalg import splu

__all__ = [
    "Grid",
    "VectorField",
    "ScalarField",
    "GridMismatchError",
    "SolverError",
    "divergence",
    "gradient",
    "vector_laplacian",
    "PoissonSolver",
    "get_poisson_solver",
    "leray_project",
    "inner_L2",
    "norm_L2",
    "inner_0t",
    "inner_1t",
    "norm_1t",
    "norm_grad",
    "norm_H1",
    "norm_H2",
    "norm_A",
    "grad_at_centers",
    "at_centers",
    "component_tables",
    "cross_tables",
    "u1_to_u2_points",
    "u2_to_u1_points",
    "pack",
    "unpack",
    "cg_solve",
    "bicgstab_solve",
    "stream_to_field",
    "random_solenoidal",
    "taylor_green",
    "constant_field",
    "save_snapshot",
    "load_snapshot",
]


class GridMismatchError(ValueError):
    pass


class SolverError(RuntimeError):
    """Iterative solver failed to reach its tolerance."""

    def __init__(self, msg, iterations=None, residual=None):
        super().__init__(msg)
        self.iterations = iterations
        self.residual = residual


@dataclass(frozen=True)
class Grid:
    """Uniform staggered grid on [0, 1]^2 with n cells per side (n >= 8)."""

    n: int

    def __post_init__(self):
        if self.n < 8:
            raise ValueError("grid needs n >= 8")

    @property
    def dx(self) -> float:
        return 1.0 / self.n

    @cached_property
    def u1_points(self) -> np.ndarray:
        n, dx = self.n, self.dx
        x = np.arange(n + 1) * dx
        y = (np.arange(n) + 0.5) * dx
        return np.stack(np.meshgrid(x, y, indexing="ij"), axis=-1)

    @cached_property
    def u2_points(self) -> np.ndarray:
        n, dx = self.n, self.dx
        x = (np.arange(n) + 0.5) * dx
        y = np.arange(n + 1) * dx
        return np.stack(np.meshgrid(x, y, indexing="ij"), axis=-1)

    @cached_property
    def center_points(self) -> np.ndarray:
        n, dx = self.n, self.dx
        c = (np.arange(n) + 0.5) * dx
        return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)

    @cached_property
    def node_points(self) -> np.ndarray:
        n, dx = self.n, self.dx
        c = np.arange(n + 1) * dx
        return np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1)


@dataclass
class ScalarField:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.shape != (self.grid.n, self.grid.n):
            raise GridMismatchError("scalar data shape does not match grid")


class VectorField:
    """Two staggered component arrays; boundary normal entries are zero."""

    __slots__ = ("grid", "u1", "u2")

    def __init__(self, grid: Grid, u1, u2, clamp: bool = True):
        n = grid.n
        u1 = np.array(u1, dtype=float)
        u2 = np.array(u2, dtype=float)
        if u1.shape != (n + 1, n) or u2.shape != (n, n + 1):
            raise GridMismatchError("component shapes do not match grid")
        if clamp:
            u1[0, :] = 0.0
            u1[-1, :] = 0.0
            u2[:, 0] = 0.0
            u2[:, -1] = 0.0
        self.grid = grid
        self.u1 = u1
        self.u2 = u2

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        return cls(grid, np.zeros((grid.n + 1, grid.n)),
                   np.zeros((grid.n, grid.n + 1)), clamp=False)

    def copy(self) -> "VectorField":
        return VectorField(self.grid, self.u1, self.u2, clamp=False)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.u1)) and np.all(np.isfinite(self.u2)))

    def _check(self, other):
        if self.grid != other.grid:
            raise GridMismatchError("fields on different grids")

    def __add__(self, other):
        self._check(other)
        return VectorField(self.grid, self.u1 + other.u1, self.u2 + other.u2,
                           clamp=False)

    def __sub__(self, other):
        self._check(other)
        return VectorField(self.grid, self.u1 - other.u1, self.u2 - other.u2,
                           clamp=False)

    def __mul__(self, a):
        return VectorField(self.grid, a * self.u1, a * self.u2, clamp=False)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def constant_field(grid: Grid, c1: float, c2: float, clamp=False) -> VectorField:
    return VectorField(grid, np.full((grid.n + 1, grid.n), c1),
                       np.full((grid.n, grid.n + 1), c2), clamp=clamp)


# --------------------------------------------------------------------------
# stencil machinery
# --------------------------------------------------------------------------

def _pad_component(a: np.ndarray, normal_axis: int) -> np.ndarray:
    """One ghost layer per side; odd reflection enforcing zero wall values.

    Along the normal axis grid points sit on the walls (stored value 0), so
    the ghost mirrors the next interior value; along the tangential axis the
    wall lies between the ghost and the first point.
    """
    p = np.empty((a.shape[0] + 2, a.shape[1] + 2))
    p[1:-1, 1:-1] = a
    if normal_axis == 0:
        p[0, 1:-1] = -a[1, :]
        p[-1, 1:-1] = -a[-2, :]
        p[:, 0] = -p[:, 1]
        p[:, -1] = -p[:, -2]
    else:
        p[1:-1, 0] = -a[:, 1]
        p[1:-1, -1] = -a[:, -2]
        p[0, :] = -p[1, :]
        p[-1, :] = -p[-2, :]
    return p


def component_tables(a: np.ndarray, normal_axis: int, dx: float) -> dict:
    """Value and derivative arrays of one component at its own points.

    Keys: val, d1, d2 (central first derivatives along x and y), d11, d22,
    d12 (central mixed), d12m (backward-backward mixed, used by the H2 norm).
    """
    p = _pad_component(a, normal_axis)
    c = p[1:-1, 1:-1]
    out = {
        "val": a,
        "d1": (p[2:, 1:-1] - p[:-2, 1:-1]) / (2 * dx),
        "d2": (p[1:-1, 2:] - p[1:-1, :-2]) / (2 * dx),
        "d11": (p[2:, 1:-1] - 2 * c + p[:-2, 1:-1]) / dx ** 2,
        "d22": (p[1:-1, 2:] - 2 * c + p[1:-1, :-2]) / dx ** 2,
        "d12": (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / (4 * dx ** 2),
        "d12m": (p[1:-1, 1:-1] - p[:-2, 1:-1] - p[1:-1, :-2] + p[:-2, :-2]) / dx ** 2,
    }
    return out


def u2_to_u1_points(b: np.ndarray) -> np.ndarray:
    """Four-point average of a u2-shaped array onto the u1 points.

    The ghost layers extrapolate linearly; they only reach the wall-face
    target rows, whose values are clamped to zero in every valid field, so
    the choice matters for quadrature of invalid (e.g. constant) fields
    only, where extrapolation keeps constants exact.
    """
    bp = np.empty((b.shape[0] + 2, b.shape[1]))
    bp[1:-1] = b
    bp[0] = 2.0 * b[0] - b[1]
    bp[-1] = 2.0 * b[-1] - b[-2]
    return 0.25 * (bp[:-1, :-1] + bp[1:, :-1] + bp[:-1, 1:] + bp[1:, 1:])


def u1_to_u2_points(a: np.ndarray) -> np.ndarray:
    """Four-point average of a u1-shaped array onto the u2 points."""
    ap = np.empty((a.shape[0], a.shape[1] + 2))
    ap[:, 1:-1] = a
    ap[:, 0] = 2.0 * a[:, 0] - a[:, 1]
    ap[:, -1] = 2.0 * a[:, -1] - a[:, -2]
    return 0.25 * (ap[:-1, :-1] + ap[:-1, 1:] + ap[1:, :-1] + ap[1:, 1:])


def _u1_to_centers(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a[:-1, :] + a[1:, :])


def _u2_to_centers(b: np.ndarray) -> np.ndarray:
    return 0.5 * (b[:, :-1] + b[:, 1:])


def cross_tables(v: VectorField) -> tuple[dict, dict]:
    """Value/derivative tables of BOTH components at both face families.

    Returns (at_u1, at_u2); each maps component index (1 or 2) to a
    component_tables dict evaluated at that family's points.  Own-component
    entries are native, cross-component entries are four-point averages.
    """
    dx = v.grid.dx
    t1 = component_tables(v.u1, 0, dx)
    t2 = component_tables(v.u2, 1, dx)
    at_u1 = {1: t1, 2: {k: u2_to_u1_points(t2[k]) for k in t2}}
    at_u2 = {2: t2, 1: {k: u1_to_u2_points(t1[k]) for k in t1}}
    return at_u1, at_u2


def at_centers(v: VectorField) -> np.ndarray:
    """Full velocity vector averaged to cell centers, shape (n, n, 2)."""
    return np.stack([_u1_to_centers(v.u1), _u2_to_centers(v.u2)], axis=-1)


def grad_at_centers(v: VectorField) -> np.ndarray:
    """Plain gradient tensor G[..., i, j] = d v_i / d y_j at cell centers.

    Diagonal entries are exact central differences of adjacent faces; the
    off-diagonal entries average the centered own-point derivatives.
    """
    dx = v.grid.dx
    n = v.grid.n
    g = np.empty((n, n, 2, 2))
    g[..., 0, 0] = (v.u1[1:, :] - v.u1[:-1, :]) / dx
    g[..., 1, 1] = (v.u2[:, 1:] - v.u2[:, :-1]) / dx
    t1 = component_tables(v.u1, 0, dx)
    t2 = component_tables(v.u2, 1, dx)
    g[..., 0, 1] = _u1_to_centers(t1["d2"])
    g[..., 1, 0] = _u2_to_centers(t2["d1"])
    return g


# --------------------------------------------------------------------------
# divergence / gradient / Laplacian
# --------------------------------------------------------------------------

def divergence(v: VectorField) -> ScalarField:
    dx = v.grid.dx
    d = (v.u1[1:, :] - v.u1[:-1, :]) / dx + (v.u2[:, 1:] - v.u2[:, :-1]) / dx
    return ScalarField(v.grid, d)


def gradient(phi: ScalarField) -> VectorField:
    """Cell-centered scalar to faces; boundary faces get zero (Neumann)."""
    g = phi.grid
    dx = g.dx
    u1 = np.zeros((g.n + 1, g.n))
    u2 = np.zeros((g.n, g.n + 1))
    u1[1:-1, :] = (phi.data[1:, :] - phi.data[:-1, :]) / dx
    u2[:, 1:-1] = (phi.data[:, 1:] - phi.data[:, :-1]) / dx
    return VectorField(g, u1, u2, clamp=False)


def vector_laplacian(v: VectorField) -> VectorField:
    """Componentwise five-point Laplacian with no-slip ghost layers."""
    dx = v.grid.dx
    t1 = component_tables(v.u1, 0, dx)
    t2 = component_tables(v.u2, 1, dx)
    return VectorField(v.grid, t1["d11"] + t1["d22"], t2["d11"] + t2["d22"])


# --------------------------------------------------------------------------
# Poisson solver and Leray projection
# --------------------------------------------------------------------------

def _neumann_apply(phi: np.ndarray, dx: float) -> np.ndarray:
    p = np.pad(phi, 1, mode="edge")
    return (p[2:, 1:-1] + p[:-2, 1:-1] + p[1:-1, 2:] + p[1:-1, :-2]
            - 4.0 * phi) / dx ** 2


class PoissonSolver:
    """Cell-centered Neumann Poisson solver: div grad phi = rhs.

    method 'direct' prefactorizes the (gauge-pinned) sparse matrix once per
    grid; method 'cg' runs plain conjugate gradients to the requested
    residual.  Both are deterministic.  The right-hand side is projected to
    zero mean (it already is, up to roundoff, for divergences of valid
    fields).
    """

    def __init__(self, grid: Grid, method: str = "direct",
                 tol: float = 1e-10, maxiter: int = 20000):
        self.grid = grid
        self.method = method
        self.tol = tol
        self.maxiter = maxiter
        self.last_iterations = 0
        self.last_residual = 0.0
        if method == "direct":
            self._lu = _pinned_neumann_lu(grid.n)
        elif method != "cg":
            raise ValueError(f"unknown Poisson method '{method}'")

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        n = self.grid.n
        dx = self.grid.dx
        b = rhs - rhs.mean()
        if self.method == "direct":
            bb = b.ravel().copy()
            bb[0] = 0.0
            phi = self._lu.solve(bb).reshape(n, n)
            self.last_iterations = 1
            self.last_residual = float(
                np.linalg.norm(_neumann_apply(phi, dx) - b) / max(np.linalg.norm(b), 1e-300)
            )
            return phi - phi.mean()
        # conjugate gradients on the zero-mean subspace
        x = np.zeros_like(b)
        r = b.copy()
        p = r.copy()
        bnorm = max(float(np.linalg.norm(b)), 1e-300)
        rs = float(np.vdot(r, r).real)
        it = 0
        while np.sqrt(rs) > self.tol * bnorm and it < self.maxiter:
            ap = _neumann_apply(p, dx)
            denom = float(np.vdot(p, ap).real)
            if denom == 0.0:
                break
            alpha = rs / denom
            x += alpha * p
            r -= alpha * ap
            rs_new = float(np.vdot(r, r).real)
            p = r + (rs_new / rs) * p
            rs = rs_new
            it += 1
        self.last_iterations = it
        self.last_residual = float(np.sqrt(rs) / bnorm)
        if np.sqrt(rs) > self.tol * bnorm:
            raise SolverError(
                f"Poisson CG did not converge in {it} iterations "
                f"(relative residual {self.last_residual:.3e})",
                iterations=it, residual=self.last_residual,
            )
        return x - x.mean()


@lru_cache(maxsize=32)
def _pinned_neumann_lu(n: int):
    dx2 = (1.0 / n) ** 2
    m = lil_matrix((n * n, n * n))
    for i in range(n):
        for j in range(n):
            k = i * n + j
            diag = 0.0
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < n and 0 <= jj < n:
                    m[k, ii * n + jj] = 1.0 / dx2
                    diag -= 1.0 / dx2
            m[k, k] = diag
    # pin the gauge: replace the first equation by phi_0 = 0
    m[0, :] = 0.0
    m[0, 0] = 1.0
    return splu(csc_matrix(m))


@lru_cache(maxsize=32)
def get_poisson_solver(n: int, method: str = "direct", tol: float = 1e-10):
    return PoissonSolver(Grid(n), method=method, tol=tol)


def leray_project(v: VectorField, solver: PoissonSolver | None = None) -> VectorField:
    """Orthogonal projection onto discretely solenoidal no-slip fields.

    Realized as v - grad(phi) with div grad phi = div v (homogeneous Neumann
    on phi).  Idempotent up to the Poisson residual.
    """
    if solver is None:
        solver = get_poisson_solver(v.grid.n)
    phi = solver.solve(divergence(v).data)
    return v - gradient(ScalarField(v.grid, phi))


# --------------------------------------------------------------------------
# inner products and norms
# --------------------------------------------------------------------------

@lru_cache(maxsize=32)
def _face_weights(n: int):
    w1 = np.ones((n + 1, 1))
    w1[0, 0] = 0.5
    w1[-1, 0] = 0.5
    w2 = np.ones((1, n + 1))
    w2[0, 0] = 0.5
    w2[0, -1] = 0.5
    return w1, w2


def inner_L2(v: VectorField, w: VectorField) -> float:
    """Midpoint/trapezoid quadrature of sum_i v_i w_i over the square."""
    if v.grid != w.grid:
        raise GridMismatchError("fields on different grids")
    n = v.grid.n
    w1, w2 = _face_weights(n)
    s = float(np.sum(w1 * v.u1 * w.u1) + np.sum(w2 * v.u2 * w.u2))
    return s * v.grid.dx ** 2


def norm_L2(v: VectorField) -> float:
    return float(np.sqrt(max(inner_L2(v, v), 0.0)))


class FaceMetric(NamedTuple):
    """Symmetric 2x2 weight per face point, one array per face family."""

    h_u1: np.ndarray
    h_u2: np.ndarray


def inner_0t(v: VectorField, w: VectorField, m) -> float:
    """Zeroth-order metric-weighted pairing: integral of h_ij v_i w_j.

    ``m`` supplies the metric at both face families (any object with
    ``h_u1``/``h_u2``, e.g. FaceMetric or an operator bundle); with the
    identity metric this reduces exactly to inner_L2.  The cross term is
    symmetrized over the two families.
    """
    if v.grid != w.grid:
        raise GridMismatchError("fields on different grids")
    n = v.grid.n
    dx2 = v.grid.dx ** 2
    w1, w2 = _face_weights(n)
    h1 = m.h_u1
    h2 = m.h_u2
    s = float(np.sum(w1 * h1[..., 0, 0] * v.u1 * w.u1))
    s += float(np.sum(w2 * h2[..., 1, 1] * v.u2 * w.u2))
    v2_at1 = u2_to_u1_points(v.u2)
    w2_at1 = u2_to_u1_points(w.u2)
    v1_at2 = u1_to_u2_points(v.u1)
    w1_at2 = u1_to_u2_points(w.u1)
    cross1 = np.sum(w1 * h1[..., 0, 1] * (v.u1 * w2_at1 + w.u1 * v2_at1))
    cross2 = np.sum(w2 * h2[..., 0, 1] * (v.u2 * w1_at2 + w.u2 * v1_at2))
    s += 0.5 * float(cross1 + cross2)
    return s * dx2


def inner_1t(v: VectorField, w: VectorField, metric) -> float:
    """First-order metric pairing integral h^{kl} h_{ij} (D_k v)_i (D_l w)_j.

    ``metric`` is geometry.MetricData sampled at cell centers; D is the
    covariant derivative.  Symmetric and positive definite on nonzero
    fields; the identity metric gives the plain Dirichlet energy.
    """
    if v.grid != w.grid:
        raise GridMismatchError("fields on different grids")
    from .transform import covariant_gradient

    gv = covariant_gradient(v, metric)
    gw = covariant_gradient(w, metric)
    integrand = np.einsum("...kl,...ij,...ik,...jl->...",
                          metric.h_inv, metric.h, gv, gw)
    return float(np.sum(integrand)) * v.grid.dx ** 2


def norm_1t(v: VectorField, metric) -> float:
    return float(np.sqrt(max(inner_1t(v, v, metric), 0.0)))


@lru_cache(maxsize=32)
def _identity_metric_centers(n: int):
    from .geometry import IdentityMotion, metric_tensors

    g = Grid(n)
    return metric_tensors(IdentityMotion().sample(0.0, g.center_points))


def norm_grad(v: VectorField) -> float:
    """Dirichlet seminorm, i.e. the first-order norm at the flat metric."""
    return norm_1t(v, _identity_metric_centers(v.grid.n))


def _own_point_sq(v: VectorField, keys) -> float:
    dx = v.grid.dx
    t1 = component_tables(v.u1, 0, dx)
    t2 = component_tables(v.u2, 1, dx)
    s = 0.0
    for t in (t1, t2):
        for k, fac in keys:
            s += fac * float(np.sum(t[k] ** 2))
    return s * dx ** 2


def norm_H1(v: VectorField) -> float:
    s = inner_L2(v, v) + _own_point_sq(v, (("d1", 1.0), ("d2", 1.0)))
    return float(np.sqrt(max(s, 0.0)))


def norm_H2(v: VectorField) -> float:
    """Full second-order Sobolev norm via own-point difference quadratures.

    The mixed second derivative uses the backward-backward stencil so that
    for interior-supported fields the discrete identity
    |lap u|^2 = |D11 u|^2 + 2 |D12 u|^2 + |D22 u|^2 holds exactly.
    """
    s = inner_L2(v, v)
    s += _own_point_sq(v, (("d1", 1.0), ("d2", 1.0)))
    s += _own_point_sq(v, (("d11", 1.0), ("d22", 1.0), ("d12m", 2.0)))
    return float(np.sqrt(max(s, 0.0)))


def norm_A(v: VectorField, solver: PoissonSolver | None = None) -> float:
    """L2 norm of the projected Laplacian (discrete Stokes-operator norm)."""
    return norm_L2(leray_project(vector_laplacian(v), solver=solver))


# --------------------------------------------------------------------------
# flat packing and Krylov solvers
# --------------------------------------------------------------------------

def pack(v: VectorField) -> np.ndarray:
    return np.concatenate([v.u1.ravel(), v.u2.ravel()])


def unpack(grid: Grid, x: np.ndarray) -> VectorField:
    n = grid.n
    k = (n + 1) * n
    return VectorField(grid, x[:k].reshape(n + 1, n),
                       x[k:].reshape(n, n + 1), clamp=False)


def cg_solve(apply_op, b: np.ndarray, x0: np.ndarray | None = None,
             tol: float = 1e-10, maxiter: int = 2000):
    """Plain conjugate gradients for SPD operators on flat arrays.

    Returns (x, iterations, relative_residual); raises SolverError when the
    tolerance is not met.
    """
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply_op(x)
    p = r.copy()
    bnorm = max(float(np.linalg.norm(b)), 1e-300)
    rs = float(r @ r)
    it = 0
    while np.sqrt(rs) > tol * bnorm and it < maxiter:
        ap = apply_op(p)
        denom = float(p @ ap)
        if denom <= 0.0:
            raise SolverError("CG breakdown: operator not positive definite",
                              iterations=it, residual=np.sqrt(rs) / bnorm)
        alpha = rs / denom
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
        it += 1
    relres = float(np.sqrt(rs) / bnorm)
    if relres > tol:
        raise SolverError(f"CG did not converge ({it} iterations, relres {relres:.3e})",
                          iterations=it, residual=relres)
    return x, it, relres


def bicgstab_solve(apply_op, b: np.ndarray, x0: np.ndarray | None = None,
                   tol: float = 1e-12, maxiter: int = 400):
    """Stabilized bi-conjugate gradients for mildly nonsymmetric operators."""
    x = np.zeros_like(b) if x0 is None else x0.copy()
    r = b - apply_op(x)
    r0 = r.copy()
    rho = alpha = omega = 1.0
    vv = np.zeros_like(b)
    p = np.zeros_like(b)
    bnorm = max(float(np.linalg.norm(b)), 1e-300)
    it = 0
    res = float(np.linalg.norm(r)) / bnorm
    while res > tol and it < maxiter:
        rho_new = float(r0 @ r)
        if rho_new == 0.0:
            break
        if it == 0:
            p = r.copy()
        else:
            beta = (rho_new / rho) * (alpha / omega)
            p = r + beta * (p - omega * vv)
        vv = apply_op(p)
        denom = float(r0 @ vv)
        if denom == 0.0:
            break
        alpha = rho_new / denom
        s = r - alpha * vv
        if float(np.linalg.norm(s)) / bnorm <= tol:
            x += alpha * p
            r = s
            res = float(np.linalg.norm(r)) / bnorm
            it += 1
            break
        t = apply_op(s)
        tt = float(t @ t)
        if tt == 0.0:
            break
        omega = float(t @ s) / tt
        x += alpha * p + omega * s
        r = s - omega * t
        rho = rho_new
        res = float(np.linalg.norm(r)) / bnorm
        it += 1
    if res > tol:
        raise SolverError(
            f"BiCGStab did not converge ({it} iterations, relres {res:.3e})",
            iterations=it, residual=res,
        )
    return x, it, res


# --------------------------------------------------------------------------
# field constructors
# --------------------------------------------------------------------------

def stream_to_field(grid: Grid, psi_nodes: np.ndarray) -> VectorField:
    """Discrete curl of a node-based stream function.

    The result is divergence-free to machine precision and has exactly zero
    boundary normal components whenever psi is constant along each wall.
    """
    if psi_nodes.shape != (grid.n + 1, grid.n + 1):
        raise GridMismatchError("stream function must live on nodes")
    dx = grid.dx
    u1 = (psi_nodes[:, 1:] - psi_nodes[:, :-1]) / dx
    u2 = -(psi_nodes[1:, :] - psi_nodes[:-1, :]) / dx
    # clamping removes the roundoff residue of stream functions that vanish
    # on the walls only up to floating error (e.g. sin(pi*1.0) ~ 1e-16)
    return VectorField(grid, u1, u2, clamp=True)


def _random_stream(grid: Grid, rng: np.random.Generator, kmax: int) -> np.ndarray:
    x = grid.node_points[..., 0]
    y = grid.node_points[..., 1]
    psi = np.zeros_like(x)
    for a in range(1, kmax + 1):
        for b in range(1, kmax + 1):
            c = rng.standard_normal() / (a * a + b * b)
            psi += c * np.sin(a * np.pi * x) * np.sin(b * np.pi * y)
    return psi


def _supported_window(coord: np.ndarray, margin: float) -> np.ndarray:
    """Grid-independent window with exact zeros within ``margin`` of a wall."""
    inside = (coord > margin) & (coord < 1.0 - margin)
    ramp = np.sin(np.pi * (coord - margin) / (1.0 - 2.0 * margin)) ** 2
    return np.where(inside, ramp, 0.0)


def random_solenoidal(grid: Grid, rng: np.random.Generator, kmax: int = 3,
                      margin: float = 0.1, amplitude: float = 1.0,
                      interior_margin: float | None = None) -> VectorField:
    """Random exactly-solenoidal field with exact zeros near the walls.

    Discrete curl of a random low-mode stream function times a window that
    vanishes identically within ``margin`` of every wall, so summation by
    parts carries no boundary terms.  The same generator draws produce the
    same underlying analytic field on every grid.
    """
    if interior_margin is not None:
        margin = interior_margin
    psi = _random_stream(grid, rng, kmax)
    if margin > 0:
        wx = _supported_window(grid.node_points[..., 0], margin)
        wy = _supported_window(grid.node_points[..., 1], margin)
        psi = psi * wx * wy
    return stream_to_field(grid, amplitude * psi)


def smooth_solenoidal(grid: Grid, rng: np.random.Generator, kmax: int = 3,
                      amplitude: float = 1.0) -> VectorField:
    """Random solenoidal field from an everywhere-smooth stream function.

    The window vanishes to fourth order at the walls but is analytic, so
    refinement studies see clean second-order stencil errors.  Support is
    not exact: use random_solenoidal where exact summation by parts matters.
    """
    x = grid.node_points[..., 0]
    y = grid.node_points[..., 1]
    psi = _random_stream(grid, rng, kmax)
    psi = psi * (np.sin(np.pi * x) * np.sin(np.pi * y)) ** 4
    return stream_to_field(grid, amplitude * psi)


def taylor_green(grid: Grid, amplitude: float = 1.0) -> VectorField:
    """Single-vortex initial flow from the classical sin*sin stream pattern."""
    x = grid.node_points[..., 0]
    y = grid.node_points[..., 1]
    psi = (amplitude / np.pi) * np.sin(np.pi * x) * np.sin(np.pi * y)
    return stream_to_field(grid, psi)


def stream_bump(grid: Grid, amplitude: float = 1.0) -> VectorField:
    """No-slip-compliant vortex: stream function vanishing with its gradient."""
    x = grid.node_points[..., 0]
    y = grid.node_points[..., 1]
    psi = amplitude * 64.0 * (x * (1 - x) * y * (1 - y)) ** 2
    return stream_to_field(grid, psi)


INITIAL_FIELDS = {
    "zero": lambda grid, amplitude=1.0: VectorField.zeros(grid),
    "taylor_green": taylor_green,
    "stream_bump": stream_bump,
}


# --------------------------------------------------------------------------
# snapshot serialization
# --------------------------------------------------------------------------

_MAGIC = b"MNSF"
_VERSION = 1
_HEADER = struct.Struct("<4sIIId")


def _write_component(path, n, comp_id, t, data):
    with open(path, "wb") as f:
        f.write(_HEADER.pack(_MAGIC, _VERSION, n, comp_id, float(t)))
        f.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def save_snapshot(v: VectorField, t: float, prefix: str, extra: dict | None = None):
    """Write one binary file per component plus a text metadata sidecar."""
    n = v.grid.n
    _write_component(f"{prefix}_u1.fld", n, 0, t, v.u1)
    _write_component(f"{prefix}_u2.fld", n, 1, t, v.u2)
    lines = [f"n = {n}", f"time = {t!r}", "components = u1,u2"]
    for k, val in sorted((extra or {}).items()):
        lines.append(f"{k} = {val}")
    with open(f"{prefix}.meta", "w") as f:
        f.write("\n".join(lines) + "\n")


def _read_component(path, expect_comp):
    with open(path, "rb") as f:
        magic, version, n, comp, t = _HEADER.unpack(f.read(_HEADER.size))
        if magic != _MAGIC or version != _VERSION:
            raise ValueError(f"bad snapshot header in {path}")
        if comp != expect_comp:
            raise ValueError(f"unexpected component id {comp} in {path}")
        shape = (n + 1, n) if comp == 0 else (n, n + 1)
        data = np.frombuffer(f.read(), dtype="<f8").reshape(shape).copy()
    return n, t, data


def load_snapshot(prefix: str) -> tuple[VectorField, float]:
    n1, t1, u1 = _read_component(f"{prefix}_u1.fld", 0)
    n2, t2, u2 = _read_component(f"{prefix}_u2.fld", 1)
    if n1 != n2 or t1 != t2:
        raise ValueError("snapshot component files disagree")
    return VectorField(Grid(n1), u1, u2, clamp=False), t1
