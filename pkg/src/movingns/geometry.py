"""Domain-motion families and the metric quantities derived from them.

A motion is a time-indexed family of volume-preserving C^3 diffeomorphisms
``r(t, .)`` of the plane, applied to the unit-square reference domain.  Every
family here is analytic: the map, its inverse, and all partial derivatives up
to second order in time and third order in space are hand-coded.  A
finite-difference validator in the test suite cross-checks each block.

All evaluation routines accept an array of points of shape (..., 2) and return
arrays with matching leading dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "MotionError",
    "SingularJacobianError",
    "PointSample",
    "MotionSample",
    "MetricData",
    "DomainMotion",
    "IdentityMotion",
    "RotationMotion",
    "ShearMotion",
    "SineShearMotion",
    "TabulatedMotion",
    "ComposedMotion",
    "make_motion",
    "evaluate_motion",
    "metric_tensors",
    "christoffel",
    "coefficient_tables",
    "coefficient_drift",
]


class MotionError(ValueError):
    """Invalid motion evaluation request (time range, missing derivatives)."""


class SingularJacobianError(MotionError):
    """Jacobian not invertible; violates the diffeomorphism assumption."""


_TIME_SLACK = 1e-9


def _inv2(m):
    """Pointwise inverse of (..., 2, 2) matrices with singularity check."""
    det = m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]
    if np.any(np.abs(det) < 1e-12):
        raise SingularJacobianError("singular Jacobian (|det| < 1e-12)")
    out = np.empty_like(m)
    out[..., 0, 0] = m[..., 1, 1]
    out[..., 0, 1] = -m[..., 0, 1]
    out[..., 1, 0] = -m[..., 1, 0]
    out[..., 1, 1] = m[..., 0, 0]
    return out / det[..., None, None]


def _det2(m):
    return m[..., 0, 0] * m[..., 1, 1] - m[..., 0, 1] * m[..., 1, 0]


@dataclass(frozen=True)
class PointSample:
    """Motion data evaluated at one set of points.

    Index convention: ``jac[..., m, j] = dr_m/dy_j``,
    ``d2r[..., m, j, k] = d^2 r_m / dy_j dy_k`` (symmetric in j, k),
    ``d3r[..., m, j, k, l]`` the third spatial derivative,
    ``dr_dt[..., m]`` the domain velocity, ``d2r_dtdy[..., m, j]`` its spatial
    gradient, and ``rbar_t`` the pulled-back inverse-map velocity
    ``(d rbar/dt)(t, r(t, y)) = -J^{-1} dr/dt``.
    """

    t: float
    points: np.ndarray
    r: np.ndarray
    jac: np.ndarray
    jac_inv: np.ndarray
    det: np.ndarray
    d2r: np.ndarray
    d3r: np.ndarray
    dr_dt: np.ndarray
    d2r_dtdy: np.ndarray
    rbar_t: np.ndarray


@dataclass(frozen=True)
class MotionSample:
    """Per-staggered-family motion data on a grid (see fields.Grid).

    ``u1``/``u2`` are sampled at the two velocity face families, ``centers``
    at cell centers.  Invariants: det(J) = 1 and J.J^{-1} = I at every point.
    """

    t: float
    u1: PointSample
    u2: PointSample
    centers: PointSample


@dataclass(frozen=True)
class MetricData:
    """Pull-back metric h, its inverse, Christoffel symbols and t-derivatives.

    ``h[..., j, k]`` is symmetric positive definite with h.h_inv = I;
    ``gamma[..., i, j, k]`` is symmetric in (j, k).
    """

    h: np.ndarray
    h_inv: np.ndarray
    gamma: np.ndarray
    dh_dt: np.ndarray
    dh_inv_dt: np.ndarray


class DomainMotion:
    """Base class: analytic volume-preserving motion of the reference square.

    Subclasses implement the map, its inverse and the derivative blocks.  The
    reference time is 0: ``map_forward(0, y) = y``.  ``spatially_affine``
    marks families whose second and third spatial derivatives vanish
    identically, which lets downstream code skip the curvature machinery.
    """

    kind = "abstract"
    spatially_affine = False

    def __init__(self, t_max: float = 1.0):
        if t_max <= 0:
            raise MotionError("t_max must be positive")
        self.t_max = float(t_max)

    # -- map and derivatives (subclass responsibility) ---------------------
    def map_forward(self, t, y):
        raise NotImplementedError

    def map_back(self, t, x):
        raise NotImplementedError

    def jacobian(self, t, y):
        raise NotImplementedError

    def d2r(self, t, y):
        raise NotImplementedError

    def d3r(self, t, y):
        raise NotImplementedError

    def dr_dt(self, t, y):
        raise NotImplementedError

    def d2r_dtdy(self, t, y):
        raise NotImplementedError

    # -- shared machinery ---------------------------------------------------
    def check_time(self, t):
        if not (-_TIME_SLACK <= t <= self.t_max + _TIME_SLACK):
            raise MotionError(
                f"time {t} outside [0, {self.t_max}] for motion '{self.kind}'"
            )

    def sample(self, t, points) -> PointSample:
        """Evaluate all derivative blocks at ``points`` (shape (..., 2))."""
        self.check_time(t)
        pts = np.asarray(points, dtype=float)
        jac = self.jacobian(t, pts)
        jac_inv = _inv2(jac)
        dr_dt = self.dr_dt(t, pts)
        rbar_t = -np.einsum("...ij,...j->...i", jac_inv, dr_dt)
        return PointSample(
            t=float(t),
            points=pts,
            r=self.map_forward(t, pts),
            jac=jac,
            jac_inv=jac_inv,
            det=_det2(jac),
            d2r=self.d2r(t, pts),
            d3r=self.d3r(t, pts),
            dr_dt=dr_dt,
            d2r_dtdy=self.d2r_dtdy(t, pts),
            rbar_t=rbar_t,
        )

    def with_reference(self, t0: float) -> "DomainMotion":
        """Motion re-based so that time ``t0`` becomes the reference."""
        if t0 == 0.0:
            return self
        return ComposedMotion(self, t0)


def _broadcast_const(mat, pts_shape):
    """Tile a constant matrix/tensor over the leading point dimensions."""
    out = np.empty(pts_shape[:-1] + mat.shape, dtype=float)
    out[...] = mat
    return out


class IdentityMotion(DomainMotion):
    kind = "identity"
    spatially_affine = True

    def map_forward(self, t, y):
        return np.array(y, dtype=float, copy=True)

    def map_back(self, t, x):
        return np.array(x, dtype=float, copy=True)

    def jacobian(self, t, y):
        return _broadcast_const(np.eye(2), np.shape(y))

    def d2r(self, t, y):
        return np.zeros(np.shape(y)[:-1] + (2, 2, 2))

    def d3r(self, t, y):
        return np.zeros(np.shape(y)[:-1] + (2, 2, 2, 2))

    def dr_dt(self, t, y):
        return np.zeros(np.shape(y))

    def d2r_dtdy(self, t, y):
        return np.zeros(np.shape(y)[:-1] + (2, 2))


class RotationMotion(DomainMotion):
    """Rigid rotation about the square's center; an isometry, so h = I."""

    kind = "rotation"
    spatially_affine = True

    def __init__(self, omega: float, t_max: float = 1.0, center=(0.5, 0.5)):
        super().__init__(t_max)
        self.omega = float(omega)
        self.center = np.asarray(center, dtype=float)

    def _rot(self, angle):
        c, s = math.cos(angle), math.sin(angle)
        return np.array([[c, -s], [s, c]])

    def map_forward(self, t, y):
        y = np.asarray(y, dtype=float)
        rel = y - self.center
        return self.center + np.einsum("ij,...j->...i", self._rot(self.omega * t), rel)

    def map_back(self, t, x):
        x = np.asarray(x, dtype=float)
        rel = x - self.center
        return self.center + np.einsum("ij,...j->...i", self._rot(-self.omega * t), rel)

    def jacobian(self, t, y):
        return _broadcast_const(self._rot(self.omega * t), np.shape(y))

    def d2r(self, t, y):
        return np.zeros(np.shape(y)[:-1] + (2, 2, 2))

    def d3r(self, t, y):
        return np.zeros(np.shape(y)[:-1] + (2, 2, 2, 2))

    def dr_dt(self, t, y):
        y = np.asarray(y, dtype=float)
        a = self.omega * t
        c, s = math.cos(a), math.sin(a)
        dR = self.omega * np.array([[-s, -c], [c, -s]])
        return np.einsum("ij,...j->...i", dR, y - self.center)

    def d2r_dtdy(self, t, y):
        a = self.omega * t
        c, s = math.cos(a), math.sin(a)
        dR = self.omega * np.array([[-s, -c], [c, -s]])
        return _broadcast_const(dR, np.shape(y))


class ShearMotion(DomainMotion):
    """Linear shear r = (y1 + a sin(w t) y2, y2); det J = 1 exactly."""

    kind = "shear"
    spatially_affine = True

    def __init__(self, amplitude: float, omega: float, t_max: float = 1.0):
        super().__init__(t_max)
        self.amplitude = float(amplitude)
        self.omega = float(omega)

    def _s(self, t):
        return self.amplitude * math.sin(self.omega * t)

    def _sdot(self, t):
        return self.amplitude * self.omega * math.cos(self.omega * t)

    def map_forward(self, t, y):
        y = np.asarray(y, dtype=float)
        out = np.array(y, copy=True)
        out[..., 0] += self._s(t) * y[..., 1]
        return out

    def map_back(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.array(x, copy=True)
        out[..., 0] -= self._s(t) * x[..., 1]
        return out

    def jacobian(self, t, y):
        return _broadcast_const(np.array([[1.0, self._s(t)], [0.0, 1.0]]), np.shape(y))

    def d2r(self, t, y):
        return np.zeros(np.shape(y)[:-1] + (2, 2, 2))

    def d3r(self, t, y):
        return np.zeros(np.shape(y)[:-1] + (2, 2, 2, 2))

    def dr_dt(self, t, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.shape(y))
        out[..., 0] = self._sdot(t) * y[..., 1]
        return out

    def d2r_dtdy(self, t, y):
        m = np.array([[0.0, self._sdot(t)], [0.0, 0.0]])
        return _broadcast_const(m, np.shape(y))


class SineShearMotion(DomainMotion):
    """Nonlinear volume-preserving wave r = (y1 + e sin(w t) sin(k pi y2), y2).

    Displacement depends only on the orthogonal coordinate, so det J = 1
    exactly while the curvature terms (second/third derivatives, Christoffel
    symbols) are nonzero.
    """

    kind = "sine_shear"

    def __init__(self, amplitude: float, omega: float, wavenumber: int = 1,
                 t_max: float = 1.0):
        super().__init__(t_max)
        self.amplitude = float(amplitude)
        self.omega = float(omega)
        self.wavenumber = int(wavenumber)

    def _s(self, t):
        return self.amplitude * math.sin(self.omega * t)

    def _sdot(self, t):
        return self.amplitude * self.omega * math.cos(self.omega * t)

    def _g(self, y2, order=0):
        k = self.wavenumber * math.pi
        if order == 0:
            return np.sin(k * y2)
        if order == 1:
            return k * np.cos(k * y2)
        if order == 2:
            return -(k ** 2) * np.sin(k * y2)
        if order == 3:
            return -(k ** 3) * np.cos(k * y2)
        raise ValueError(order)

    def map_forward(self, t, y):
        y = np.asarray(y, dtype=float)
        out = np.array(y, copy=True)
        out[..., 0] += self._s(t) * self._g(y[..., 1])
        return out

    def map_back(self, t, x):
        x = np.asarray(x, dtype=float)
        out = np.array(x, copy=True)
        out[..., 0] -= self._s(t) * self._g(x[..., 1])
        return out

    def jacobian(self, t, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.shape(y)[:-1] + (2, 2))
        out[..., 0, 0] = 1.0
        out[..., 1, 1] = 1.0
        out[..., 0, 1] = self._s(t) * self._g(y[..., 1], 1)
        return out

    def d2r(self, t, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.shape(y)[:-1] + (2, 2, 2))
        out[..., 0, 1, 1] = self._s(t) * self._g(y[..., 1], 2)
        return out

    def d3r(self, t, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.shape(y)[:-1] + (2, 2, 2, 2))
        out[..., 0, 1, 1, 1] = self._s(t) * self._g(y[..., 1], 3)
        return out

    def dr_dt(self, t, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.shape(y))
        out[..., 0] = self._sdot(t) * self._g(y[..., 1])
        return out

    def d2r_dtdy(self, t, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros(np.shape(y)[:-1] + (2, 2))
        out[..., 0, 1] = self._sdot(t) * self._g(y[..., 1], 1)
        return out


class TabulatedMotion(DomainMotion):
    """User-supplied motion assembled from callables.

    Required entries of ``blocks``: 'r' and 'rbar'.  Derivative blocks
    ('jac', 'd2r', 'd3r', 'dr_dt', 'd2r_dtdy') must be supplied to use the
    corresponding machinery; a missing block raises on evaluation.
    """

    kind = "tabulated"

    def __init__(self, blocks: dict, t_max: float = 1.0):
        super().__init__(t_max)
        if "r" not in blocks or "rbar" not in blocks:
            raise MotionError("tabulated motion needs 'r' and 'rbar' callables")
        self.blocks = dict(blocks)

    def _call(self, name, t, pts):
        fn = self.blocks.get(name)
        if fn is None:
            raise MotionError(f"tabulated motion: derivative block '{name}' unavailable")
        return np.asarray(fn(t, np.asarray(pts, dtype=float)), dtype=float)

    def map_forward(self, t, y):
        return self._call("r", t, y)

    def map_back(self, t, x):
        return self._call("rbar", t, x)

    def jacobian(self, t, y):
        return self._call("jac", t, y)

    def d2r(self, t, y):
        return self._call("d2r", t, y)

    def d3r(self, t, y):
        return self._call("d3r", t, y)

    def dr_dt(self, t, y):
        return self._call("dr_dt", t, y)

    def d2r_dtdy(self, t, y):
        return self._call("d2r_dtdy", t, y)


class ComposedMotion(DomainMotion):
    """Motion rebased to reference time t0: r'(t, z) = r(t, rbar(t0, z)).

    All derivative blocks follow by the chain rule from the base family's
    analytic blocks plus the inverse-function derivatives of rbar(t0, .).
    At t = t0 the map is the identity, so metric and curvature blocks
    collapse to their flat values (up to roundoff).
    """

    kind = "composed"

    def __init__(self, base: DomainMotion, t0: float):
        super().__init__(base.t_max)
        base.check_time(t0)
        self.base = base
        self.t0 = float(t0)
        self.kind = f"composed({base.kind}@{t0:g})"
        self.spatially_affine = base.spatially_affine

    def _chain(self, z):
        """All inverse-map derivative blocks at z (up to third order)."""
        z = np.asarray(z, dtype=float)
        w = self.base.map_back(self.t0, z)
        j0 = self.base.jacobian(self.t0, w)
        w1 = _inv2(j0)
        if self.spatially_affine:
            zero2 = np.zeros(z.shape[:-1] + (2, 2, 2))
            zero3 = np.zeros(z.shape[:-1] + (2, 2, 2, 2))
            return w, w1, zero2, zero3
        k0 = self.base.d2r(self.t0, w)
        t3 = self.base.d3r(self.t0, w)
        # dW1[..., p, m, e] = d(W1[p,m])/dz_e, assembled as two-operand chains
        kw = np.einsum("...abc,...ce->...abe", k0, w1)
        w1kw = np.einsum("...pa,...abe->...pbe", w1, kw)
        dw1 = -np.einsum("...pbe,...bm->...pme", w1kw, w1)
        # W2[..., p, a, b] = d^2 w_p / dz_a dz_b = dW1[p, a, b]
        w2 = dw1
        # dK0[..., m, c, d, e] = d(K0[m,c,d])/dz_e (chain through w)
        dk0 = np.einsum("...mcdf,...fe->...mcde", t3, w1)
        # W3[..., p, a, b, e] = d(W2[p,a,b])/dz_e
        t1 = np.einsum("...pme,...mcd->...pcde", dw1, k0)
        t2 = np.einsum("...pm,...mcde->...pcde", w1, dk0)
        pc = np.einsum("...pcde,...ca->...pade", t1 + t2, w1)
        w3 = -np.einsum("...pade,...db->...pabe", pc, w1)
        w1k = np.einsum("...pm,...mcd->...pcd", w1, k0)
        w3 -= np.einsum("...pcd,...cae,...db->...pabe", w1k, dw1, w1)
        w3 -= np.einsum("...pcd,...ca,...dbe->...pabe", w1k, w1, dw1)
        return w, w1, w2, w3

    def map_forward(self, t, z):
        z = np.asarray(z, dtype=float)
        return self.base.map_forward(t, self.base.map_back(self.t0, z))

    def map_back(self, t, x):
        return self.base.map_forward(self.t0, self.base.map_back(t, x))

    def jacobian(self, t, z):
        w, w1, _, _ = self._chain(z)
        jt = self.base.jacobian(t, w)
        return np.einsum("...mp,...pa->...ma", jt, w1)

    def d2r(self, t, z):
        w, w1, w2, _ = self._chain(z)
        jt = self.base.jacobian(t, w)
        kt = self.base.d2r(t, w)
        return (
            np.einsum("...mpq,...pa,...qb->...mab", kt, w1, w1)
            + np.einsum("...mp,...pab->...mab", jt, w2)
        )

    def d3r(self, t, z):
        w, w1, w2, w3 = self._chain(z)
        jt = self.base.jacobian(t, w)
        kt = self.base.d2r(t, w)
        tt = self.base.d3r(t, w)
        return (
            np.einsum("...mpqs,...pa,...qb,...se->...mabe", tt, w1, w1, w1)
            + np.einsum("...mpq,...pae,...qb->...mabe", kt, w2, w1)
            + np.einsum("...mpq,...pa,...qbe->...mabe", kt, w1, w2)
            + np.einsum("...mps,...se,...pab->...mabe", kt, w1, w2)
            + np.einsum("...mp,...pabe->...mabe", jt, w3)
        )

    def dr_dt(self, t, z):
        w = self.base.map_back(self.t0, np.asarray(z, dtype=float))
        return self.base.dr_dt(t, w)

    def d2r_dtdy(self, t, z):
        w, w1, _, _ = self._chain(z)
        rty = self.base.d2r_dtdy(t, w)
        return np.einsum("...mp,...pa->...ma", rty, w1)

    def sample(self, t, points) -> PointSample:
        # One chain evaluation serves every block (the per-block methods
        # above would redo it five times).
        self.check_time(t)
        pts = np.asarray(points, dtype=float)
        w, w1, w2, w3 = self._chain(pts)
        jt = self.base.jacobian(t, w)
        jac = np.einsum("...mp,...pa->...ma", jt, w1)
        if self.spatially_affine:
            d2r = np.zeros(pts.shape[:-1] + (2, 2, 2))
            d3r = np.zeros(pts.shape[:-1] + (2, 2, 2, 2))
        else:
            kt = self.base.d2r(t, w)
            tt = self.base.d3r(t, w)
            ktw = np.einsum("...mpq,...pa->...maq", kt, w1)
            d2r = (np.einsum("...maq,...qb->...mab", ktw, w1)
                   + np.einsum("...mp,...pab->...mab", jt, w2))
            ttw = np.einsum("...mpqs,...pa->...maqs", tt, w1)
            ttww = np.einsum("...maqs,...qb->...mabs", ttw, w1)
            d3r = (np.einsum("...mabs,...se->...mabe", ttww, w1)
                   + np.einsum("...mpq,...pae,...qb->...mabe", kt, w2, w1)
                   + np.einsum("...maq,...qbe->...mabe", ktw, w2)
                   + np.einsum("...mps,...se,...pab->...mabe", kt, w1, w2)
                   + np.einsum("...mp,...pabe->...mabe", jt, w3))
        dr_dt = self.base.dr_dt(t, w)
        d2r_dtdy = np.einsum("...mp,...pa->...ma",
                             self.base.d2r_dtdy(t, w), w1)
        jac_inv = _inv2(jac)
        return PointSample(
            t=float(t), points=pts, r=self.base.map_forward(t, w), jac=jac,
            jac_inv=jac_inv, det=_det2(jac), d2r=d2r, d3r=d3r, dr_dt=dr_dt,
            d2r_dtdy=d2r_dtdy,
            rbar_t=-np.einsum("...ij,...j->...i", jac_inv, dr_dt),
        )

    def with_reference(self, t0: float) -> "DomainMotion":
        # Re-composition always goes back to the base family.
        return self.base.with_reference(t0)


def make_motion(kind: str, t_max: float = 1.0, **params) -> DomainMotion:
    """Build a motion family by name.  Unknown names raise MotionError."""
    if kind == "identity":
        return IdentityMotion(t_max=t_max)
    if kind == "rotation":
        return RotationMotion(params["omega"], t_max=t_max)
    if kind == "shear":
        return ShearMotion(params["amplitude"], params["omega"], t_max=t_max)
    if kind == "sine_shear":
        return SineShearMotion(
            params["amplitude"], params["omega"],
            wavenumber=int(params.get("wavenumber", 1)), t_max=t_max,
        )
    raise MotionError(f"unknown motion family '{kind}'")


def evaluate_motion(motion: DomainMotion, t: float, grid) -> MotionSample:
    """Sample a motion on all staggered point families of a grid.

    ``grid`` is a fields.Grid.  Raises MotionError for t outside the horizon.
    """
    return MotionSample(
        t=float(t),
        u1=motion.sample(t, grid.u1_points),
        u2=motion.sample(t, grid.u2_points),
        centers=motion.sample(t, grid.center_points),
    )


def metric_tensors(sample: PointSample) -> MetricData:
    """Metric h = J^T J, inverse, Christoffel symbols, and t-derivatives."""
    j = sample.jac
    h = np.einsum("...mj,...mk->...jk", j, j)
    h_inv = _inv2(h)
    gamma = christoffel(sample)
    rty = sample.d2r_dtdy
    dh_dt = np.einsum("...mj,...mk->...jk", rty, j) + np.einsum(
        "...mj,...mk->...jk", j, rty
    )
    dh_inv_dt = -np.einsum("...ja,...ab,...bk->...jk", h_inv, dh_dt, h_inv)
    return MetricData(h=h, h_inv=h_inv, gamma=gamma,
                      dh_dt=dh_dt, dh_inv_dt=dh_inv_dt)


def christoffel(sample: PointSample) -> np.ndarray:
    """Christoffel symbols gamma[..., i, j, k] = (J^{-1})_{il} d2r[l, j, k]."""
    return np.einsum("...il,...ljk->...ijk", sample.jac_inv, sample.d2r)


def _spatial_dh(sample: PointSample):
    """dn_h[..., n, a, b] = d h_{ab} / dy_n."""
    j, k = sample.jac, sample.d2r
    return np.einsum("...man,...mb->...nab", k, j) + np.einsum(
        "...ma,...mbn->...nab", j, k
    )


def coefficient_tables(sample: PointSample):
    """Non-divergence-form coefficient tables of the pulled-back Laplacian.

    The operator acts as
        out_l = sum_{j<=n} P2[j,n,p,l] d2 v_p / dy_j dy_n
              + sum_a     P1[a,p,l]   d v_p / dy_a
              +           P0[p,l]     v_p
    with P2 symmetric in (j, n).  For the identity configuration the tables
    are exactly the componentwise Laplacian (P2 = delta*delta, P1 = P0 = 0).
    """
    j = sample.jac
    k = sample.d2r
    t3 = sample.d3r
    h = np.einsum("...mj,...mk->...jk", j, j)
    h_inv = _inv2(h)
    p2 = np.einsum("...lp,...jn->...jnpl", h, h_inv)
    if not (k.any() or t3.any()):
        # spatially affine configuration: every curvature term vanishes
        shape = h.shape[:-2]
        return p2, np.zeros(shape + (2, 2, 2)), np.zeros(shape + (2, 2))
    dn_h = _spatial_dh(sample)
    dn_hinv = -np.einsum("...ja,...nab,...bk->...njk", h_inv, dn_h, h_inv)
    # div_hinv[a] = d h^{an} / dy_n
    div_hinv = np.einsum("...nan->...a", dn_hinv)

    p1 = 2.0 * np.einsum("...ml,...mpn,...na->...apl", j, k, h_inv) + np.einsum(
        "...lp,...a->...apl", h, div_hinv
    )
    p0 = np.einsum("...ml,...mpjn,...jn->...pl", j, t3, h_inv) + np.einsum(
        "...ml,...mpj,...j->...pl", j, k, div_hinv
    )
    return p2, p1, p0


def coefficient_drift(motion: DomainMotion, t0: float, t: float, grid) -> float:
    """Sup-norm drift of the rebased operator coefficients between t0 and t.

    Monitors how far the elliptic operator referenced at t0 has moved away
    from its flat-Laplacian form; exactly 0 at t = t0 and for static motions.
    """
    if t < t0 - _TIME_SLACK:
        raise MotionError(f"invalid time ordering: t={t} < t0={t0}")
    rebased = motion.with_reference(t0)
    worst = 0.0
    for pts in (grid.u1_points, grid.u2_points):
        tab_t = coefficient_tables(rebased.sample(t, pts))
        tab_0 = coefficient_tables(rebased.sample(t0, pts))
        for a, b in zip(tab_t, tab_0):
            worst = max(worst, float(np.max(np.abs(a - b))))
    return worst
