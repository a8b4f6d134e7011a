import math

import numpy as np
import pytest

from movingns.geometry import (
    IdentityMotion,
    RotationMotion,
    ShearMotion,
    SineShearMotion,
)


@pytest.fixture
def grid16():
    from movingns.fields import Grid

    return Grid(16)


@pytest.fixture
def grid32():
    from movingns.fields import Grid

    return Grid(32)


def builtin_motions(t_max=1.0):
    """One instance of every built-in family with nontrivial parameters."""
    return [
        IdentityMotion(t_max=t_max),
        RotationMotion(1.5, t_max=t_max),
        ShearMotion(0.25, math.pi, t_max=t_max),
        SineShearMotion(0.12, math.pi, 2, t_max=t_max),
    ]


def interior_points(rng, count=50):
    return rng.uniform(0.15, 0.85, size=(count, 2))


def fd_jacobian(motion, t, pts, eps=1e-6):
    out = np.empty(pts.shape[:-1] + (2, 2))
    for j in range(2):
        dp = np.zeros(2)
        dp[j] = eps
        out[..., :, j] = (motion.map_forward(t, pts + dp)
                          - motion.map_forward(t, pts - dp)) / (2 * eps)
    return out


def fd_d2r(motion, t, pts, eps=1e-6):
    out = np.empty(pts.shape[:-1] + (2, 2, 2))
    for k in range(2):
        dp = np.zeros(2)
        dp[k] = eps
        out[..., :, :, k] = (motion.jacobian(t, pts + dp)
                             - motion.jacobian(t, pts - dp)) / (2 * eps)
    return out


def fd_d3r(motion, t, pts, eps=1e-6):
    out = np.empty(pts.shape[:-1] + (2, 2, 2, 2))
    for k in range(2):
        dp = np.zeros(2)
        dp[k] = eps
        out[..., :, :, :, k] = (motion.d2r(t, pts + dp)
                                - motion.d2r(t, pts - dp)) / (2 * eps)
    return out
