"""Simulator for 2D incompressible stochastic flow on moving domains.

The moving-boundary problem is pulled back to a fixed reference square with
the Piola velocity transform; the resulting coefficient-varying stochastic
equation is integrated semi-implicitly with a global advection cutoff,
stopping-time escalation of the cutoff level, and piecewise re-referencing
of the domain once the transformed operators drift too far from their flat
form.
"""

__version__ = "0.1.0"

from .fields import (  # noqa: F401
    Grid,
    VectorField,
    ScalarField,
    divergence,
    gradient,
    leray_project,
    inner_L2,
    norm_L2,
    inner_0t,
    inner_1t,
    norm_1t,
    norm_grad,
    norm_H1,
    norm_H2,
    norm_A,
)
from .geometry import (  # noqa: F401
    DomainMotion,
    IdentityMotion,
    RotationMotion,
    ShearMotion,
    SineShearMotion,
    ComposedMotion,
    make_motion,
    evaluate_motion,
    metric_tensors,
    christoffel,
    coefficient_drift,
)
from .transform import (  # noqa: F401
    MovingField,
    piola_forward,
    piola_inverse,
    covariant_gradient,
    check_divergence_free,
)
from .operators import (  # noqa: F401
    CutoffLevel,
    OperatorBundle,
    build_bundle,
    apply_Lh_sharp,
    apply_M,
    nonlinear_N,
    apply_P0h,
    solve_P0h,
    cutoff_gN,
    drift,
    stokes_deviation,
)
from .sde import (  # noqa: F401
    NoiseModel,
    make_noise_model,
    RngCursor,
    sample_increments,
    apply_noise,
    SolverState,
    SimConfig,
    StepperOptions,
    Trajectory,
    step,
    detect_stopping,
    escalate,
    simulate,
)
from .rereference import (  # noqa: F401
    ReferencePolicy,
    should_rereference,
    rereference,
    estimate_delta,
)
from .diagnostics import (  # noqa: F401
    theta,
    theta_prime,
    AuditReport,
    moment_audit,
    iota_audit,
    norm_equivalence_audit,
    energy_series,
)
from .oracle import oracle_step, oracle_trajectory  # noqa: F401
