"""Backward Euler simulation and mean-square contractivity certificates for
nonlinear stochastic delay differential equations."""
from .analysis import (
    ASYMPTOTIC,
    CONTRACTIVE,
    STABLE,
    UNCERTIFIED,
    NodeSequence,
    StabilityCertificate,
    asymptotic_certificate,
    c_mu,
    certify,
    contraction_constant,
    discrete_constants,
    envelope_finite,
    linear_coeffs,
    max_stepsize,
    node_sequence,
    scalar_linear_criterion,
    sigma_rho,
)
from .core import (
    CertificationError,
    CoefficientSet,
    DelaySpec,
    DomainError,
    InitialSegment,
    ParameterError,
    ProblemSpec,
    SDDEError,
    StepError,
    StepsizeError,
    delayed_time,
    eval_initial,
    perturb_history,
    validate_problem,
)
from .integrator import (
    Grid,
    Trajectory,
    WienerPath,
    interpolate,
    simulate,
    simulate_pair,
    solve_implicit,
    wiener_batch,
    wiener_increments,
)
from .problems import REGISTRY, make_problem

__version__ = "0.1.0"
