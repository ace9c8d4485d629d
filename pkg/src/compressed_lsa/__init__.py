"""Compressed least-mean-squares: compressors, their covariance, runners and bounds."""

from .bounds import (
    NoiseConstants,
    bound_corollary_horizon,
    bound_theorem_linear,
    bound_theorem_nonlinear,
    constants_centralized,
    constants_federated,
)
from .compressors import (
    IDENTITY,
    KINDS,
    CompressorProfile,
    CompressorSpec,
    calibrate_for_omega,
    compress,
    compress_coupled,
    profile,
)
from .covariance import (
    CompCovResult,
    analytical_covariance,
    compare_traces,
    compose_covariance,
    empirical_covariance,
    sha_constant,
    trace_diagnostic,
)
from .errors import *  # noqa: F401,F403
from .model import (
    ClientSpec,
    CovarianceModel,
    ProblemSpec,
    Sample,
    excess_loss,
    make_problem,
    make_synthetic_covariance,
    stochastic_gradient,
)
from .optimizer import (
    RunConfig,
    StepSizeRule,
    Trajectory,
    default_step_size,
    empirical_ania,
    run,
    run_repeats,
    slope_estimate,
)

__version__ = "0.1.0"
