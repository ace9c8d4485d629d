"""Non-asymptotic excess-loss bounds for averaged compressed LSA.

The noise constants follow the usual decomposition of the noise field into an
additive part (second moment ``A``, asymptotic covariance ``C_ania``) and a
multiplicative part (Hölder constant ``M1``, quadratic constant ``M2``, and
for linear compressors the constants ``Sha_add``, ``Sha_mult``).
"""

import math
import warnings
from dataclasses import dataclass, asdict

import numpy as np

from .compressors import CompressorSpec, profile
from .covariance import analytical_covariance, sha_constant, trace_diagnostic
from .errors import (
    ConfigurationError,
    PreconditionError,
    SingularHessianError,
    UnsupportedFormulaError,
)

KAPPA_GAUSSIAN = 3.0


@dataclass(frozen=True)
class NoiseConstants:
    A: float
    M1: float
    M2: float
    sha_add: float = None
    sha_mult: float = None
    tr_ania_Hinv: float = math.inf
    tr_is_bound: bool = False

    def __post_init__(self):
        for name in ("A", "M1", "M2", "tr_ania_Hinv"):
            if not getattr(self, name) >= 0:
                raise ConfigurationError(f"{name} must be nonnegative")
        if (self.sha_add is None) != (self.sha_mult is None):
            raise ConfigurationError("sha_add and sha_mult come together")

    @property
    def is_linear(self):
        return self.sha_add is not None

    def to_dict(self):
        return asdict(self)


def _tr_ania_term(spec, cov, hess_model, weight):
    """``weight * Tr(E(C, cov) H^{-1})`` and whether it is only an upper bound."""
    try:
        res = analytical_covariance(spec, cov)
        return weight * trace_diagnostic(res, hess_model), res.is_upper_bound
    except UnsupportedFormulaError:
        # E||C(z)||^2 <= (omega+1)||z||^2 gives Tr(E H^-1) <= (omega+1) Tr(cov) / mu
        omega = profile(spec, cov.dim).omega
        return weight * (omega + 1.0) * cov.trace_R2 / hess_model.mu, True


def _specs_for(problem, specs):
    if isinstance(specs, CompressorSpec):
        specs = (specs,)
    specs = tuple(specs)
    if len(specs) == 1:
        specs = specs * problem.n_clients
    if len(specs) != problem.n_clients:
        raise ConfigurationError(f"{len(specs)} compressor specs for {problem.n_clients} clients")
    return specs


def constants_centralized(problem, spec):
    if problem.n_clients != 1:
        raise ConfigurationError("constants_centralized needs a single client")
    return constants_federated(problem, spec, "covariate_shift")


def constants_federated(problem, specs, mode, kappa=KAPPA_GAUSSIAN):
    """Constants for distributed compressed LMS under covariate or concept shift.

    ``specs`` is one spec per client or a single shared spec.  Noise levels
    that differ across clients enter through their maximum.
    """
    specs = _specs_for(problem, specs)
    N, d = problem.n_clients, problem.dim
    profs = [profile(s, d) for s in specs]
    omega = max(p.omega for p in profs)
    big_omega = max(p.omega_holder for p in profs)
    linear = all(s.is_linear for s in specs)
    sigma2 = max(c.noise_var for c in problem.clients)
    sigma = math.sqrt(sigma2)
    hess = problem.hessian
    traces = np.array([c.covariance.trace_R2 for c in problem.clients])
    het = 0.0

    if mode == "covariate_shift":
        w0 = problem.clients[0].w_star_local
        if not all(np.allclose(c.w_star_local, w0, rtol=1e-9, atol=1e-12) for c in problem.clients):
            raise ConfigurationError("covariate_shift needs a common local optimum")
        A = (omega + 1.0) * traces.mean() * sigma2 / N
        M2 = (omega + 1.0) * traces.max() / N
        M1 = big_omega * sigma * traces.max() / N
        sha_add = sha_mult = None
        if linear and hess.mu > 0:
            shas = np.array([sha_constant(s, c.covariance) for s, c in zip(specs, problem.clients)])
            sha_add = sigma2 * shas.max() / N
            sha_mult = float(np.max(traces * shas)) / N
        weights = [c.noise_var / N**2 for c in problem.clients]
        covs = [c.covariance for c in problem.clients]
    elif mode == "concept_shift":
        h0 = problem.clients[0].covariance.matrix
        if not all(np.allclose(c.covariance.matrix, h0, rtol=1e-9, atol=1e-12) for c in problem.clients):
            raise ConfigurationError("concept_shift needs a common feature covariance")
        r2 = traces[0]
        spread = np.array([problem.w_star_global - c.w_star_local for c in problem.clients])
        cov_w = spread.T @ spread / N
        het = float(np.trace(hess.matrix @ cov_w))
        A = r2 * (omega + 1.0) * (kappa * het + sigma2) / N
        M2 = (omega + 1.0) * r2 / N
        M1 = big_omega * r2 * sigma / N
        sha_add = sha_mult = None
        if linear and hess.mu > 0:
            sha = max(sha_constant(s, hess) for s in specs)
            sha_add = sigma2 * sha / N
            sha_mult = r2 * sha / N
        # sum_i Theta_i / N <= (kappa Tr(H Cov W*) + sigma^2) H
        weights = [(kappa * het + sigma2) / N**2] * N
        covs = [hess] * N
    else:
        raise ConfigurationError(f"unknown mode {mode!r}")

    if hess.mu <= 0:
        if not linear:
            warnings.warn("singular Hessian: the Hölder terms of the non-linear bound diverge",
                          RuntimeWarning, stacklevel=2)
        tr, is_bound = math.inf, True
    else:
        tr, is_bound = 0.0, mode == "concept_shift" and het > 0
        for s, cov, wgt in zip(specs, covs, weights):
            val, ub = _tr_ania_term(s, cov, hess, wgt)
            tr += val
            is_bound = is_bound or ub
    return NoiseConstants(A=float(A), M1=float(M1), M2=float(M2), sha_add=sha_add,
                          sha_mult=sha_mult, tr_ania_Hinv=float(tr), tr_is_bound=bool(is_bound))


# -- preconditions ----------------------------------------------------------------

def nonlinear_precondition(constants, problem, gamma):
    """Value of ``gamma (R_F^2 + 2 M2)``; the bound needs it <= 1/2."""
    return gamma * (problem.hessian.trace_R2 + 2.0 * constants.M2)


def linear_precondition(constants, problem, gamma):
    """``(gamma (R_F^2 + M2), 4 Sha_mult gamma)``; both must be <= 1."""
    if not constants.is_linear:
        raise PreconditionError("the linear bound needs a linear compressor")
    return gamma * (problem.hessian.trace_R2 + constants.M2), 4.0 * constants.sha_mult * gamma


def max_step_nonlinear(constants, problem):
    return 0.5 / (problem.hessian.trace_R2 + 2.0 * constants.M2)


def max_step_linear(constants, problem):
    if not constants.is_linear:
        raise PreconditionError("the linear bound needs a linear compressor")
    return min(1.0 / (problem.hessian.trace_R2 + constants.M2), 0.25 / constants.sha_mult)


_SLACK = 1e-12


def _check_common(problem, gamma, K, eta0):
    if not gamma > 0 or K < 1:
        raise PreconditionError("need gamma > 0 and K >= 1")
    eta0 = np.asarray(eta0, dtype=float)
    if eta0.shape != (problem.dim,):
        raise ConfigurationError("eta0 has the wrong dimension")
    mu = problem.hessian.mu
    if not mu > 0:
        raise SingularHessianError("the bound needs a positive smallest eigenvalue")
    return eta0, mu


# -- bounds -----------------------------------------------------------------------

def bound_theorem_nonlinear(constants, problem, gamma, K, eta0):
    eta0, mu = _check_common(problem, gamma, K, eta0)
    if nonlinear_precondition(constants, problem, gamma) > 0.5 + _SLACK:
        raise PreconditionError("gamma (R_F^2 + 2 M2) exceeds 1/2")
    init = min(problem.hessian.inv_sqrt_norm(eta0) / (gamma * math.sqrt(K)),
               float(np.linalg.norm(eta0)) / math.sqrt(gamma))
    total = (init
             + math.sqrt(constants.tr_ania_Hinv)
             + (10.0 * constants.A * gamma) ** 0.25 * math.sqrt(constants.M1 / mu)
             + math.sqrt(30.0 * constants.A * gamma) * math.sqrt(constants.M2 / mu))
    return total**2 / (2.0 * K)


def bound_theorem_linear(constants, problem, gamma, K, eta0):
    eta0, _ = _check_common(problem, gamma, K, eta0)
    c1, c2 = linear_precondition(constants, problem, gamma)
    if c1 > 1.0 + _SLACK:
        raise PreconditionError("gamma (R_F^2 + M2) exceeds 1")
    if c2 > 1.0 + _SLACK:
        raise PreconditionError("4 Sha_mult gamma exceeds 1")
    total = (float(np.linalg.norm(eta0)) / math.sqrt(gamma)
             + math.sqrt(constants.tr_ania_Hinv)
             + 2.0 * math.sqrt(gamma * problem.dim * constants.sha_add * constants.sha_mult))
    return total**2 / (2.0 * K)


def bound_corollary_horizon(constants, problem, K, alpha_exp, eta0):
    """Bound for the horizon-dependent step ``gamma = K**-alpha_exp``."""
    if not 0.0 < alpha_exp < 0.5:
        raise PreconditionError("alpha_exp must lie in (0, 1/2)")
    eta0, mu = _check_common(problem, 1.0, K, eta0)
    a = alpha_exp
    inner = (constants.tr_ania_Hinv
             + problem.hessian.inv_sqrt_norm(eta0) ** 2 / K ** (1.0 - 2.0 * a)
             + constants.M1 * math.sqrt(constants.A) / (mu * K ** (a / 2.0))
             + constants.M2 * constants.A / (mu * K**a))
    return 60.0 / K * inner
