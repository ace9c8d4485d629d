"""Second moment of compressed random vectors.

Closed forms for ``E[C(E) C(E)^T]`` when ``E`` has second moment ``M``, a
Monte-Carlo estimator of the same quantity, and the trace diagnostics
``Tr(E(C, M) M^{-1})`` that drive the asymptotic rate of compressed LMS.
"""

import math
from dataclasses import dataclass

import numpy as np

from .compressors import apply, calibrate_for_omega, draw, profile
from .errors import SingularHessianError, UnsupportedFormulaError
from .model import CovarianceModel
from .rng import as_generator


@dataclass(frozen=True, eq=False)
class CompCovResult:
    matrix: np.ndarray
    is_upper_bound: bool = False


def _as_matrix(m):
    return m.matrix if isinstance(m, CovarianceModel) else np.asarray(m, dtype=float)


def _as_model(m):
    return m if isinstance(m, CovarianceModel) else CovarianceModel.from_matrix(m)


def sketch_coefficients(h, d):
    """``(alpha, beta)`` with ``E(C_Phi, M) = ((alpha - beta) M + beta Tr(M) I) / p``."""
    if d == 1:
        return 1.0, 0.0
    alpha = (h + 2) / (d + 2)
    beta = (d - h) / ((d - 1) * (d + 2))
    return alpha, beta


def analytical_covariance(spec, M):
    """Closed-form ``E(C, M)``; for 1-quantization the result is an upper bound."""
    m = _as_matrix(M)
    d = m.shape[0]
    spec.check_dim(d)
    kind = spec.kind
    diag = np.diag(np.diag(m))
    if kind == "identity":
        out = m.copy()
    elif kind == "quantize_s":
        if spec.s != 1:
            raise UnsupportedFormulaError("no closed-form covariance for s-quantization with s > 1")
        tr = np.trace(m)
        out = m + np.diag(math.sqrt(max(tr, 0.0)) * np.sqrt(np.clip(np.diag(m), 0, None)) - np.diag(m))
    elif kind == "stabilized_quantize":
        raise UnsupportedFormulaError("no closed-form covariance for stabilized quantization")
    elif kind == "sparsify":
        out = m + (1.0 - spec.p) / spec.p * diag
    elif kind == "partial_participation":
        out = m / spec.p
    elif kind == "rand_h":
        p = spec.h / d
        frac = 0.0 if d == 1 else (spec.h - 1) / (d - 1)
        out = (frac * m + (1.0 - frac) * diag) / p
    elif kind == "sketch_gaussian":
        p = spec.h / d
        alpha, beta = sketch_coefficients(spec.h, d)
        out = ((alpha - beta) * m + beta * np.trace(m) * np.eye(d)) / p
    else:  # pragma: no cover
        raise UnsupportedFormulaError(kind)
    out = 0.5 * (out + out.T)
    return CompCovResult(matrix=out, is_upper_bound=(kind == "quantize_s"))


def compose_covariance(spec_outer, spec_inner, M):
    """``E(C_outer o C_inner, M) = E(C_outer, E(C_inner, M))`` for linear operators."""
    for spec in (spec_outer, spec_inner):
        if not spec.is_linear:
            raise UnsupportedFormulaError(
                f"{spec.kind}: covariance depends on the full input law, composition undefined"
            )
    inner = analytical_covariance(spec_inner, M).matrix
    return analytical_covariance(spec_outer, inner)


# -- samplers -----------------------------------------------------------------

def gaussian_sampler(M):
    cov = _as_model(M)
    factor = cov.sqrt_factor

    def sample(rng, n):
        return rng.standard_normal((n, cov.dim)) @ factor.T

    return sample


def diamond_sampler():
    """Uniform on ``{+-e1, +-e2}``; second moment ``I_2 / 2``."""
    points = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

    def sample(rng, n):
        return points[rng.integers(0, 4, size=n)]

    return sample


def sphere_sampler(d, radius=1.0):
    """Uniform on the sphere of the given radius; second moment ``radius^2 I / d``."""

    def sample(rng, n):
        g = rng.standard_normal((n, d))
        return radius * g / np.linalg.norm(g, axis=1, keepdims=True)

    return sample


def composed_sampler(spec_inner, sampler):
    """Inputs already passed through one compressor (for composition checks)."""

    def sample(rng, n):
        e = sampler(rng, n)
        return apply(spec_inner, e, draw(spec_inner, e.shape[1], rng, (n,)))

    return sample


def empirical_covariance(spec, sampler, n_samples, rng, n_batches=10, return_se=False,
                         block=20000):
    """Monte-Carlo ``mean_j C(e_j) C(e_j)^T`` over i.i.d. inputs and compressions.

    With ``return_se`` the elementwise standard error, estimated from
    ``n_batches`` equal batches, is returned as a second matrix.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    rng = as_generator(rng)
    n_batches = max(1, min(int(n_batches), int(n_samples)))
    sizes = np.full(n_batches, n_samples // n_batches)
    sizes[: n_samples % n_batches] += 1
    batch_means = []
    total = None
    for size in sizes:
        acc = None
        done = 0
        while done < size:
            n = int(min(block, size - done))
            e = sampler(rng, n)
            c = apply(spec, e, draw(spec, e.shape[1], rng, (n,)))
            part = c.T @ c
            acc = part if acc is None else acc + part
            done += n
        batch_means.append(acc / size)
        total = acc if total is None else total + acc
    mat = total / n_samples
    mat = 0.5 * (mat + mat.T)
    if not return_se:
        return mat
    if n_batches < 2:
        return mat, np.full_like(mat, np.inf)
    stack = np.array(batch_means)
    se = stack.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return mat, se


# -- trace diagnostics ----------------------------------------------------------

def trace_diagnostic(cov, M):
    """``Tr(cov M^{-1})`` through the eigendecomposition of ``M``."""
    model = _as_model(M)
    if model.mu <= 0:
        raise SingularHessianError("M is singular (smallest eigenvalue is 0)")
    c = cov.matrix if isinstance(cov, CompCovResult) else np.asarray(cov, dtype=float)
    v = model.eigvecs
    quad = np.einsum("ij,ik,kj->j", v, c, v)
    return float(np.sum(quad / model.eigvals))


def sha_constant(spec, M):
    """Constant ``Sha_H`` with ``E(C, H) <= Sha_H H`` for linear compressors."""
    model = _as_model(M)
    if not spec.is_linear:
        raise UnsupportedFormulaError(f"{spec.kind} is not linear; no Sha_H constant")
    if model.mu <= 0:
        raise SingularHessianError("Sha_H needs a positive smallest eigenvalue")
    d = model.dim
    p = spec.keep_probability(d)
    tau = model.trace_R2 / model.mu
    diagonal = model.is_diagonal()
    kind = spec.kind
    if kind == "identity":
        return 1.0
    if kind == "partial_participation":
        return 1.0 / p
    if kind == "sparsify":
        return 1.0 / p if diagonal else 1.0 + (1.0 - p) * tau / p
    if kind == "rand_h":
        if diagonal:
            return 1.0 / p
        frac = 0.0 if d == 1 else (spec.h - 1) / (d - 1)
        return frac / p + (1.0 - frac) * tau / p
    if kind == "sketch_gaussian":
        alpha, beta = sketch_coefficients(spec.h, d)
        return (alpha - beta) / p + beta * tau / p
    raise UnsupportedFormulaError(kind)  # pragma: no cover


def compare_traces(kinds, M, omega):
    """Analytical ``Tr(E(C, M) M^{-1})`` for each kind calibrated to ``omega``, ascending."""
    model = _as_model(M)
    rows = []
    for kind in kinds:
        spec = calibrate_for_omega(kind, model.dim, omega)
        rows.append((spec.kind, trace_diagnostic(analytical_covariance(spec, model), model)))
    return sorted(rows, key=lambda r: r[1])


def realized_omega(spec, d):
    return profile(spec, d).omega
