"""Least-squares problems, feature covariances and the synthetic data model."""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidDimensionError
from .rng import as_generator

# Eigenvalues below this fraction of the largest one are treated as exact zeros.
_EIG_ZERO = 1e-13
_DIAG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class CovarianceModel:
    """A symmetric PSD second-moment matrix with its eigendecomposition.

    Eigenvalues are stored in descending order.  ``trace_R2`` is the trace of
    the matrix and ``mu`` its smallest eigenvalue.
    """

    matrix: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @classmethod
    def from_matrix(cls, matrix):
        m = np.array(matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise InvalidDimensionError(f"expected a non-empty square matrix, got shape {m.shape}")
        m = 0.5 * (m + m.T)
        vals, vecs = np.linalg.eigh(m)
        order = np.argsort(vals)[::-1]
        vals, vecs = vals[order], vecs[:, order]
        top = max(abs(vals[0]), 1e-300)
        if vals[-1] < -1e-8 * top:
            raise ConfigurationError(f"matrix is not PSD (smallest eigenvalue {vals[-1]:.3e})")
        vals = np.where(np.abs(vals) <= _EIG_ZERO * top, 0.0, vals)
        for a in (m, vals, vecs):
            a.setflags(write=False)
        return cls(matrix=m, eigvals=vals, eigvecs=vecs)

    @classmethod
    def from_eig(cls, eigvals, eigvecs=None):
        vals = np.asarray(eigvals, dtype=float)
        if vals.ndim != 1 or vals.size == 0:
            raise InvalidDimensionError("eigvals must be a non-empty vector")
        if np.any(vals < 0):
            raise ConfigurationError("eigenvalues must be non-negative")
        vecs = np.eye(vals.size) if eigvecs is None else np.asarray(eigvecs, dtype=float)
        if eigvecs is None:
            m = np.diag(vals)
        else:
            m = (vecs * vals) @ vecs.T
            m = 0.5 * (m + m.T)
        order = np.argsort(vals, kind="stable")[::-1]
        vals, vecs = vals[order].copy(), vecs[:, order].copy()
        for a in (m, vals, vecs):
            a.setflags(write=False)
        return cls(matrix=m, eigvals=vals, eigvecs=vecs)

    @property
    def dim(self):
        return self.matrix.shape[0]

    @property
    def trace_R2(self):
        return float(np.sum(self.eigvals))

    @property
    def mu(self):
        return float(self.eigvals[-1])

    @property
    def sqrt_factor(self):
        """Matrix ``L`` with ``L @ L.T == matrix``, namely ``V diag(sqrt(lambda))``."""
        return self.eigvecs * np.sqrt(self.eigvals)

    def sqrtm(self):
        return (self.eigvecs * np.sqrt(self.eigvals)) @ self.eigvecs.T

    def inv_sqrt_norm(self, v):
        """``||M^{-1/2} v||`` via the eigendecomposition (``inf`` if M is singular on v)."""
        coords = self.eigvecs.T @ np.asarray(v, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(coords == 0.0, 0.0, coords**2 / self.eigvals)
        return float(np.sqrt(np.sum(terms)))

    def is_diagonal(self):
        m = self.matrix
        off = m - np.diag(np.diag(m))
        return bool(np.linalg.norm(off) <= _DIAG_TOL * max(np.linalg.norm(m), 1e-300))


@dataclass(frozen=True, eq=False)
class ClientSpec:
    """One client: feature second moment, local optimum and noise level.

    ``rows``/``labels`` are set for dataset-backed clients; the runner then
    cycles through them instead of drawing Gaussian features.
    """

    covariance: CovarianceModel
    w_star_local: np.ndarray
    noise_var: float = 1.0
    rows: np.ndarray = field(default=None, repr=False)
    labels: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        w = np.array(self.w_star_local, dtype=float)
        w.setflags(write=False)
        object.__setattr__(self, "w_star_local", w)
        if self.noise_var < 0:
            raise ConfigurationError("noise_var must be non-negative")
        if w.shape != (self.covariance.dim,):
            raise InvalidDimensionError(
                f"w_star_local has shape {w.shape}, covariance has dim {self.covariance.dim}"
            )

    @property
    def dim(self):
        return self.covariance.dim

    @property
    def has_data(self):
        return self.rows is not None


@dataclass(frozen=True, eq=False)
class ProblemSpec:
    clients: tuple
    w_star_global: np.ndarray
    hessian: CovarianceModel

    @property
    def dim(self):
        return self.hessian.dim

    @property
    def n_clients(self):
        return len(self.clients)

    @property
    def mean_trace(self):
        return float(np.mean([c.covariance.trace_R2 for c in self.clients]))

    def local_gradient(self, i, w):
        c = self.clients[i]
        return c.covariance.matrix @ (np.asarray(w, dtype=float) - c.w_star_local)

    def gradient(self, w):
        return np.mean([self.local_gradient(i, w) for i in range(self.n_clients)], axis=0)


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    y: float


def haar_orthogonal(d, rng, size=()):
    """Uniform (Haar) orthogonal matrices by QR of a Gaussian with sign-fixed R."""
    rng = as_generator(rng)
    g = rng.standard_normal(tuple(size) + (d, d))
    q, r = np.linalg.qr(g)
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    signs = np.where(signs == 0, 1.0, signs)
    return q * signs[..., None, :]


def make_synthetic_covariance(d, decay_exponent, rotation="identity", seed=0):
    """Covariance with eigenvalues ``1/(i+1)**decay_exponent``, optionally rotated."""
    if int(d) != d or d < 1:
        raise InvalidDimensionError(f"d must be a positive integer, got {d}")
    if decay_exponent < 0:
        raise ConfigurationError("decay_exponent must be non-negative")
    d = int(d)
    vals = 1.0 / np.arange(1, d + 1, dtype=float) ** decay_exponent
    if rotation == "identity":
        return CovarianceModel.from_eig(vals)
    if rotation == "random_orthogonal":
        q = haar_orthogonal(d, as_generator(seed))
        return CovarianceModel.from_eig(vals, q)
    raise ConfigurationError(f"unknown rotation {rotation!r}")


def make_problem(covariances, w_stars, noise_var=1.0):
    """Assemble a ProblemSpec; the global optimum solves ``Hbar w = mean(H_i w_i)``."""
    covariances = list(covariances)
    w_stars = [np.asarray(w, dtype=float) for w in w_stars]
    if len(covariances) != len(w_stars) or not covariances:
        raise ConfigurationError("need one local optimum per client and at least one client")
    noise = np.broadcast_to(np.asarray(noise_var, dtype=float), (len(covariances),))
    clients = tuple(
        ClientSpec(covariance=c, w_star_local=w, noise_var=float(s))
        for c, w, s in zip(covariances, w_stars, noise)
    )
    return problem_from_clients(clients)


def problem_from_clients(clients, w_star_global=None):
    clients = tuple(clients)
    d = clients[0].dim
    if any(c.dim != d for c in clients):
        raise InvalidDimensionError("all clients must share the dimension")
    hbar = CovarianceModel.from_matrix(np.mean([c.covariance.matrix for c in clients], axis=0))
    if w_star_global is None and all(np.array_equal(c.w_star_local, clients[0].w_star_local)
                                     for c in clients):
        w_star_global = clients[0].w_star_local
    if w_star_global is None:
        rhs = np.mean([c.covariance.matrix @ c.w_star_local for c in clients], axis=0)
        w_star_global = solve_psd(hbar, rhs)
    w = np.array(w_star_global, dtype=float)
    w.setflags(write=False)
    return ProblemSpec(clients=clients, w_star_global=w, hessian=hbar)


def solve_psd(cov, rhs):
    """Minimum-norm solution of ``M w = rhs`` through M's eigendecomposition."""
    coords = cov.eigvecs.T @ rhs
    inv = np.zeros_like(cov.eigvals)
    nz = cov.eigvals > 0
    inv[nz] = 1.0 / cov.eigvals[nz]
    return cov.eigvecs @ (coords * inv)


def validate_problem(problem, atol=1e-8):
    """Check the structural invariants of a ProblemSpec; raises ConfigurationError."""
    hbar = np.mean([c.covariance.matrix for c in problem.clients], axis=0)
    if np.linalg.norm(hbar - problem.hessian.matrix) > 1e-10 * max(1.0, np.linalg.norm(hbar)):
        raise ConfigurationError("hessian is not the mean of the client covariances")
    grad = problem.gradient(problem.w_star_global)
    scale = max(1.0, np.linalg.norm(np.mean(
        [c.covariance.matrix @ c.w_star_local for c in problem.clients], axis=0)))
    if np.linalg.norm(grad) > atol * scale:
        raise ConfigurationError(f"gradient at w_star_global is {np.linalg.norm(grad):.3e}, not zero")


def centralized_problem(d, decay_exponent, rotation="identity", seed=0, noise_var=1.0, w_star=None):
    cov = make_synthetic_covariance(d, decay_exponent, rotation, seed)
    w = np.ones(d) if w_star is None else np.asarray(w_star, dtype=float)
    return make_problem([cov], [w], noise_var)


def covariate_shift_problem(n_clients, d, decay_choices=(3, 4, 5, 6), seed=0, noise_var=1.0,
                            w_star=None):
    """Clients share the optimum; each has its own rotation and eigenvalue decay."""
    rng = as_generator(seed)
    w = np.ones(d) if w_star is None else np.asarray(w_star, dtype=float)
    covs = []
    for _ in range(n_clients):
        beta = float(rng.choice(np.asarray(decay_choices, dtype=float)))
        vals = 1.0 / np.arange(1, d + 1, dtype=float) ** beta
        covs.append(CovarianceModel.from_eig(vals, haar_orthogonal(d, rng)))
    return make_problem(covs, [w] * n_clients, noise_var)


def concept_shift_problem(n_clients, d, decay_exponent=1.0, seed=0, noise_var=1.0,
                          w_star_var=100.0, rotation="random_orthogonal"):
    """Clients share one covariance; local optima are drawn from N(0, w_star_var I)."""
    rng = as_generator(seed)
    vals = 1.0 / np.arange(1, d + 1, dtype=float) ** decay_exponent
    if rotation == "identity":
        cov = CovarianceModel.from_eig(vals)
    else:
        cov = CovarianceModel.from_eig(vals, haar_orthogonal(d, rng))
    ws = [np.sqrt(w_star_var) * rng.standard_normal(d) for _ in range(n_clients)]
    return make_problem([cov] * n_clients, ws, noise_var)


def sample_features(client, rng, size=()):
    """Gaussian features N(0, H_i) of shape ``size + (d,)``."""
    g = rng.standard_normal(tuple(size) + (client.dim,))
    return g @ client.covariance.sqrt_factor.T


def sample_observation(client, rng):
    rng = as_generator(rng)
    x = sample_features(client, rng)
    eps = np.sqrt(client.noise_var) * rng.standard_normal()
    return Sample(x=x, y=float(x @ client.w_star_local + eps))


def excess_loss(problem, w):
    """``F(w) - F(w*) = 0.5 (w - w*)^T Hbar (w - w*)``, clipped at 0 for round-off."""
    eta = np.asarray(w, dtype=float) - problem.w_star_global
    if eta.shape[-1] != problem.dim:
        raise InvalidDimensionError("w has the wrong dimension")
    val = 0.5 * np.einsum("...i,ij,...j->...", eta, problem.hessian.matrix, eta)
    return np.maximum(val, 0.0) if np.ndim(val) else max(float(val), 0.0)


def stochastic_gradient(sample, w):
    x = np.asarray(sample.x, dtype=float)
    return (x @ np.asarray(w, dtype=float) - sample.y) * x


# -- JSON ---------------------------------------------------------------------

def problem_to_dict(problem):
    return {
        "clients": [
            {
                "covariance": c.covariance.matrix.tolist(),
                "w_star_local": c.w_star_local.tolist(),
                "noise_var": float(c.noise_var),
            }
            for c in problem.clients
        ],
        "w_star_global": problem.w_star_global.tolist(),
        "hessian": problem.hessian.matrix.tolist(),
    }


def problem_from_dict(doc):
    try:
        clients = tuple(
            ClientSpec(
                covariance=CovarianceModel.from_matrix(c["covariance"]),
                w_star_local=c["w_star_local"],
                noise_var=float(c.get("noise_var", 1.0)),
            )
            for c in doc["clients"]
        )
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"malformed problem document: {exc}") from exc
    problem = problem_from_clients(clients, doc.get("w_star_global"))
    validate_problem(problem)
    return problem


def save_problem(problem, path):
    with open(path, "w") as fh:
        json.dump(problem_to_dict(problem), fh, indent=1)


def load_problem(path):
    with open(path) as fh:
        return problem_from_dict(json.load(fh))
