"""Compressed LMS runners with Polyak-Ruppert averaging.

One recursion covers plain LMS, centralized compressed LMS, distributed
compressed LMS and its control-variate (memory) variant:

    w_k = w_{k-1} - gamma/N sum_i [C_k^i(g_k^i(w_{k-1}) - h^i) + h^i]
    h^i <- h^i + alpha C_k^i(g_k^i(w_{k-1}) - h^i)        (memory only)

with ``h^i = 0`` when memory is off.  Repeats are simulated side by side as a
batch axis; each (repeat, client, role) owns its own random stream.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngmod
from .compressors import IDENTITY, CompressorSpec, apply, draw, draw_floats_per_call, profile
from .errors import ConfigurationError, DivergenceError, InsufficientDataError
from .model import excess_loss, sample_features

ALGORITHMS = ("lms", "compressed_central", "compressed_distributed", "compressed_distributed_memory")
DIVERGENCE_NORM = 1e12
_BLOCK_FLOATS = 2_000_000


@dataclass(frozen=True)
class StepSizeRule:
    """Constant step, or ``gamma = K**-alpha_exp`` fixed for the whole horizon."""

    kind: str = "constant"
    gamma: float = None
    alpha_exp: float = None

    def __post_init__(self):
        if self.kind == "constant":
            if self.gamma is None or not self.gamma > 0:
                raise ConfigurationError("constant step size needs gamma > 0")
        elif self.kind == "horizon_power":
            if self.alpha_exp is None or not 0 < self.alpha_exp < 1:
                raise ConfigurationError("horizon_power needs 0 < alpha_exp < 1")
        else:
            raise ConfigurationError(f"unknown step-size rule {self.kind!r}")

    def value(self, K):
        if self.kind == "constant":
            return float(self.gamma)
        return float(K) ** (-self.alpha_exp)

    def to_dict(self):
        if self.kind == "constant":
            return {"kind": "constant", "gamma": self.gamma}
        return {"kind": "horizon_power", "alpha_exp": self.alpha_exp}


@dataclass(frozen=True)
class RunConfig:
    algorithm: str
    step_rule: StepSizeRule
    horizon_K: int
    compressor_per_client: tuple = ()
    batch_size: int = 1
    w0: tuple = None
    memory_rate: float = None
    n_repeats: int = 1
    seed: int = 0
    record_stride: int = 50
    analytic_gradient: bool = False

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigurationError(f"unknown algorithm {self.algorithm!r}")
        specs = tuple(
            s if isinstance(s, CompressorSpec) else CompressorSpec.from_dict(s)
            for s in self.compressor_per_client
        )
        object.__setattr__(self, "compressor_per_client", specs)
        if self.algorithm != "lms" and not specs:
            raise ConfigurationError(f"{self.algorithm} needs compressor specs")
        if int(self.horizon_K) != self.horizon_K or self.horizon_K < 1:
            raise ConfigurationError("horizon_K must be a positive integer")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.memory_rate is not None and not 0 < self.memory_rate <= 1:
            raise ConfigurationError("memory_rate must lie in (0, 1]")
        if self.n_repeats < 1 or self.record_stride < 1:
            raise ConfigurationError("n_repeats and record_stride must be >= 1")

    def compressors_for(self, n_clients):
        if self.algorithm == "lms":
            return (IDENTITY,) * n_clients
        specs = self.compressor_per_client
        if len(specs) == 1:
            return specs * n_clients
        if len(specs) != n_clients:
            raise ConfigurationError(f"{len(specs)} compressor specs for {n_clients} clients")
        return specs

    def to_dict(self):
        return {
            "algorithm": self.algorithm,
            "step_rule": self.step_rule.to_dict(),
            "horizon_K": int(self.horizon_K),
            "compressor_per_client": [s.to_dict() for s in self.compressor_per_client],
            "batch_size": int(self.batch_size),
            "w0": None if self.w0 is None else list(map(float, self.w0)),
            "memory_rate": self.memory_rate,
            "n_repeats": int(self.n_repeats),
            "seed": int(self.seed),
            "record_stride": int(self.record_stride),
            "analytic_gradient": bool(self.analytic_gradient),
        }


@dataclass(eq=False)
class Trajectory:
    iters: np.ndarray
    loss_last: np.ndarray
    loss_avg: np.ndarray
    final_w: np.ndarray
    final_w_avg: np.ndarray
    memory_gap: np.ndarray = field(default=None)


def default_step_size(problem, omega):
    """``1 / (2 (omega + 1) Rbar^2)`` with ``Rbar^2`` the mean trace over clients."""
    r2 = problem.mean_trace
    if not r2 > 0:
        raise ConfigurationError("step size needs a positive feature trace")
    return 1.0 / (2.0 * (omega + 1.0) * r2)


def record_points(K, per_decade=50):
    """Log-spaced iteration indices in ``[1, K]`` ending at ``K``."""
    n = int(math.ceil(math.log10(K) * per_decade)) if K > 1 else 0
    pts = np.floor(10.0 ** (np.arange(n + 1) / per_decade)).astype(np.int64)
    pts = np.unique(np.concatenate([pts[(pts >= 1) & (pts <= K)], [K]]))
    return pts


def _realized_omega(specs, d):
    return max(profile(s, d).omega for s in specs)


def check_config(problem, config):
    N = problem.n_clients
    if config.algorithm == "compressed_central" and N != 1:
        raise ConfigurationError("compressed_central runs on a single client")
    specs = config.compressors_for(N)
    for s in specs:
        s.check_dim(problem.dim)
    if config.w0 is not None and len(config.w0) != problem.dim:
        raise ConfigurationError("w0 has the wrong dimension")
    return specs


def run(problem, config, repeat=0):
    """Simulate a single repeat (stream index ``repeat``) and return its Trajectory."""
    return _simulate(problem, config, [repeat])[0]


def run_repeats(problem, config):
    """All ``config.n_repeats`` repeats, vectorized over the repeat axis."""
    return _simulate(problem, config, list(range(config.n_repeats)))


class _FeatureSource:
    """Per-(repeat, client) observation streams, generated a block at a time."""

    def __init__(self, problem, seed, repeats, batch):
        self.problem = problem
        self.batch = batch
        self.data_rngs = [[rngmod.stream(seed, r, i, rngmod.ROLE_DATA)
                           for i in range(problem.n_clients)] for r in repeats]
        self.shuffle = {}
        for ri, r in enumerate(repeats):
            for i, c in enumerate(problem.clients):
                if c.has_data:
                    self.shuffle[ri, i] = [rngmod.stream(seed, r, i, rngmod.ROLE_SHUFFLE), None, 0]
        self.sigmas = np.sqrt([c.noise_var for c in problem.clients])

    def _indices(self, key, count, n_rows):
        state = self.shuffle[key]
        out = np.empty(count, dtype=np.int64)
        filled = 0
        while filled < count:
            if state[1] is None or state[2] >= n_rows:
                state[1] = state[0].permutation(n_rows)
                state[2] = 0
            take = min(count - filled, n_rows - state[2])
            out[filled:filled + take] = state[1][state[2]:state[2] + take]
            state[2] += take
            filled += take
        return out

    def block(self, t_n):
        """Features ``(t_n, R, N, b, d)`` and offsets ``(t_n, R, N, b)``.

        The residual at ``w`` is ``<x, w - ref_i> - offset`` where ``ref_i`` is the
        local optimum for synthetic clients (offset = label noise) and 0 for
        dataset clients (offset = label).  At ``w = w*_i`` the synthetic residual
        is then exactly the noise, with no cancellation error.
        """
        p = self.problem
        R, N, b, d = len(self.data_rngs), p.n_clients, self.batch, p.dim
        x = np.empty((t_n, R, N, b, d))
        off = np.empty((t_n, R, N, b))
        for r in range(R):
            for i, c in enumerate(p.clients):
                if c.has_data:
                    idx = self._indices((r, i), t_n * b, c.rows.shape[0])
                    x[:, r, i] = c.rows[idx].reshape(t_n, b, d)
                    off[:, r, i] = c.labels[idx].reshape(t_n, b)
                else:
                    g = self.data_rngs[r][i]
                    x[:, r, i] = sample_features(c, g, (t_n, b))
                    off[:, r, i] = self.sigmas[i] * g.standard_normal((t_n, b))
        return x, off

    @property
    def reference(self):
        return np.array([np.zeros(self.problem.dim) if c.has_data else c.w_star_local
                         for c in self.problem.clients])


def block_length(problem, config):
    """Iterations whose randomness is drawn in one go.

    Depends on the problem and config only, never on how many repeats share a
    batch, so each repeat consumes its streams identically either way.
    """
    specs = config.compressors_for(problem.n_clients)
    d = problem.dim
    per_iter = 0 if config.analytic_gradient else problem.n_clients * config.batch_size * (d + 1)
    per_iter += sum(draw_floats_per_call(s, d) for s in specs)
    return int(max(1, min(1024, _BLOCK_FLOATS // 8 // max(per_iter, 1))))


def _simulate(problem, config, repeats):
    specs = check_config(problem, config)
    K = int(config.horizon_K)
    d, N, R, b = problem.dim, problem.n_clients, len(repeats), int(config.batch_size)
    gamma = config.step_rule.value(K)
    memory = config.algorithm == "compressed_distributed_memory"
    omega = _realized_omega(specs, d)
    alpha = config.memory_rate if config.memory_rate is not None else 1.0 / (2.0 * (omega + 1.0))

    # group clients sharing a compressor so each group is applied in one call
    groups = {}
    for i, s in enumerate(specs):
        groups.setdefault(s, []).append(i)
    groups = [(s, np.array(idx)) for s, idx in groups.items()]
    comp_rngs = [[rngmod.stream(config.seed, r, i, rngmod.ROLE_COMPRESSION) for i in range(N)]
                 for r in repeats]

    T = block_length(problem, config)

    source = None if config.analytic_gradient else _FeatureSource(problem, config.seed, repeats, b)
    wref = None if source is None else source.reference
    hess = np.array([c.covariance.matrix for c in problem.clients])
    wstars = np.array([c.w_star_local for c in problem.clients])
    grad_star = np.einsum("nde,ne->nd", hess, problem.w_star_global[None, :] - wstars)

    w0 = np.zeros(d) if config.w0 is None else np.asarray(config.w0, dtype=float)
    w = np.tile(w0, (R, 1))
    avg = np.zeros_like(w)
    h = np.zeros((R, N, d)) if memory else None

    rec = record_points(K, config.record_stride)
    rec_set = np.zeros(K + 1, dtype=bool)
    rec_set[rec] = True
    loss_last = np.empty((R, rec.size))
    loss_avg = np.empty((R, rec.size))
    gaps = np.empty((R, rec.size)) if memory else None
    ri = 0

    k = 0
    while k < K:
        t_n = min(T, K - k)
        if source is not None:
            xs, offs = source.block(t_n)
        drawn = []
        for s, idx in groups:
            if s.kind == "identity":
                drawn.append(None)
                continue
            per = [[draw(s, d, comp_rngs[r][i], (t_n,)) for i in idx] for r in range(R)]
            drawn.append({key: np.stack([np.stack([dd[key] for dd in row], axis=1) for row in per],
                                        axis=1) for key in per[0][0]})
        for t in range(t_n):
            k += 1
            if source is None:
                g = np.einsum("nde,rne->rnd", hess, w[:, None, :] - wstars[None])
            else:
                x = xs[t]
                resid = np.einsum("rnbd,rnd->rnb", x, w[:, None, :] - wref[None]) - offs[t]
                g = np.einsum("rnb,rnbd->rnd", resid, x)
                if b > 1:
                    g /= b
            z = g - h if memory else g
            if len(groups) == 1:
                s = groups[0][0]
                comp = z if drawn[0] is None else apply(s, z, {key: v[t] for key, v in drawn[0].items()})
            else:
                comp = np.empty_like(z)
                for (s, idx), dr in zip(groups, drawn):
                    zi = z[:, idx]
                    comp[:, idx] = zi if dr is None else apply(s, zi, {key: v[t] for key, v in dr.items()})
            if memory:
                step = (comp + h).mean(axis=1)
                h = h + alpha * comp
            else:
                step = comp.mean(axis=1) if N > 1 else comp[:, 0]
            avg += (w - avg) / k
            w = w - gamma * step
            top = np.max(np.abs(w))
            if not top <= DIVERGENCE_NORM:
                raise DivergenceError(k)
            if rec_set[k]:
                loss_last[:, ri] = excess_loss(problem, w)
                loss_avg[:, ri] = excess_loss(problem, avg)
                if memory:
                    gaps[:, ri] = np.linalg.norm(h - grad_star[None], axis=2).mean(axis=1)
                ri += 1

    return [
        Trajectory(
            iters=rec.copy(),
            loss_last=loss_last[r].copy(),
            loss_avg=loss_avg[r].copy(),
            final_w=w[r].copy(),
            final_w_avg=avg[r].copy(),
            memory_gap=None if gaps is None else gaps[r].copy(),
        )
        for r in range(R)
    ]


def mean_trajectory(trajs):
    """Elementwise mean of several trajectories recorded on the same grid."""
    first = trajs[0]
    gaps = None
    if first.memory_gap is not None:
        gaps = np.mean([t.memory_gap for t in trajs], axis=0)
    return Trajectory(
        iters=first.iters.copy(),
        loss_last=np.mean([t.loss_last for t in trajs], axis=0),
        loss_avg=np.mean([t.loss_avg for t in trajs], axis=0),
        final_w=np.mean([t.final_w for t in trajs], axis=0),
        final_w_avg=np.mean([t.final_w_avg for t in trajs], axis=0),
        memory_gap=gaps,
    )


def slope_estimate(traj, k_lo, k_hi):
    """Least-squares slope of log10(loss_avg) against log10(iter) on ``[k_lo, k_hi]``."""
    if not k_lo < k_hi:
        raise InsufficientDataError("need k_lo < k_hi")
    sel = (traj.iters >= k_lo) & (traj.iters <= k_hi)
    if np.count_nonzero(sel) < 2:
        raise InsufficientDataError(f"fewer than 2 recorded points in [{k_lo}, {k_hi}]")
    x = np.log10(traj.iters[sel].astype(float))
    y = np.log10(traj.loss_avg[sel])
    return float(np.polyfit(x, y, 1)[0])


def empirical_ania(problem, config, n_samples, rng, block=20000):
    """Monte-Carlo second moment of the additive noise at the optimum.

    For the memory variant the control variates are frozen at their limit
    ``grad F_i(w*)``.
    """
    rng = rngmod.as_generator(rng)
    specs = check_config(problem, config)
    d, N, b = problem.dim, problem.n_clients, int(config.batch_size)
    memory = config.algorithm == "compressed_distributed_memory"
    wstar = problem.w_star_global
    acc = np.zeros((d, d))
    done = 0
    while done < n_samples:
        n = int(min(block, n_samples - done))
        total = np.zeros((n, d))
        for i, (c, s) in enumerate(zip(problem.clients, specs)):
            grad_i = problem.local_gradient(i, wstar)
            if config.analytic_gradient:
                g = np.tile(grad_i, (n, 1))
            elif c.has_data:
                idx = rng.integers(0, c.rows.shape[0], size=(n, b))
                x, y = c.rows[idx], c.labels[idx]
                g = np.einsum("nb,nbd->nd", x @ wstar - y, x) / b
            else:
                x = sample_features(c, rng, (n, b))
                y = x @ c.w_star_local + math.sqrt(c.noise_var) * rng.standard_normal((n, b))
                g = np.einsum("nb,nbd->nd", x @ wstar - y, x) / b
            hv = grad_i if memory else 0.0
            comp = apply(s, g - hv, draw(s, d, rng, (n,)))
            total += comp + hv
        xi = -total / N
        acc += xi.T @ xi
        done += n
    out = acc / n_samples
    return 0.5 * (out + out.T)


def with_seed(config, seed):
    return replace(config, seed=int(seed))
