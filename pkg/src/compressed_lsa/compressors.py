"""Unbiased randomized compression operators.

Each operator is split into a random *draw* (masks, uniforms, Gaussian
projection matrices, rotations) and a deterministic *apply* step.  Sharing
one draw between two inputs gives the coupled evaluation used in Hölder-type
checks, and lets the runner pre-generate randomness in blocks.

All functions accept batches: ``z`` has shape ``size + (d,)`` and the draw
carries the matching leading ``size``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, ConfigurationError, InvalidDimensionError
from .model import haar_orthogonal
from .rng import as_generator

KINDS = (
    "identity",
    "quantize_s",
    "stabilized_quantize",
    "rand_h",
    "sparsify",
    "partial_participation",
    "sketch_gaussian",
)
LINEAR_KINDS = frozenset({"identity", "rand_h", "sparsify", "partial_participation", "sketch_gaussian"})
QUANTIZATION_KINDS = frozenset({"quantize_s", "stabilized_quantize"})

_ALIASES = {
    "id": "identity",
    "none": "identity",
    "quantize": "quantize_s",
    "quantization": "quantize_s",
    "stabilized": "stabilized_quantize",
    "randh": "rand_h",
    "sparsification": "sparsify",
    "pp": "partial_participation",
    "sketch": "sketch_gaussian",
    "sketching": "sketch_gaussian",
}


def canonical_kind(kind):
    k = str(kind).lower()
    k = _ALIASES.get(k, k)
    if k not in KINDS:
        raise ConfigurationError(f"unknown compressor kind {kind!r}")
    return k


@dataclass(frozen=True)
class CompressorSpec:
    """One compression operator: ``kind`` plus the parameters that kind uses.

    ``s`` is the quantization level, ``p`` the keep/participation probability
    and ``h`` the number of kept coordinates or the sketch rank.
    """

    kind: str
    s: int = None
    p: float = None
    h: int = None

    def __post_init__(self):
        kind = canonical_kind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind in QUANTIZATION_KINDS:
            s = 1 if self.s is None else self.s
            if int(s) != s or s < 1:
                raise ConfigurationError("quantization level s must be a positive integer")
            object.__setattr__(self, "s", int(s))
            self._only("s")
        elif kind in ("sparsify", "partial_participation"):
            if self.p is None or not (0.0 < self.p <= 1.0):
                raise ConfigurationError(f"{kind} needs 0 < p <= 1, got {self.p}")
            object.__setattr__(self, "p", float(self.p))
            self._only("p")
        elif kind in ("rand_h", "sketch_gaussian"):
            if self.h is None or int(self.h) != self.h or self.h < 1:
                raise ConfigurationError(f"{kind} needs a positive integer h, got {self.h}")
            object.__setattr__(self, "h", int(self.h))
            self._only("h")
        else:
            self._only()

    def _only(self, *names):
        for name in ("s", "p", "h"):
            if name not in names and getattr(self, name) is not None:
                raise ConfigurationError(f"parameter {name!r} is not used by {self.kind}")

    @property
    def is_linear(self):
        return self.kind in LINEAR_KINDS

    def check_dim(self, d):
        if d < 1:
            raise InvalidDimensionError("dimension must be positive")
        if self.h is not None and self.h > d:
            raise ConfigurationError(f"{self.kind}: h={self.h} exceeds d={d}")

    def keep_probability(self, d):
        """The ``p`` entering the covariance formulas (``h/d`` for rand-h and sketching)."""
        if self.kind in ("rand_h", "sketch_gaussian"):
            return self.h / d
        if self.kind in ("sparsify", "partial_participation"):
            return self.p
        return 1.0

    def label(self):
        if self.kind in QUANTIZATION_KINDS:
            return f"{self.kind}(s={self.s})"
        if self.p is not None:
            return f"{self.kind}(p={self.p:.6g})"
        if self.h is not None:
            return f"{self.kind}(h={self.h})"
        return self.kind

    def to_dict(self):
        out = {"kind": self.kind}
        for name in ("s", "p", "h"):
            if getattr(self, name) is not None:
                out[name] = getattr(self, name)
        return out

    @classmethod
    def from_dict(cls, doc):
        return cls(kind=doc["kind"], s=doc.get("s"), p=doc.get("p"), h=doc.get("h"))


IDENTITY = CompressorSpec("identity")


@dataclass(frozen=True)
class CompressorProfile:
    omega: float
    omega_holder: float
    is_linear: bool


def profile(spec, d):
    """Worst-case variance factor and Hölder constant of ``spec`` in dimension ``d``."""
    spec.check_dim(d)
    kind = spec.kind
    if kind == "identity":
        return CompressorProfile(0.0, 0.0, True)
    if kind in QUANTIZATION_KINDS:
        omega = min(d / spec.s**2, math.sqrt(d) / spec.s)
        return CompressorProfile(omega, 12.0 * math.sqrt(d), False)
    p = spec.keep_probability(d)
    return CompressorProfile((1.0 - p) / p, 0.0, True)


def calibrate_for_omega(kind, d, target_omega):
    """Spec of the given kind whose variance factor is (about) ``target_omega``."""
    kind = canonical_kind(kind)
    if target_omega is None or not np.isfinite(target_omega) or target_omega < 0:
        raise CalibrationError(f"unreachable omega {target_omega}")
    if kind == "identity":
        if target_omega != 0:
            raise CalibrationError("the identity operator only has omega = 0")
        return IDENTITY
    if kind in ("sparsify", "partial_participation"):
        return CompressorSpec(kind, p=1.0 / (1.0 + target_omega))
    if kind in ("rand_h", "sketch_gaussian"):
        h = int(np.clip(round(d / (1.0 + target_omega)), 1, d))
        return CompressorSpec(kind, h=h)
    if target_omega == 0:
        raise CalibrationError("quantization cannot reach omega = 0")
    # smallest s with min(d/s^2, sqrt(d)/s) <= omega
    s = max(1, math.ceil(min(math.sqrt(d / target_omega), math.sqrt(d) / target_omega) - 1e-12))
    while min(d / s**2, math.sqrt(d) / s) > target_omega:
        s += 1
    while s > 1 and min(d / (s - 1) ** 2, math.sqrt(d) / (s - 1)) <= target_omega:
        s -= 1
    return CompressorSpec(kind, s=s)


# -- draws ----------------------------------------------------------------------

def draw(spec, d, rng, size=()):
    """Sample the randomness of ``spec`` for a batch of shape ``size``."""
    spec.check_dim(d)
    size = tuple(size)
    kind = spec.kind
    if kind == "identity":
        return {}
    if kind == "quantize_s":
        return {"u": rng.random(size + (d,))}
    if kind == "stabilized_quantize":
        return {"rot": haar_orthogonal(d, rng, size), "u": rng.random(size + (d,))}
    if kind == "sparsify":
        return {"mask": rng.random(size + (d,)) < spec.p}
    if kind == "partial_participation":
        return {"keep": rng.random(size) < spec.p}
    if kind == "rand_h":
        # ranks of i.i.d. uniforms form a uniform permutation
        u = rng.random(size + (d,))
        ranks = np.argsort(np.argsort(u, axis=-1), axis=-1)
        return {"mask": ranks < spec.h}
    if kind == "sketch_gaussian":
        return _draw_sketch(spec.h, d, rng, size)
    raise ConfigurationError(kind)


def _draw_sketch(h, d, rng, size):
    phi = rng.standard_normal(size + (h, d))
    gram = phi @ np.swapaxes(phi, -1, -2)
    # Gram matrices of Gaussian sketches are a.s. invertible; redraw the rare failures.
    cond = np.linalg.cond(gram) if h > 1 else np.ones(size)
    bad = ~np.isfinite(cond) | (cond > 1e12) | (np.abs(gram[..., 0, 0]) == 0)
    while np.any(bad):
        phi[bad] = rng.standard_normal((int(np.sum(bad)), h, d))
        gram = phi @ np.swapaxes(phi, -1, -2)
        cond = np.linalg.cond(gram) if h > 1 else np.ones(size)
        bad = ~np.isfinite(cond) | (cond > 1e12) | (np.abs(gram[..., 0, 0]) == 0)
    # pseudo-inverse Phi^T (Phi Phi^T)^{-1} from the Gram system
    pinv = np.swapaxes(np.linalg.solve(gram, phi), -1, -2)
    return {"phi": phi, "pinv": pinv}


def apply(spec, z, drawn):
    """Deterministic part of the compression for pre-sampled randomness."""
    z = np.asarray(z, dtype=float)
    kind = spec.kind
    if kind == "identity":
        return z.copy()
    if kind == "quantize_s":
        return _quantize(z, drawn["u"], spec.s)
    if kind == "stabilized_quantize":
        rot = drawn["rot"]
        y = np.einsum("...ij,...j->...i", rot, z)
        q = _quantize(y, drawn["u"], spec.s)
        return np.einsum("...ji,...j->...i", rot, q)
    if kind == "sparsify":
        return np.where(drawn["mask"], z / spec.p, 0.0)
    if kind == "partial_participation":
        return np.where(drawn["keep"][..., None], z / spec.p, 0.0)
    if kind == "rand_h":
        d = z.shape[-1]
        return np.where(drawn["mask"], z * (d / spec.h), 0.0)
    if kind == "sketch_gaussian":
        d = z.shape[-1]
        proj = np.einsum("...hd,...d->...h", drawn["phi"], z)
        return np.einsum("...dh,...h->...d", drawn["pinv"], proj) * (d / spec.h)
    raise ConfigurationError(kind)


def _quantize(z, u, s):
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    safe = np.where(norm > 0, norm, 1.0)
    ratio = s * np.abs(z) / safe
    level = np.floor(ratio)
    chi = level + (u < ratio - level)
    out = np.sign(z) * norm * chi / s
    return np.where(norm > 0, out, 0.0)


def compress(spec, z, rng):
    """One draw of ``C(z)`` (batched over leading axes of ``z``)."""
    z = np.asarray(z, dtype=float)
    return apply(spec, z, draw(spec, z.shape[-1], as_generator(rng), z.shape[:-1]))


def compress_coupled(spec, z1, z2, rng):
    """Compress two inputs with the same underlying randomness."""
    z1 = np.asarray(z1, dtype=float)
    z2 = np.asarray(z2, dtype=float)
    if z1.shape != z2.shape:
        raise InvalidDimensionError("coupled inputs must share a shape")
    drawn = draw(spec, z1.shape[-1], as_generator(rng), z1.shape[:-1])
    return apply(spec, z1, drawn), apply(spec, z2, drawn)


def draw_floats_per_call(spec, d):
    """Approximate number of floats one draw holds (used to size blocks)."""
    if spec.kind == "stabilized_quantize":
        return d * d + d
    if spec.kind == "sketch_gaussian":
        return 2 * spec.h * d
    if spec.kind == "identity":
        return 0
    return d
