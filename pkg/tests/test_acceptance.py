"""Acceptance checks, one per criterion.

Each check returns ``(ok, detail)``.  Under pytest every check is a test and
the terminal summary lists one PASS/FAIL line per criterion; run this file
directly to get the same lines without pytest.
"""

import atexit
import csv
import functools
import math
import shutil
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from compressed_lsa import bounds, model
from compressed_lsa import compressors as C
from compressed_lsa import covariance as cv
from compressed_lsa.cli import admissible_step
from compressed_lsa.optimizer import (
    RunConfig,
    StepSizeRule,
    default_step_size,
    empirical_ania,
    mean_trajectory,
    run,
    run_repeats,
    slope_estimate,
)

sys.path.insert(0, str(Path(__file__).parent))
import oracles  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
DIAGONAL_CONFIG = ROOT / "configs" / "diagonal_linear.json"

CRITERIA = []
RESULTS = {}


def criterion(number, title):
    def wrap(fn):
        CRITERIA.append((number, title, fn))
        return fn
    return wrap


def status_line(number):
    title, ok, detail, secs = RESULTS[number]
    return f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title} ({secs:.0f}s): {detail}"


def evaluate(number):
    for num, title, fn in CRITERIA:
        if num == number:
            t0 = time.perf_counter()
            ok, detail = fn()
            RESULTS[num] = (title, bool(ok), detail, time.perf_counter() - t0)
            return RESULTS[num]
    raise KeyError(number)


def _stream(*key):
    return np.random.default_rng(np.random.SeedSequence(20240, spawn_key=key))


def _random_spd(g, d, spread=3.0):
    q, _ = np.linalg.qr(g.standard_normal((d, d)))
    vals = np.exp(g.uniform(-spread / 2, spread / 2, d))
    return (q * vals) @ q.T


def _constant_diagonal(g, d):
    m = _random_spd(g, d)
    s = 1.0 / np.sqrt(np.diag(m))
    return g.uniform(0.5, 2.0) * (m * s[:, None] * s[None, :])


# -- 1: compressor laws ----------------------------------------------------------------

D_LAW = 16
LAW_SPECS = (
    C.IDENTITY,
    C.CompressorSpec("quantize_s", s=1),
    C.CompressorSpec("stabilized_quantize", s=1),
    C.CompressorSpec("rand_h", h=4),
    C.CompressorSpec("sparsify", p=0.25),
    C.CompressorSpec("partial_participation", p=0.25),
    C.CompressorSpec("sketch_gaussian", h=4),
)


def _law_inputs(g):
    dense = g.standard_normal((20, D_LAW)) * np.exp(g.uniform(-3, 3, (20, 1)))
    heavy = g.standard_t(2, (6, D_LAW))
    sparse = np.zeros((4, D_LAW))
    for r in sparse:
        idx = g.choice(D_LAW, size=3, replace=False)
        r[idx] = g.standard_normal(3)
    return np.vstack([dense, heavy, sparse])


def _law_moments(spec, z, n, g, block=4000):
    """Per-input sums of C(z), C(z)^2, ||C(z)-z||^2 and its square; draws shared across inputs."""
    m, d = z.shape
    s1, s2 = np.zeros((m, d)), np.zeros((m, d))
    v1, v2 = np.zeros(m), np.zeros(m)
    done = 0
    while done < n:
        b = min(block, n - done)
        c = np.broadcast_to(C.apply(spec, z[None], C.draw(spec, d, g, (b, 1))), (b, m, d))
        s1 += c.sum(axis=0)
        s2 += (c**2).sum(axis=0)
        err = ((c - z[None]) ** 2).sum(axis=-1)
        v1 += err.sum(axis=0)
        v2 += (err**2).sum(axis=0)
        done += b
    return s1 / n, s2 / n, v1 / n, v2 / n


def _two_point(spec, g, n=20000, block=2000):
    z1 = g.standard_normal((100, D_LAW)) * np.exp(g.uniform(-2, 2, (100, 1)))
    scale = np.linalg.norm(z1, axis=1, keepdims=True) * 10.0 ** g.uniform(-4, 1, (100, 1))
    dz = g.standard_normal((100, D_LAW))
    z2 = z1 + scale * dz / np.linalg.norm(dz, axis=1, keepdims=True)
    prof = C.profile(spec, D_LAW)
    gap = np.linalg.norm(z1 - z2, axis=1)
    bound = (prof.omega_holder * np.minimum(np.linalg.norm(z1, axis=1), np.linalg.norm(z2, axis=1)) * gap
             + 3.0 * (prof.omega + 1.0) * gap**2)
    a1, a2 = np.zeros(100), np.zeros(100)
    done = 0
    while done < n:
        b = min(block, n - done)
        drawn = C.draw(spec, D_LAW, g, (b, 1))
        diff = ((C.apply(spec, z1[None], drawn) - C.apply(spec, z2[None], drawn)) ** 2).sum(axis=-1)
        a1 += diff.sum(axis=0)
        a2 += (diff**2).sum(axis=0)
        done += b
    mean = a1 / n
    se = np.sqrt(np.maximum(a2 / n - mean**2, 0.0) / n)
    return mean, se, bound


@criterion(1, "compressor laws")
def check_compressor_laws():
    n = 200_000
    z = _law_inputs(_stream(1, 0))
    ok, notes = True, []
    for j, spec in enumerate(LAW_SPECS):
        mean, sq, rel1, rel2 = _law_moments(spec, z, n, _stream(1, 1, j))
        se = np.sqrt(np.maximum(sq - mean**2, 0.0) / n)
        unbiased = np.all(np.abs(mean - z) <= 4.0 * se + 1e-9 * np.abs(z))  # float accumulation
        nz = np.sum(z**2, axis=1)
        rel = rel1 / nz
        rel_se = np.sqrt(np.maximum(rel2 - rel1**2, 0.0) / n) / nz
        omega = C.profile(spec, D_LAW).omega
        safe = np.where(rel > 0, rel, 1.0)
        allowed = omega * (1.0 + 4.0 * rel_se / safe)
        variance = np.all(rel <= allowed + 1e-12)
        ok &= bool(unbiased and variance)
        notes.append(f"{spec.kind}: max|bias|/se={np.max(np.abs(mean - z) / np.where(se > 0, se, 1)):.2f} "
                     f"max var/omega={np.max(rel) / omega if omega else 0.0:.3f}")
    for j, spec in enumerate(LAW_SPECS[1:3]):
        mean, se, bound = _two_point(spec, _stream(1, 2, j))
        holds = np.all(mean <= bound + 3.0 * se)
        ok &= bool(holds)
        notes.append(f"{spec.kind} two-point max ratio={np.max(mean / bound):.3f}")
    return ok, "; ".join(notes)


# -- 2: covariance formulas ------------------------------------------------------------

D_COV = 10
COV_LINEAR = (
    C.IDENTITY,
    C.CompressorSpec("sparsify", p=0.3),
    C.CompressorSpec("partial_participation", p=0.3),
    C.CompressorSpec("rand_h", h=3),
    C.CompressorSpec("sketch_gaussian", h=3),
)


def _reference_second_moment(spec, m):
    """Closed forms rebuilt here from mask moments and sketch coefficients."""
    d = m.shape[0]
    if spec.kind == "identity":
        return m
    if spec.kind == "sketch_gaussian":
        alpha = (spec.h + 2) / (d + 2)
        beta = (d - spec.h) / ((d - 1) * (d + 2))
        return ((alpha - beta) * m + beta * np.trace(m) * np.eye(d)) * d / spec.h
    return oracles.second_moment_linear(spec.kind, m, p=spec.p, h=spec.h)


@criterion(2, "covariance formulas")
def check_covariance_formulas():
    n = 100_000
    g = _stream(2, 0)
    mats = [_random_spd(g, D_COV) for _ in range(20)]
    ok, notes = True, []
    for j, spec in enumerate(COV_LINEAR):
        worst = 0.0
        for i, m in enumerate(mats):
            ref = _reference_second_moment(spec, m)
            closed = cv.analytical_covariance(spec, m).matrix
            emp = cv.empirical_covariance(spec, cv.gaussian_sampler(m), n, _stream(2, 1, j, i))
            worst = max(worst, np.linalg.norm(emp - closed) / np.linalg.norm(closed))
            ok &= bool(np.allclose(closed, ref, rtol=1e-12, atol=1e-14))
        ok &= worst < 0.05
        notes.append(f"{spec.kind} worst rel err={worst:.4f}")
    for h in (3, 10):
        spec = C.CompressorSpec("sketch_gaussian", h=h)
        m = mats[0]
        ref = _reference_second_moment(spec, m)
        emp = cv.empirical_covariance(spec, cv.gaussian_sampler(m), n, _stream(2, 2, h))
        err = np.linalg.norm(emp - ref) / np.linalg.norm(ref)
        ok &= bool(err < 0.05 and np.allclose(cv.analytical_covariance(spec, m).matrix, ref, rtol=1e-12))
        notes.append(f"sketch (10,{h}) rel err={err:.4f}")
    quant = C.CompressorSpec("quantize_s", s=1)
    worst = math.inf
    for i, m in enumerate(mats[:5]):
        emp, se = cv.empirical_covariance(quant, cv.gaussian_sampler(m), n, _stream(2, 3, i),
                                          return_se=True)
        gap = cv.analytical_covariance(quant, m).matrix - emp
        lam = np.linalg.eigvalsh(0.5 * (gap + gap.T))[0]
        margin = lam / (3.0 * np.linalg.norm(se))
        worst = min(worst, margin)
        ok &= bool(lam > -3.0 * np.linalg.norm(se))
    notes.append(f"quantization min lambda_min/(3 SE_F)={worst:.2f}")
    emp, se = cv.empirical_covariance(quant, cv.diamond_sampler(), n, _stream(2, 4), return_se=True)
    target = 0.5 * np.eye(2)
    dev = np.abs(emp - target)
    ok &= bool(np.all(dev <= 4.0 * se + 1e-15))
    bound = cv.analytical_covariance(quant, target).matrix
    notes.append(f"diamond max dev={dev.max():.2e} (bound diag {bound[0, 0]:.4f})")
    return ok, "; ".join(notes)


# -- 3: trace orderings ----------------------------------------------------------------

@criterion(3, "trace orderings")
def check_trace_orderings():
    d, h = 100, 10
    p = h / d
    pp = C.CompressorSpec("partial_participation", p=p)
    sp = C.CompressorSpec("sparsify", p=p)
    rh = C.CompressorSpec("rand_h", h=h)
    sk = C.CompressorSpec("sketch_gaussian", h=h)

    def tr(spec, m):
        return cv.trace_diagnostic(cv.analytical_covariance(spec, m), m)

    g = _stream(3, 0)
    ok = True
    for _ in range(20):
        m = np.diag(np.exp(g.uniform(-4, 4, d)))
        covs = [cv.analytical_covariance(s, m).matrix for s in (pp, sp, rh)]
        ok &= all(np.allclose(c, m * d / h, rtol=1e-12, atol=0) for c in covs)
        t = [tr(s, m) for s in (pp, sp, rh)]
        ok &= bool(np.allclose(t, d * d / h, rtol=1e-12) and max(t) <= tr(sk, m) * (1 + 1e-12))
    gaps = []
    for _ in range(20):
        m = _constant_diagonal(g, d)
        chain = [tr(s, m) for s in (pp, sk, sp, rh)]
        ok &= all(a < b * (1 - 1e-12) for a, b in zip(chain, chain[1:]))
        gaps.append(min(b / a - 1 for a, b in zip(chain, chain[1:])))
    scalar = 1.7 * np.eye(d)
    ties = [tr(s, scalar) for s in (pp, sk, sp, rh)]
    ok &= bool(np.allclose(ties, ties[0], rtol=1e-12))

    pq = 1.0 / (math.sqrt(d) + 1.0)
    q = C.CompressorSpec("quantize_s", s=1)
    ppq = C.CompressorSpec("partial_participation", p=pq)
    spq = C.CompressorSpec("sparsify", p=pq)
    factor = 1.0 + 1.0 / math.sqrt(d)
    ok &= math.isclose(C.profile(q, d).omega, math.sqrt(d)) and math.isclose(C.profile(ppq, d).omega, math.sqrt(d))
    for _ in range(20):
        m = np.diag(np.exp(g.uniform(-4, 4, d)))
        a, b = tr(ppq, m), tr(spq, m)
        ok &= bool(math.isclose(a, b, rel_tol=1e-12) and a <= factor * tr(q, m) * (1 + 1e-12))
    for _ in range(20):
        m = _constant_diagonal(g, d)
        diff = cv.analytical_covariance(spq, m).matrix - cv.analytical_covariance(q, m).matrix
        ok &= bool(np.linalg.eigvalsh(diff)[0] >= -1e-10 * np.abs(diff).max())
        ok &= bool(tr(ppq, m) <= factor * tr(q, m) * (1 + 1e-12))
    return ok, f"strict chain, smallest relative gap {min(gaps):.3g}"


# -- 4: LMS variance constant ----------------------------------------------------------

@criterion(4, "LMS variance constant")
def check_lms_constant():
    d, K = 20, 200_000
    p = model.centralized_problem(d, 1.0, "identity", seed=0)
    cfg = RunConfig("lms", StepSizeRule("constant", gamma=default_step_size(p, 0.0)), K,
                    n_repeats=5, seed=0)
    scaled = np.array([K * t.loss_avg[-1] for t in run_repeats(p, cfg)])
    target = 1.0 * d / 2
    ok = bool(np.all((scaled >= 0.5 * target) & (scaled <= 2.0 * target)))
    return ok, f"K*loss per seed {np.round(scaled, 2).tolist()}, window [{0.5 * target}, {2 * target}]"


# -- 5 and 11: diagonal problem through the CLI ----------------------------------------

def _read_curves(outdir):
    curves = {}
    for vdir in sorted(p for p in outdir.iterdir() if p.is_dir()):
        losses = []
        for f in sorted(vdir.glob("seed*.csv")):
            with open(f, newline="") as fh:
                rows = list(csv.DictReader(fh))
            iters = np.array([int(r["iter"]) for r in rows])
            losses.append([float(r["loss_avg"]) for r in rows])
        curves[vdir.name] = (iters, np.mean(losses, axis=0), len(losses))
    return curves


@functools.lru_cache(maxsize=None)
def _cli_output(tag):
    out = Path(tempfile.mkdtemp(prefix=f"acceptance-{tag}-"))
    atexit.register(shutil.rmtree, out, True)
    proc = subprocess.run([sys.executable, "-m", "compressed_lsa", "run", str(DIAGONAL_CONFIG),
                           "--out", str(out), "--no-plots"], capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(f"CLI exited {proc.returncode}: {proc.stderr[-2000:]}")
    return out


@criterion(5, "O(1/K) for linear compressors on diagonal H")
def check_linear_rate():
    curves = _read_curves(_cli_output("first"))
    ok, notes = len(curves) == 3, []
    for name, (iters, loss, reps) in curves.items():
        sel = (iters >= 10**4) & (iters <= 10**5)
        slope = float(np.polyfit(np.log10(iters[sel]), np.log10(loss[sel]), 1)[0])
        ok &= -1.3 <= slope <= -0.7
        notes.append(f"{name} slope={slope:.4f} ({reps} replicates)")
    return ok, "; ".join(notes)


@criterion(11, "determinism")
def check_determinism():
    a, b = _cli_output("first"), _cli_output("second")
    fa = sorted(p.relative_to(a) for p in a.rglob("*.csv"))
    fb = sorted(p.relative_to(b) for p in b.rglob("*.csv"))
    same = fa == fb and all((a / f).read_bytes() == (b / f).read_bytes() for f in fa)
    return same and len(fa) > 0, f"{len(fa)} CSV files compared byte for byte"


# -- 6 and 7: rotated problem ----------------------------------------------------------

ROTATED_KINDS = ("quantize_s", "stabilized_quantize", "sparsify", "rand_h", "partial_participation",
                 "sketch_gaussian")


def _rotated_problem():
    return model.centralized_problem(20, 4.0, "random_orthogonal", seed=0)


@functools.lru_cache(maxsize=None)
def _rotated_final(kind, rule=None):
    p = _rotated_problem()
    spec = C.calibrate_for_omega(kind, p.dim, 10)
    if rule is None:
        rule = StepSizeRule("constant", gamma=default_step_size(p, C.profile(spec, p.dim).omega))
    cfg = RunConfig("compressed_central", rule, 100_000, compressor_per_client=(spec,), n_repeats=5, seed=0)
    return float(mean_trajectory(run_repeats(p, cfg)).loss_avg[-1])


@criterion(6, "saturation ordering on rotated H")
def check_saturation_ordering():
    final = {k: _rotated_final(k) for k in ROTATED_KINDS}
    pp = final["partial_participation"]
    lowest = all(v > pp for k, v in final.items() if k != "partial_participation")
    ratios = {k: final[k] / pp for k in ("quantize_s", "sketch_gaussian")}
    ok = lowest and all(r >= 5.0 for r in ratios.values())
    listing = ", ".join(f"{k}={v:.3e}" for k, v in sorted(final.items(), key=lambda kv: kv[1]))
    return ok, f"{listing}; ratios to PP " + ", ".join(f"{k}={r:.1f}" for k, r in ratios.items())


@criterion(7, "horizon step size for quantization")
def check_horizon_step():
    default = _rotated_final("quantize_s")
    horizon = _rotated_final("quantize_s", StepSizeRule("horizon_power", alpha_exp=0.4))
    return horizon < default, f"K^-2/5 step {horizon:.3e} vs default step {default:.3e}"


# -- 8: federated covariate shift ------------------------------------------------------

@criterion(8, "federated covariate-shift noise covariance")
def check_covariate_shift_ania():
    p = model.covariate_shift_problem(10, 20, seed=1)
    N = p.n_clients
    ok, notes = True, []
    for j, (kind, omega) in enumerate((("sparsify", 1), ("partial_participation", 1), ("rand_h", 1),
                                        ("sparsify", 10), ("partial_participation", 10), ("rand_h", 10))):
        spec = C.calibrate_for_omega(kind, p.dim, omega)
        cfg = RunConfig("compressed_distributed", StepSizeRule("constant", gamma=0.1), 1,
                        compressor_per_client=(spec,))
        emp = empirical_ania(p, cfg, 100_000, _stream(8, j))
        sigma2 = p.clients[0].noise_var
        ref = sigma2 / N * np.mean([oracles.second_moment_linear(kind, c.covariance.matrix, p=spec.p, h=spec.h)
                                    for c in p.clients], axis=0)
        err = np.linalg.norm(emp - ref) / np.linalg.norm(ref)
        ok &= err < 0.05
        notes.append(f"{spec.label()} {err:.4f}")
    return ok, "rel err " + ", ".join(notes)


# -- 9: control variates ---------------------------------------------------------------

@criterion(9, "control variates")
def check_control_variates():
    p = model.concept_shift_problem(10, 20, 1.0, seed=2)
    initial = float(np.mean([np.linalg.norm(p.local_gradient(i, p.w_star_global)) for i in range(p.n_clients)]))
    ok, notes = True, []
    for omega in (1, 10):
        spec = C.calibrate_for_omega("sparsify", p.dim, omega)
        cfg = RunConfig("compressed_distributed_memory",
                        StepSizeRule("constant", gamma=default_step_size(p, omega)), 10_000,
                        compressor_per_client=(spec,), analytic_gradient=True, seed=0)
        gap = run(p, cfg).memory_gap[-1] / initial
        ok &= gap < 1e-3
        notes.append(f"omega={omega} gap ratio={gap:.2e}")
    cfg = RunConfig("compressed_distributed", StepSizeRule("constant", gamma=default_step_size(p, 0.0)), 10_000,
                    compressor_per_client=(C.IDENTITY,), analytic_gradient=True, seed=0)
    slope = slope_estimate(run(p, cfg), 10**3, 10**4)
    ok &= slope <= -1.5
    notes.append(f"uncompressed slope={slope:.3f}")
    return ok, "; ".join(notes)


# -- 10: bound domination --------------------------------------------------------------

@criterion(10, "bound domination")
def check_bound_domination():
    p = model.centralized_problem(20, 4.0, "identity", seed=0)
    eta0 = -p.w_star_global
    ok, notes = True, []
    for kind in ("partial_participation", "sparsify", "rand_h", "quantize_s"):
        spec = C.calibrate_for_omega(kind, p.dim, 10)
        gamma = admissible_step(p, [spec])
        const = bounds.constants_centralized(p, spec)
        bound = bounds.bound_theorem_linear if spec.is_linear else bounds.bound_theorem_nonlinear
        cfg = RunConfig("compressed_central", StepSizeRule("constant", gamma=gamma), 100_000,
                        compressor_per_client=(spec,), n_repeats=32, seed=0)
        mean = mean_trajectory(run_repeats(p, cfg))
        worst = 0.0
        for K in (10**3, 10**4, 10**5):
            sim = float(mean.loss_avg[np.flatnonzero(mean.iters == K)[0]])
            b = bound(const, p, gamma, K, eta0)
            ok &= sim <= b
            worst = max(worst, sim / b)
        notes.append(f"{kind} max sim/bound={worst:.3g}")
    return ok, "; ".join(notes)


CRITERIA.sort()


@pytest.mark.slow
@pytest.mark.parametrize("number", [c[0] for c in CRITERIA], ids=[f"criterion_{c[0]:02d}" for c in CRITERIA])
def test_acceptance(number):
    _, ok, detail, _ = evaluate(number)
    print(status_line(number))
    assert ok, detail


if __name__ == "__main__":
    failed = 0
    for num, _, _ in CRITERIA:
        evaluate(num)
        print(status_line(num), flush=True)
        failed += not RESULTS[num][1]
    sys.exit(1 if failed else 0)
