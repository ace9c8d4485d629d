"""Command-line experiment runner.

    compressed-lsa run config.json [--out DIR] [--seeds N] [--horizon K] [--no-plots]
    compressed-lsa covariance config.json ...
    compressed-lsa theory config.json ...

One JSON document describes the problem, the run variants and what to emit.
Exit status: 0 on success, 2 on configuration errors, 3 on divergence.
"""

import argparse
import csv
import json
import logging
import math
import os
import re
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bounds, data, model
from .compressors import IDENTITY, KINDS, CompressorSpec, calibrate_for_omega, canonical_kind, profile
from .covariance import analytical_covariance, empirical_covariance, gaussian_sampler, trace_diagnostic
from .errors import CompressedLSAError, ConfigurationError, DivergenceError, UnsupportedFormulaError
from .optimizer import RunConfig, StepSizeRule, default_step_size, run_repeats
from .rng import ROLE_MISC, stream

log = logging.getLogger("compressed_lsa")

WORKERS_ENV = "COMPRESSED_LSA_WORKERS"
EMIT_CHOICES = frozenset({"trajectories", "covariances", "traces_vs_omega", "theory_bounds"})
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3

TRAJECTORY_HEADER = ["iter", "loss_last", "loss_avg", "memory_gap"]
SUMMARY_HEADER = ["variant", "iter", "mean_log10_loss_avg", "std_log10_loss_avg",
                  "mean_log10_loss_last", "std_log10_loss_last"]
TRACES_HEADER = ["compressor", "omega", "realized_omega", "params", "analytical_trace",
                 "empirical_trace", "frobenius_gap", "is_upper_bound"]
EIGEN_HEADER = ["compressor", "omega", "index", "eigenvalue", "source"]
THEORY_HEADER = ["variant", "K", "gamma", "bound_nonlinear", "bound_linear", "bound_horizon",
                 "tr_ania_Hinv", "A", "M1", "M2", "sha_add", "sha_mult", "status"]


def fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


@dataclass
class Variant:
    name: str
    config: RunConfig
    gamma: float
    omega: float


@dataclass
class ExperimentConfig:
    problem: model.ProblemSpec
    variants: list
    horizon: int
    seeds: int
    outputs: Path
    emit: frozenset
    raw: dict = field(repr=False)
    problem_meta: dict = field(default_factory=dict)


# -- config parsing ---------------------------------------------------------------

def _require(doc, key, where):
    if key not in doc:
        raise ConfigurationError(f"{where}: missing {key!r}")
    return doc[key]


def build_problem(doc, base_dir=Path(".")):
    kind = doc.get("kind", "synthetic")
    if kind == "inline":
        return model.problem_from_dict(doc), {}
    if kind == "synthetic":
        recipe = doc.get("recipe", "centralized")
        seed = int(doc.get("seed", 0))
        noise = float(doc.get("noise_var", 1.0))
        d = int(_require(doc, "d", "problem"))
        if recipe == "centralized":
            return model.centralized_problem(d, float(doc.get("decay", 1.0)),
                                             doc.get("rotation", "identity"), seed, noise,
                                             doc.get("w_star")), {}
        if recipe == "covariate_shift":
            return model.covariate_shift_problem(int(_require(doc, "n_clients", "problem")), d,
                                                 tuple(doc.get("decay_choices", (3, 4, 5, 6))),
                                                 seed, noise, doc.get("w_star")), {}
        if recipe == "concept_shift":
            return model.concept_shift_problem(int(_require(doc, "n_clients", "problem")), d,
                                               float(doc.get("decay", 1.0)), seed, noise,
                                               float(doc.get("w_star_var", 100.0)),
                                               doc.get("rotation", "random_orthogonal")), {}
        raise ConfigurationError(f"unknown synthetic recipe {recipe!r}")
    if kind == "dataset":
        path = Path(_require(doc, "path", "problem"))
        if not path.is_absolute():
            path = base_dir / path
        ds = data.load_csv(path, _require(doc, "label_column", "problem"))
        ds, _ = data.fit_apply_preprocess(ds, doc.get("preprocess", "standardize"))
        parts = data.split_clients(ds, int(doc.get("n_clients", 1)), doc.get("split", "iid"),
                                   int(doc.get("split_seed", 0)))
        meta = {"rows": ds.n, "dropped_rows": ds.dropped, "client_sizes": [p.n for p in parts]}
        return data.empirical_problem(parts), meta
    raise ConfigurationError(f"unknown problem kind {kind!r}")


def parse_compressor(doc, d):
    if isinstance(doc, str):
        doc = {"kind": doc}
    if not isinstance(doc, dict) or "kind" not in doc:
        raise ConfigurationError(f"malformed compressor entry {doc!r}")
    kind = canonical_kind(doc["kind"])
    if "omega" in doc:
        if kind == "identity":
            return IDENTITY
        return calibrate_for_omega(kind, d, float(doc["omega"]))
    return CompressorSpec.from_dict(dict(doc, kind=kind))


def admissible_step(problem, specs, mode="covariate_shift"):
    """Largest constant step meeting the preconditions of the applicable bound."""
    specs = specs or (IDENTITY,)
    if problem.n_clients == 1:
        const = bounds.constants_centralized(problem, specs[0])
    else:
        const = bounds.constants_federated(problem, specs, mode)
    if const.is_linear:
        return bounds.max_step_linear(const, problem)
    return bounds.max_step_nonlinear(const, problem)


def _step_rule(doc, problem, omega, specs, mode):
    doc = doc or {"kind": "default"}
    kind = doc.get("kind", "default")
    if kind == "default":
        return StepSizeRule("constant", gamma=default_step_size(problem, omega))
    if kind == "admissible":
        return StepSizeRule("constant", gamma=admissible_step(problem, specs, mode))
    if kind == "constant":
        return StepSizeRule("constant", gamma=float(_require(doc, "gamma", "step")))
    if kind == "horizon_power":
        return StepSizeRule("horizon_power", alpha_exp=float(_require(doc, "alpha_exp", "step")))
    raise ConfigurationError(f"unknown step kind {kind!r}")


def _safe_name(name):
    return re.sub(r"[^A-Za-z0-9_.=-]+", "_", name).strip("_") or "variant"


def build_variants(doc, problem, horizon, seeds):
    runs = doc.get("runs")
    if not isinstance(runs, list) or not runs:
        raise ConfigurationError("config needs a non-empty 'runs' list")
    d, N = problem.dim, problem.n_clients
    out, seen = [], set()
    for j, r in enumerate(runs):
        if not isinstance(r, dict):
            raise ConfigurationError(f"runs[{j}] must be an object")
        algorithm = r.get("algorithm", "compressed_central" if N == 1 else "compressed_distributed")
        comp = r.get("compressor", r.get("compressors", "identity"))
        comp = comp if isinstance(comp, list) else [comp]
        specs = tuple(parse_compressor(c, d) for c in comp)
        if algorithm == "lms":
            specs = ()
        omega = max([profile(s, d).omega for s in specs] or [0.0])
        mode = doc.get("theory", {}).get("mode", "covariate_shift")
        rule = _step_rule(r.get("step", doc.get("step")), problem, omega, specs, mode)
        w0 = r.get("w0", doc.get("w0"))
        cfg = RunConfig(
            algorithm=algorithm,
            step_rule=rule,
            horizon_K=int(horizon),
            compressor_per_client=specs,
            batch_size=int(r.get("batch_size", doc.get("batch_size", 1))),
            w0=None if w0 is None else tuple(float(v) for v in w0),
            memory_rate=r.get("memory_rate"),
            n_repeats=int(seeds),
            seed=int(r.get("seed", doc.get("seed", 0))),
            record_stride=int(r.get("record_stride", doc.get("record_stride", 50))),
            analytic_gradient=bool(r.get("analytic_gradient", False)),
        )
        name = _safe_name(r.get("name") or (specs[0].label() if specs else algorithm))
        if name in seen:
            raise ConfigurationError(f"duplicate variant name {name!r}")
        seen.add(name)
        out.append(Variant(name, cfg, rule.value(horizon), omega))
    return out


def load_experiment(path, out=None, seeds=None, horizon=None):
    path = Path(path)
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be an object")
    problem, meta = build_problem(_require(doc, "problem", "config"), path.parent)
    horizon = int(horizon if horizon is not None else doc.get("horizon", 100_000))
    seeds = int(seeds if seeds is not None else doc.get("seeds", 5))
    if horizon < 1 or seeds < 1:
        raise ConfigurationError("horizon and seeds must be positive")
    emit = doc.get("emit", ["trajectories"])
    bad = set(emit) - EMIT_CHOICES
    if bad:
        raise ConfigurationError(f"unknown emit entries {sorted(bad)}")
    outdir = Path(out if out is not None else doc.get("outputs", "out"))
    variants = build_variants(doc, problem, horizon, seeds)
    return ExperimentConfig(problem, variants, horizon, seeds, outdir, frozenset(emit), doc, meta)


# -- run --------------------------------------------------------------------------

def _run_variant(args):
    problem, variant = args
    return run_repeats(problem, variant.config)


def _workers():
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer") from None


def _analytical_tr(problem, variant):
    """``Tr(C_ania H^-1)`` when a closed form exists, else None."""
    cfg = variant.config
    specs = cfg.compressors_for(problem.n_clients)
    if problem.hessian.mu <= 0:
        return None
    if all(np.allclose(c.w_star_local, problem.w_star_global) for c in problem.clients):
        try:
            N = problem.n_clients
            tot = sum(c.noise_var / N**2 * trace_diagnostic(analytical_covariance(s, c.covariance),
                                                             problem.hessian)
                      for s, c in zip(specs, problem.clients))
            return float(tot)
        except UnsupportedFormulaError:
            return None
    return None


def cmd_run(exp, plots=True):
    exp.outputs.mkdir(parents=True, exist_ok=True)
    problem = exp.problem
    jobs = [(problem, v) for v in exp.variants]
    workers = min(_workers(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_variant, jobs))
    else:
        results = [_run_variant(j) for j in jobs]

    summary_rows, curves, meta_variants = [], {}, []
    for v, trajs in zip(exp.variants, results):
        vdir = exp.outputs / v.name
        vdir.mkdir(exist_ok=True)
        for k, tr in enumerate(trajs):
            gap = tr.memory_gap if tr.memory_gap is not None else [None] * tr.iters.size
            write_csv(vdir / f"seed{k}.csv", TRAJECTORY_HEADER,
                      zip(tr.iters, tr.loss_last, tr.loss_avg, gap))
        with np.errstate(divide="ignore"):
            la = np.log10(np.array([t.loss_avg for t in trajs]))
            ll = np.log10(np.array([t.loss_last for t in trajs]))
        for j, it in enumerate(trajs[0].iters):
            summary_rows.append((v.name, it, la[:, j].mean(), la[:, j].std(),
                                 ll[:, j].mean(), ll[:, j].std()))
        curves[v.name] = (trajs[0].iters, la.mean(axis=0), la.std(axis=0))
        meta_variants.append({
            "name": v.name,
            "config": v.config.to_dict(),
            "omega": v.omega,
            "gamma": v.gamma,
            "tr_ania_Hinv_analytical": _analytical_tr(problem, v),
        })
    write_csv(exp.outputs / "summary.csv", SUMMARY_HEADER, summary_rows)
    meta = {
        "problem": {"dim": problem.dim, "n_clients": problem.n_clients,
                    "mean_trace": problem.mean_trace, "mu": problem.hessian.mu, **exp.problem_meta},
        "horizon": exp.horizon,
        "seeds": exp.seeds,
        "variants": meta_variants,
        "config": exp.raw,
    }
    with open(exp.outputs / "metadata.json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")
    if plots:
        from .plotting import plot_trajectories
        plot_trajectories(curves, exp.outputs / "trajectories.png")
    if "theory_bounds" in exp.emit:
        cmd_theory(exp, plots=plots)
    if {"covariances", "traces_vs_omega"} & exp.emit:
        cmd_covariance(exp, plots=plots)
    return EXIT_OK


# -- covariance -------------------------------------------------------------------

def cmd_covariance(exp, plots=True):
    exp.outputs.mkdir(parents=True, exist_ok=True)
    cdoc = exp.raw.get("covariance", {})
    M = exp.problem.hessian
    d = M.dim
    kinds = [canonical_kind(k) for k in cdoc.get("kinds", KINDS)]
    grid = [float(w) for w in cdoc.get("omega_grid", [1.0, 10.0, 100.0])]
    n_samples = int(cdoc.get("n_samples", 0))
    rng = stream(int(cdoc.get("seed", 0)), 0, 0, ROLE_MISC)
    sampler = gaussian_sampler(M)
    rows, plot_rows = [], []
    for kind in kinds:
        for omega in grid:
            try:
                spec = IDENTITY if kind == "identity" else calibrate_for_omega(kind, d, omega)
            except CompressedLSAError as exc:
                log.warning("%s at omega=%g skipped: %s", kind, omega, exc)
                continue
            try:
                res = analytical_covariance(spec, M)
                ana_mat, ub = res.matrix, res.is_upper_bound
                ana = trace_diagnostic(res, M) if M.mu > 0 else None
            except UnsupportedFormulaError:
                ana_mat, ana, ub = None, None, False
            emp = gap = None
            if n_samples > 0:
                emp_mat = empirical_covariance(spec, sampler, n_samples, rng)
                emp = trace_diagnostic(emp_mat, M) if M.mu > 0 else None
                if ana_mat is not None:
                    gap = float(np.linalg.norm(emp_mat - ana_mat) / np.linalg.norm(ana_mat))
            params = ";".join(f"{k}={v}" for k, v in spec.to_dict().items() if k != "kind")
            rows.append((kind, omega, profile(spec, d).omega, params, ana, emp, gap, ub))
            plot_rows.append((kind, omega, ana, emp))
    write_csv(exp.outputs / "traces.csv", TRACES_HEADER, rows)

    eig_omega = float(cdoc.get("eigen_omega", grid[0] if grid else 10.0))
    eig_rows, spectra = [], {}
    for kind in kinds:
        try:
            spec = IDENTITY if kind == "identity" else calibrate_for_omega(kind, d, eig_omega)
        except CompressedLSAError:
            continue
        try:
            mat, source = analytical_covariance(spec, M).matrix, "analytical"
        except UnsupportedFormulaError:
            if n_samples <= 0:
                continue
            mat, source = empirical_covariance(spec, sampler, n_samples, rng), "empirical"
        vals = np.linalg.eigvalsh(mat)[::-1]
        spectra[kind] = vals
        eig_rows.extend((kind, eig_omega, i + 1, v, source) for i, v in enumerate(vals))
    write_csv(exp.outputs / "eigenvalues.csv", EIGEN_HEADER, eig_rows)
    if plots:
        from .plotting import plot_eigenvalues, plot_traces_vs_omega
        plot_traces_vs_omega(plot_rows, exp.outputs / "traces.png")
        if spectra:
            plot_eigenvalues(spectra, exp.outputs / "eigenvalues.png")
    return EXIT_OK


# -- theory -----------------------------------------------------------------------

def _theory_constants(problem, variant, mode, kappa=bounds.KAPPA_GAUSSIAN):
    specs = variant.config.compressors_for(problem.n_clients)
    if problem.n_clients == 1:
        return bounds.constants_centralized(problem, specs[0])
    return bounds.constants_federated(problem, specs, mode, kappa)


def cmd_theory(exp, plots=True):
    exp.outputs.mkdir(parents=True, exist_ok=True)
    tdoc = exp.raw.get("theory", {})
    grid = [int(k) for k in tdoc.get("K_grid", [10**3, 10**4, 10**5])]
    mode = tdoc.get("mode", "covariate_shift")
    kappa = float(tdoc.get("kappa", bounds.KAPPA_GAUSSIAN))
    if not kappa >= 1:
        raise ConfigurationError("theory.kappa must be >= 1")
    problem = exp.problem
    rows, curves = [], {}
    for v in exp.variants:
        cfg = v.config
        w0 = np.zeros(problem.dim) if cfg.w0 is None else np.asarray(cfg.w0)
        eta0 = w0 - problem.w_star_global
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always")
                const = _theory_constants(problem, v, mode, kappa)
            notes = [str(c.message) for c in caught]
        except CompressedLSAError as exc:
            log.warning("%s: constants unavailable: %s", v.name, exc)
            rows.append((v.name, None, None, None, None, None, None, None, None, None,
                         None, None, f"constants:{exc}"))
            continue
        lin_vals, nl_vals = [], []
        for K in grid:
            gamma = cfg.step_rule.value(K)
            status = []
            if notes:
                status.append("warning:singular_hessian")
            nl = lin = hz = None
            try:
                nl = bounds.bound_theorem_nonlinear(const, problem, gamma, K, eta0)
            except CompressedLSAError as exc:
                status.append(f"nonlinear:{type(exc).__name__}")
            if const.is_linear:
                try:
                    lin = bounds.bound_theorem_linear(const, problem, gamma, K, eta0)
                except CompressedLSAError as exc:
                    status.append(f"linear:{type(exc).__name__}")
            if cfg.step_rule.kind == "horizon_power":
                try:
                    hz = bounds.bound_corollary_horizon(const, problem, K, cfg.step_rule.alpha_exp, eta0)
                except CompressedLSAError as exc:
                    status.append(f"horizon:{type(exc).__name__}")
            rows.append((v.name, K, gamma, nl, lin, hz, const.tr_ania_Hinv, const.A, const.M1,
                         const.M2, const.sha_add, const.sha_mult, ";".join(status) or "ok"))
            nl_vals.append(math.nan if nl is None else nl)
            lin_vals.append(math.nan if lin is None else lin)
        if np.isfinite(nl_vals).any() or np.isfinite(lin_vals).any():
            curves[f"{v.name} (non-linear)"] = (grid, nl_vals)
            if const.is_linear:
                curves[f"{v.name} (linear)"] = (grid, lin_vals)
    flagged = [r for r in rows if r[-1] != "ok"]
    for r in flagged:
        log.warning("theory row flagged: %s K=%s: %s", r[0], r[1], r[-1])
    write_csv(exp.outputs / "theory.csv", THEORY_HEADER, rows)
    if plots and curves:
        from .plotting import plot_theory
        plot_theory(curves, exp.outputs / "theory.png")
    return EXIT_OK


# -- entry point ------------------------------------------------------------------

COMMANDS = {"run": cmd_run, "covariance": cmd_covariance, "theory": cmd_theory}


def build_parser():
    p = argparse.ArgumentParser(prog="compressed-lsa",
                                description="Simulate compressed LMS and evaluate its bounds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="experiment JSON document")
        s.add_argument("--out", help="output directory (overrides 'outputs')")
        s.add_argument("--seeds", type=int, help="number of repeats per variant")
        s.add_argument("--horizon", type=int, help="number of iterations K")
        s.add_argument("--no-plots", action="store_true", help="write CSV/JSON only")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        exp = load_experiment(args.config, args.out, args.seeds, args.horizon)
        return COMMANDS[args.command](exp, plots=not args.no_plots)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CompressedLSAError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
