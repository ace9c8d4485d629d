"""PNG figures written next to the CLI's CSV tables.

Uses the object-oriented Agg canvas so nothing touches pyplot's global state.
"""

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure


def _figure(width=6.0, height=4.2):
    fig = Figure(figsize=(width, height), dpi=110)
    FigureCanvasAgg(fig)
    return fig, fig.add_subplot(1, 1, 1)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    return path


def plot_trajectories(curves, path, title=None):
    """``curves`` maps a label to ``(iters, mean_log10_loss, std_log10_loss)``."""
    fig, ax = _figure()
    for label, (iters, mean, std) in curves.items():
        x = np.log10(np.asarray(iters, dtype=float))
        line, = ax.plot(x, mean, lw=1.4, label=label)
        ax.fill_between(x, mean - std, mean + std, color=line.get_color(), alpha=0.2, lw=0)
    ax.set_xlabel(r"$\log_{10}(k)$")
    ax.set_ylabel(r"$\log_{10}(F(\bar w_k) - F(w_*))$")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_traces_vs_omega(rows, path):
    """``rows``: iterable of (compressor, omega, analytical_trace, empirical_trace)."""
    fig, ax = _figure()
    by_kind = {}
    for kind, omega, ana, emp in rows:
        by_kind.setdefault(kind, []).append((omega, ana, emp))
    for kind, pts in by_kind.items():
        pts = sorted(pts)
        om = np.array([p[0] for p in pts])
        ana = np.array([np.nan if p[1] is None else p[1] for p in pts], dtype=float)
        emp = np.array([np.nan if p[2] is None else p[2] for p in pts], dtype=float)
        if np.any(np.isfinite(ana)):
            line, = ax.plot(om, ana, lw=1.4, label=kind)
            color = line.get_color()
        else:
            color = None
        if np.any(np.isfinite(emp)):
            ax.plot(om, emp, "o", ms=3, color=color, label=None if color else kind)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel(r"$\omega$")
    ax.set_ylabel(r"$\mathrm{Tr}(\mathfrak{C}(\mathcal{C}, M) M^{-1})$")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_eigenvalues(spectra, path):
    """``spectra`` maps a label to a descending eigenvalue array."""
    fig, ax = _figure()
    for label, vals in spectra.items():
        vals = np.asarray(vals, dtype=float)
        ax.plot(np.arange(1, vals.size + 1), np.clip(vals, 1e-300, None), lw=1.4, label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("index")
    ax.set_ylabel("eigenvalue")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_theory(curves, path):
    """``curves`` maps a label to ``(K_values, bound_values)``; NaN entries are skipped."""
    fig, ax = _figure()
    for label, (ks, vals) in curves.items():
        vals = np.asarray(vals, dtype=float)
        ok = np.isfinite(vals)
        if np.any(ok):
            ax.plot(np.asarray(ks)[ok], vals[ok], marker="o", ms=3, lw=1.2, label=label)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("K")
    ax.set_ylabel("bound on excess loss")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8)
    return _save(fig, path)
