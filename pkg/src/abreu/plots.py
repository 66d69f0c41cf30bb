"""Report figures. Plots are views of CSV content, never sources."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["emit_plots", "mpl_defaults"]


def mpl_defaults() -> None:
    matplotlib.rcParams.update({
        "figure.figsize": (5.5, 4.0),
        "axes.labelsize": 11,
        "axes.titlesize": 12,
        "xtick.labelsize": 10,
        "ytick.labelsize": 10,
        "legend.fontsize": 9,
        "axes.grid": True,
        "grid.alpha": 0.3,
        "savefig.bbox": "tight",
    })


def emit_plots(report, measurements: list, outdir: str | Path) -> list:
    """Write the four report figures (vector PDF); returns written paths."""
    mpl_defaults()
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    eps = report.column("eps")
    err = report.column("sup_err_core")
    fig, ax = plt.subplots()
    if any(math.isfinite(e) for e in err):
        ax.loglog(eps, err, "o-", color="tab:blue")
    ax.set_xlabel(r"penalization $\varepsilon$")
    ax.set_ylabel(r"$\sup_{\Omega_0'} |u_\varepsilon - u_\ast|$")
    ax.set_title("uniform distance to the constrained minimizer")
    ax.invert_xaxis()
    p = out / "error_vs_epsilon.pdf"
    fig.savefig(p)
    plt.close(fig)
    written.append(p)

    fig, ax = plt.subplots()
    ax.fill_between(eps, report.column("det_min"), report.column("det_max"),
                    alpha=0.3, color="tab:orange", label="det range")
    ax.plot(eps, report.column("det_min"), "v-", color="tab:orange")
    ax.plot(eps, report.column("det_max"), "^-", color="tab:red")
    ax.set_xscale("log")
    ax.set_xlabel(r"penalization $\varepsilon$")
    ax.set_ylabel(r"$\det D^2 u_\varepsilon$ bounds")
    ax.set_title("Hessian determinant pinching monitors")
    ax.invert_xaxis()
    ax.legend()
    p = out / "det_bounds.pdf"
    fig.savefig(p)
    plt.close(fig)
    written.append(p)

    vol = [m for m in measurements if m["kind"] == "volume"
           and math.isfinite(m["value"])]
    fig, ax = plt.subplots()
    centers = sorted({(m["cx"], m["cy"]) for m in vol})
    for c in centers:
        hs = [m["param"] for m in vol if (m["cx"], m["cy"]) == c]
        vs = [m["value"] for m in vol if (m["cx"], m["cy"]) == c]
        ax.semilogx(hs, vs, "o-", label=f"center ({c[0]:g}, {c[1]:g})")
    ax.set_xlabel("section height $h$")
    ax.set_ylabel(r"$|S_u(x, h)| / h^{n/2}$")
    ax.set_title("section volume law")
    if centers:
        ax.legend(fontsize=7)
    p = out / "section_volume.pdf"
    fig.savefig(p)
    plt.close(fig)
    written.append(p)

    dec = [m for m in measurements if m["kind"] == "decay"
           and math.isfinite(m["value"])]
    fig, ax = plt.subplots()
    for m in dec:
        ax.plot([m["eps"]], [m["value"]], "s", color="tab:green")
        ax.annotate(f"{m['value']:.2f}", (m["eps"], m["value"]),
                    textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax.set_xscale("log")
    ax.set_xlabel(r"penalization $\varepsilon$")
    ax.set_ylabel(r"fitted decay exponent $\hat\varepsilon$")
    ax.set_title("distribution-function decay of $w_\\varepsilon$")
    ax.invert_xaxis()
    p = out / "decay_fits.pdf"
    fig.savefig(p)
    plt.close(fig)
    written.append(p)
    return written
