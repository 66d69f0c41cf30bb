"""
Experiment orchestration: oracle, continuation, measurement campaign, CSVs.

The report path is fully deterministic for a fixed config: CSV payloads are
byte-identical across reruns (timings live in the JSON manifest only), every
artifact carries the config hash in its header, and plots are views of CSV
content, never independent sources.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
import numpy as np

from .abreu_solver import ContinuationResult, epsilon_continuation
from .config import RunConfig
from .fieldio import write_field_bin, write_field_csv
from .geometry import Grid, ScalarField, build_grid
from .oracle import solve_constrained
from .sections import (InsufficientDecadeCoverage, SectionError,
                       compute_section, distribution_decay, harnack_quotient,
                       john_normalize)

__all__ = ["ConvergenceReport", "ExperimentResult", "run_experiment",
           "report_rows_to_csv", "measurements_to_csv"]

REPORT_COLUMNS = [
    "eps", "sup_err_core", "residual_lma", "residual_ma", "residual_coupling",
    "iterations", "converged", "sup_abs_u", "det_min", "det_max",
    "grad_sup_inner", "cw_boundary_gap", "cw_M", "f_plus_sup",
]

MEASUREMENT_COLUMNS = ["kind", "eps", "cx", "cy", "param", "value", "diag1", "diag2"]


@dataclass
class ConvergenceReport:
    """Per-eps rows (decreasing eps) plus the oracle refinement estimate."""

    rows: list
    oracle_objective: float = math.nan
    oracle_refinement_estimate: float = math.nan
    config_hash: str = ""

    def column(self, name: str) -> list:
        return [r[name] for r in self.rows]


@dataclass
class ExperimentResult:
    report: ConvergenceReport
    measurements: list
    continuation: ContinuationResult
    oracle: object | None
    grid: Grid
    status: int          # 0 ok, 2 non-convergence
    timings: dict = field(default_factory=dict)


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def report_rows_to_csv(report: ConvergenceReport) -> str:
    lines = [f"# config_hash={report.config_hash}",
             ",".join(REPORT_COLUMNS)]
    for r in report.rows:
        lines.append(",".join(_fmt(r[c]) for c in REPORT_COLUMNS))
    lines.append(f"# oracle_objective={report.oracle_objective!r}")
    lines.append(f"# oracle_refinement_estimate={report.oracle_refinement_estimate!r}")
    return "\n".join(lines) + "\n"


def measurements_to_csv(rows: list, config_hash: str) -> str:
    lines = [f"# config_hash={config_hash}", ",".join(MEASUREMENT_COLUMNS)]
    for r in rows:
        lines.append(",".join(_fmt(r[c]) for c in MEASUREMENT_COLUMNS))
    return "\n".join(lines) + "\n"


def _oracle_refinement_estimate(u_fine, grid_fine: Grid, u_coarse, grid_coarse: Grid) -> float:
    """Sup difference of the two oracle solutions on the coarse inner core.

    Valid when fine resolution = 2 * coarse - 1, so coarse node (j, i) sits at
    fine node (2j, 2i)."""
    lat = np.full((grid_fine.ny, grid_fine.nx), np.nan)
    lat[grid_fine.inside_ji[:, 0], grid_fine.inside_ji[:, 1]] = u_fine.inside
    jj, ii = grid_coarse.inside_ji[:, 0], grid_coarse.inside_ji[:, 1]
    on_fine = lat[2 * jj, 2 * ii]
    core = grid_coarse.inner_core_mask()
    return float(np.nanmax(np.abs(on_fine - u_coarse.inside)[core]))


def measurement_campaign(states, spec: dict, config_hash: str) -> list:
    """Harnack quotients and decay fits per state, section-volume ratios and
    John containment on the final state's potential."""
    rows: list = []
    centers = [tuple(c) for c in spec["centers"]]
    h_q = float(spec["harnack_height"])
    for st in states:
        for cx, cy in centers:
            try:
                q = harnack_quotient(st.w, st.u, (cx, cy), h_q)
                rows.append({"kind": "harnack", "eps": st.eps, "cx": cx, "cy": cy,
                             "param": h_q, "value": q, "diag1": 0.0, "diag2": 0.0})
            except (SectionError, ValueError):
                rows.append({"kind": "harnack", "eps": st.eps, "cx": cx, "cy": cy,
                             "param": h_q, "value": math.nan,
                             "diag1": math.nan, "diag2": math.nan})
        # decay of the normalized w over the first center's section
        cx, cy = centers[0]
        try:
            sec = compute_section(st.u, (cx, cy), h_q)
            inner = compute_section(st.u, (cx, cy), h_q / 8.0)
            inf_inner = float(np.min(st.w.inside[inner.node_ids]))
            v = ScalarField(st.u.grid, st.w.inside / max(inf_inner, 1e-300),
                            np.zeros(st.u.grid.n_feet))
            eps_hat, diag = distribution_decay(v, sec, spec["decay_thresholds"])
            rows.append({"kind": "decay", "eps": st.eps, "cx": cx, "cy": cy,
                         "param": h_q, "value": eps_hat,
                         "diag1": diag["fit_residual"],
                         "diag2": float(diag["n_thresholds"])})
        except (SectionError, InsufficientDecadeCoverage):
            rows.append({"kind": "decay", "eps": st.eps, "cx": cx, "cy": cy,
                         "param": h_q, "value": math.nan, "diag1": math.nan,
                         "diag2": 0.0})
    final = states[-1]
    for cx, cy in centers:
        for h in spec["volume_heights"]:
            try:
                sec = compute_section(final.u, (cx, cy), float(h))
                rows.append({"kind": "volume", "eps": final.eps, "cx": cx,
                             "cy": cy, "param": float(h),
                             "value": sec.measure / float(h),
                             "diag1": float(sec.n_nodes), "diag2": 0.0})
            except SectionError:
                rows.append({"kind": "volume", "eps": final.eps, "cx": cx,
                             "cy": cy, "param": float(h), "value": math.nan,
                             "diag1": 0.0, "diag2": 0.0})
        try:
            h_mid = float(spec["volume_heights"][len(spec["volume_heights"]) // 2])
            _, sec = john_normalize(compute_section(final.u, (cx, cy), h_mid),
                                    final.u)
            r_in, r_out = sec.normalized_radius_check
            rows.append({"kind": "john", "eps": final.eps, "cx": cx, "cy": cy,
                         "param": h_mid, "value": r_out, "diag1": r_in,
                         "diag2": abs(sec.john.det)})
        except SectionError:
            rows.append({"kind": "john", "eps": final.eps, "cx": cx, "cy": cy,
                         "param": math.nan, "value": math.nan,
                         "diag1": math.nan, "diag2": math.nan})
    return rows


def run_experiment(config: RunConfig, write: bool = True,
                   emit_figures: bool = True) -> ExperimentResult:
    """Oracle, eps-continuation, measurements; artifacts under output_dir.

    Deterministic for a fixed config (CSV payloads byte-identical across
    reruns).  Partial outputs are written even when a stage fails; the status
    field is 0 on success and 2 when the continuation did not converge.
    """
    t0 = time.time()
    timings: dict = {}
    domains = config.domains()
    L = config.lagrangian()
    phi, psi = config.boundary_data()
    grid = build_grid(domains, config.resolution)

    oracle_res = None
    est = math.nan
    if config.run_oracle:
        t = time.time()
        opts = config.solver_options()["oracle"]
        oracle_res = solve_constrained(L, phi, domains, grid,
                                       tol=opts["tol"], max_iter=opts["max_iter"])
        coarse_res_n = (config.resolution + 1) // 2
        grid_c = build_grid(domains, coarse_res_n)
        oracle_c = solve_constrained(L, phi, domains, grid_c,
                                     tol=opts["tol"], max_iter=opts["max_iter"])
        est = _oracle_refinement_estimate(oracle_res.u_star, grid,
                                          oracle_c.u_star, grid_c)
        timings["oracle"] = time.time() - t

    t = time.time()
    opts = config.solver_options()
    cont = epsilon_continuation(config.schedule, L, domains, grid, phi, psi,
                                tol=opts["outer"]["tol"],
                                max_sweeps=opts["outer"]["max_sweeps"],
                                ma_tol=opts["ma"]["tol"],
                                ma_max_iter=opts["ma"]["max_iter"])
    timings["continuation"] = time.time() - t

    core = grid.inner_core_mask()
    rows = []
    for st in cont.states:
        err = math.nan
        if oracle_res is not None:
            err = float(np.max(np.abs(st.u.inside - oracle_res.u_star.inside)[core]))
        m = st.monitor
        rows.append({
            "eps": st.eps, "sup_err_core": err,
            "residual_lma": st.residual_lma, "residual_ma": st.residual_ma,
            "residual_coupling": st.residual_coupling,
            "iterations": st.iterations, "converged": st.converged,
            "sup_abs_u": m.sup_abs_u, "det_min": m.det_min, "det_max": m.det_max,
            "grad_sup_inner": m.grad_sup_inner,
            "cw_boundary_gap": m.cw_boundary_gap, "cw_M": m.cw_M,
            "f_plus_sup": m.f_plus_sup,
        })
    report = ConvergenceReport(rows=rows,
                               oracle_objective=(oracle_res.objective
                                                 if oracle_res else math.nan),
                               oracle_refinement_estimate=est,
                               config_hash=config.config_hash)

    meas: list = []
    if config.run_measurements and cont.states:
        t = time.time()
        meas = measurement_campaign(cont.states, config.measurement_spec(),
                                    config.config_hash)
        timings["measurements"] = time.time() - t

    status = 0 if cont.all_converged else 2
    timings["total"] = time.time() - t0
    result = ExperimentResult(report=report, measurements=meas,
                              continuation=cont, oracle=oracle_res, grid=grid,
                              status=status, timings=timings)
    if write:
        _write_artifacts(config, result, emit_figures)
    return result


def _write_artifacts(config: RunConfig, result: ExperimentResult,
                     emit_figures: bool) -> None:
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_rows_to_csv(result.report))
    (out / "measurements.csv").write_text(
        measurements_to_csv(result.measurements, config.config_hash))
    for st in result.continuation.states:
        tag = repr(st.eps)
        write_field_csv(out / f"u_eps_{tag}.csv", st.u, config.config_hash)
        write_field_bin(out / f"u_eps_{tag}.bin", st.u)
        write_field_csv(out / f"w_eps_{tag}.csv", st.w, config.config_hash)
        ck = {"eps": st.eps, "residual_lma": st.residual_lma,
              "residual_ma": st.residual_ma,
              "residual_coupling": st.residual_coupling,
              "iterations": st.iterations, "converged": st.converged,
              "monitor": st.monitor.as_dict(), "config_hash": config.config_hash}
        (out / f"state_eps_{tag}.json").write_text(json.dumps(ck, indent=1,
                                                              sort_keys=True))
    if result.oracle is not None:
        write_field_csv(out / "oracle_u_star.csv", result.oracle.u_star,
                        config.config_hash)
        write_field_bin(out / "oracle_u_star.bin", result.oracle.u_star)
        summary = {"objective": result.oracle.objective,
                   "kkt_violation": result.oracle.kkt_violation,
                   "active_constraint_fraction":
                       result.oracle.active_constraint_fraction,
                   "iterations": result.oracle.iterations,
                   "converged": result.oracle.converged,
                   "refinement_estimate":
                       result.report.oracle_refinement_estimate,
                   "config_hash": config.config_hash}
        (out / "oracle_summary.json").write_text(json.dumps(summary, indent=1,
                                                            sort_keys=True))
    manifest = {"config": config.raw, "config_hash": config.config_hash,
                "status": result.status, "timings": result.timings}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1,
                                                  sort_keys=True))
    if emit_figures:
        from .plots import emit_plots
        emit_plots(result.report, result.measurements, out)
