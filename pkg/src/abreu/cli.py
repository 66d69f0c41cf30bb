"""Command-line interface.

Subcommands: run (oracle + continuation + measurements + plots), oracle,
abreu (continuation only), measure (continuation + measurement CSV, no
oracle), plot (re-render figures from existing CSVs).  Exit codes: 0 success,
2 non-convergence, 3 configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .expressions import ExpressionError

__all__ = ["main"]


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="abreu",
        description="Penalized fourth-order approximation of convexity-"
                    "constrained variational minimizers")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("run", "oracle, eps-continuation, measurements, plots"),
        ("oracle", "constrained minimizer only"),
        ("abreu", "eps-continuation only"),
        ("measure", "continuation plus measurement campaign (no oracle)"),
        ("plot", "re-render figures from CSVs in the output directory"),
    ]:
        q = sub.add_parser(name, help=help_)
        q.add_argument("--config", type=Path, default=None,
                       help="TOML run configuration")
        q.add_argument("--out", type=Path, default=None,
                       help="output directory (overrides config)")
        q.add_argument("--resolution", type=int, default=None)
        q.add_argument("--epsilon", type=str, default=None,
                       help="comma-separated decreasing schedule")
        q.add_argument("--seed", type=int, default=None)
    return p


def _overrides(args) -> dict:
    over: dict = {}
    run = {}
    if args.out is not None:
        run["output_dir"] = str(args.out)
    if args.resolution is not None:
        run["resolution"] = args.resolution
    if args.seed is not None:
        run["seed"] = args.seed
    if run:
        over["run"] = run
    if args.epsilon is not None:
        try:
            sched = [float(tok) for tok in args.epsilon.split(",") if tok]
        except ValueError as exc:
            raise ConfigError(f"bad --epsilon list: {exc}") from exc
        over["epsilon"] = {"schedule": sched}
    return over


def _cmd_run(config, oracle: bool, measurements: bool) -> int:
    from .reporting import run_experiment
    config.run_oracle = oracle and config.run_oracle
    if not oracle:
        config.raw["run"]["oracle"] = False
        config.run_oracle = False
    if not measurements:
        config.raw["run"]["measurements"] = False
        config.run_measurements = False
    result = run_experiment(config)
    for r in result.report.rows:
        err = r["sup_err_core"]
        err_s = f"{err:.6f}" if math.isfinite(err) else "n/a"
        print(f"eps={r['eps']:<8g} sup_err_core={err_s:<10} "
              f"coupling={r['residual_coupling']:.2e} "
              f"converged={bool(r['converged'])}")
    if result.continuation.failed_eps is not None:
        print(f"continuation stopped at eps={result.continuation.failed_eps}: "
              f"{result.continuation.message}", file=sys.stderr)
    print(f"artifacts in {config.output_dir}")
    return result.status


def _cmd_oracle(config) -> int:
    from .fieldio import write_field_bin, write_field_csv
    from .oracle import solve_constrained
    domains = config.domains()
    L = config.lagrangian()
    phi, _ = config.boundary_data()
    from .geometry import build_grid
    grid = build_grid(domains, config.resolution)
    opts = config.solver_options()["oracle"]
    res = solve_constrained(L, phi, domains, grid, tol=opts["tol"],
                            max_iter=opts["max_iter"])
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_field_csv(out / "oracle_u_star.csv", res.u_star, config.config_hash)
    write_field_bin(out / "oracle_u_star.bin", res.u_star)
    summary = {"objective": res.objective, "kkt_violation": res.kkt_violation,
               "active_constraint_fraction": res.active_constraint_fraction,
               "iterations": res.iterations, "converged": res.converged,
               "config_hash": config.config_hash}
    (out / "oracle_summary.json").write_text(json.dumps(summary, indent=1,
                                                        sort_keys=True))
    print(f"objective={res.objective!r} kkt={res.kkt_violation:.2e} "
          f"active={res.active_constraint_fraction:.3f}")
    return 0 if res.converged else 2


def _cmd_plot(config) -> int:
    from .plots import emit_plots
    from .reporting import ConvergenceReport, MEASUREMENT_COLUMNS, REPORT_COLUMNS
    out = config.output_dir
    rep_path = out / "report.csv"
    if not rep_path.exists():
        raise ConfigError(f"no report.csv under {out}")

    def parse_csv(path, columns):
        rows = []
        hash_seen = None
        for line in path.read_text().splitlines():
            if line.startswith("# config_hash="):
                hash_seen = line.split("=", 1)[1]
                continue
            if line.startswith("#") or line.split(",")[0] == columns[0]:
                continue
            vals = line.split(",")
            row = {}
            for c, v in zip(columns, vals):
                try:
                    row[c] = float(v)
                except ValueError:
                    row[c] = v
            rows.append(row)
        return rows, hash_seen

    rep_rows, h1 = parse_csv(rep_path, REPORT_COLUMNS)
    meas_rows, h2 = parse_csv(out / "measurements.csv", MEASUREMENT_COLUMNS) \
        if (out / "measurements.csv").exists() else ([], h1)
    if h1 and h2 and h1 != h2:
        print("config hashes differ across this run's outputs", file=sys.stderr)
        return 3
    report = ConvergenceReport(rows=rep_rows, config_hash=h1 or "")
    for p in emit_plots(report, meas_rows, out):
        print(f"wrote {p}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config, _overrides(args))
    except (ConfigError, ExpressionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    try:
        if args.command == "run":
            return _cmd_run(config, oracle=True, measurements=True)
        if args.command == "abreu":
            return _cmd_run(config, oracle=False, measurements=False)
        if args.command == "measure":
            return _cmd_run(config, oracle=False, measurements=True)
        if args.command == "oracle":
            return _cmd_oracle(config)
        if args.command == "plot":
            return _cmd_plot(config)
    except (ConfigError, ExpressionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3
    return 3


if __name__ == "__main__":
    sys.exit(main())
