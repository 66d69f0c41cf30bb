import json
import math
from pathlib import Path

import numpy as np
import pytest

from abreu.cli import main
from abreu.config import ConfigError, default_config_dict, load_config
from abreu.expressions import ExpressionError, compile_expression
from abreu.fieldio import read_field_bin, write_field_bin, write_field_csv
from abreu.geometry import ScalarField, build_grid


REDUCED = {"run": {"resolution": 33, "oracle": True},
           "epsilon": {"schedule": [0.1, 0.05]}}


class TestExpressions:
    def test_polynomial(self):
        f = compile_expression("1 + 0.5*x1*x1 - x2")
        assert f(2.0, 1.0) == pytest.approx(1 + 2.0 - 1.0)
        assert np.allclose(f(np.array([0.0, 1.0]), np.array([0.0, 0.0])),
                           [1.0, 1.5])

    def test_functions_and_powers(self):
        f = compile_expression("exp(x1) + x2**2")
        assert f(0.0, 3.0) == pytest.approx(10.0)

    def test_rejects_unsafe(self):
        with pytest.raises(ExpressionError):
            compile_expression("__import__('os')")
        with pytest.raises(ExpressionError):
            compile_expression("x3 + 1")


class TestConfig:
    def test_defaults_load_and_hash_stable(self):
        c1 = load_config()
        c2 = load_config()
        assert c1.config_hash == c2.config_hash
        assert c1.resolution == 65

    def test_hash_ignores_output_dir_only(self):
        c1 = load_config(overrides={"run": {"output_dir": "a"}})
        c2 = load_config(overrides={"run": {"output_dir": "b"}})
        c3 = load_config(overrides={"run": {"resolution": 33}})
        assert c1.config_hash == c2.config_hash
        assert c1.config_hash != c3.config_hash

    def test_rejects_bad_schedule(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"epsilon": {"schedule": [0.1, 0.2]}})
        with pytest.raises(ConfigError):
            load_config(overrides={"epsilon": {"schedule": []}})

    def test_file_parsing(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[run]\nresolution = 17\n[boundary]\nphi = "x1*x1 + x2*x2"\n')
        cfg = load_config(p)
        assert cfg.resolution == 17
        phi, psi = cfg.boundary_data()
        assert phi(1.0, 1.0) == pytest.approx(2.0)

    def test_domain_and_lagrangian_construction(self):
        cfg = load_config()
        dom = cfg.domains()
        assert dom.separation == pytest.approx(0.75)
        L = cfg.lagrangian()
        assert L.D_star == pytest.approx(1.0)


class TestFieldIO:
    def test_bin_roundtrip(self, grid33):
        f = ScalarField.from_function(grid33, lambda x, y: x * y + 1.0)
        path = Path("/tmp/abreu_test_field.bin")
        write_field_bin(path, f)
        lat, spacing = read_field_bin(path)
        assert spacing == grid33.spacing
        assert np.allclose(lat[grid33.inside_ji[:, 0], grid33.inside_ji[:, 1]],
                           f.inside)

    def test_csv_has_hash_header_and_all_sites(self, grid33, tmp_path):
        f = ScalarField.from_function(grid33, lambda x, y: x)
        p = tmp_path / "f.csv"
        write_field_csv(p, f, "deadbeef")
        lines = p.read_text().splitlines()
        assert lines[0] == "# config_hash=deadbeef"
        assert lines[1] == "index,x,y,value"
        assert len(lines) == 2 + grid33.n_inside + grid33.n_feet


@pytest.fixture(scope="module")
def result(tmp_path_factory):
    from abreu.reporting import run_experiment
    out = tmp_path_factory.mktemp("exp")
    cfg = load_config(overrides={**REDUCED, "run": {**REDUCED["run"],
                                                    "output_dir": str(out)}})
    return cfg, run_experiment(cfg)


class TestRunExperiment:
    def test_report_rows_ordered_and_converged(self, result):
        _, res = result
        eps = res.report.column("eps")
        assert eps == sorted(eps, reverse=True)
        assert all(res.report.column("converged"))
        assert res.status == 0

    def test_artifacts_written_with_shared_hash(self, result):
        cfg, _ = result
        out = cfg.output_dir
        hashes = set()
        for name in ("report.csv", "measurements.csv", "u_eps_0.1.csv"):
            first = (out / name).read_text().splitlines()[0]
            hashes.add(first.split("=", 1)[1])
        assert hashes == {cfg.config_hash}
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config_hash"] == cfg.config_hash
        for fig in ("error_vs_epsilon.pdf", "det_bounds.pdf",
                    "section_volume.pdf", "decay_fits.pdf"):
            assert (out / fig).exists()

    def test_errors_decrease_against_oracle(self, result):
        _, res = result
        errs = res.report.column("sup_err_core")
        assert all(math.isfinite(e) for e in errs)
        assert errs[-1] <= 1.05 * errs[0]

    def test_measurements_cover_all_kinds(self, result):
        _, res = result
        kinds = {m["kind"] for m in res.measurements}
        assert {"harnack", "volume", "john", "decay"} <= kinds
        harnack = [m for m in res.measurements if m["kind"] == "harnack"]
        assert all(math.isfinite(m["value"]) for m in harnack)

    def test_oracle_beats_feasible_restriction_of_continuation(self, result):
        # restricting a continuation state to the admissible class (pin the
        # annulus back to phi, restore nodewise convexity) can never beat the
        # directly minimized oracle
        from abreu.oracle import objective, project_to_convex
        cfg, res = result
        L = cfg.lagrangian()
        phi, _ = cfg.boundary_data()
        g = res.grid
        st = res.continuation.states[-1]
        from abreu.geometry import ScalarField
        cand = ScalarField.from_function(g, phi)
        vals = cand.inside.copy()
        vals[g.is_inner] = st.u.inside[g.is_inner]
        cand = cand.with_inside(vals)
        feas = project_to_convex(cand, free=g.is_inner, tol=1e-10)
        assert objective(feas, L, g) >= res.oracle.objective - 1e-9


class TestCLI:
    def test_single_eps_measurement_only_mode(self, tmp_path):
        # skips the oracle, emits the measurement CSV
        rc = main(["measure", "--config", "configs/default.toml",
                   "--out", str(tmp_path), "--resolution", "33",
                   "--epsilon", "0.1"])
        assert rc == 0
        assert (tmp_path / "measurements.csv").exists()
        assert not (tmp_path / "oracle_u_star.csv").exists()
        report = (tmp_path / "report.csv").read_text()
        assert "nan" in report    # no oracle, no error column values

    def test_plot_subcommand_rerenders(self, tmp_path):
        rc = main(["measure", "--config", "configs/default.toml",
                   "--out", str(tmp_path), "--resolution", "33",
                   "--epsilon", "0.1"])
        assert rc == 0
        for fig in tmp_path.glob("*.pdf"):
            fig.unlink()
        rc = main(["plot", "--out", str(tmp_path)])
        assert rc == 0
        assert (tmp_path / "error_vs_epsilon.pdf").exists()

    def test_config_error_exit_code(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 3
        assert main(["run", "--epsilon", "0.1,0.2"]) == 3

    def test_non_convergence_exit_code(self, tmp_path):
        # a one-sweep cap cannot converge: partial artifacts, exit code 2
        cfg = tmp_path / "c.toml"
        cfg.write_text('[outer]\nmax_sweeps = 1\n')
        rc = main(["abreu", "--config", str(cfg), "--out", str(tmp_path / "o"),
                   "--resolution", "33", "--epsilon", "0.1"])
        assert rc == 2
        assert (tmp_path / "o" / "report.csv").exists()

    def test_one_row_report_plots_without_crash(self, tmp_path):
        rc = main(["abreu", "--config", "configs/default.toml",
                   "--out", str(tmp_path), "--resolution", "33",
                   "--epsilon", "0.1"])
        assert rc == 0
        assert (tmp_path / "error_vs_epsilon.pdf").exists()
