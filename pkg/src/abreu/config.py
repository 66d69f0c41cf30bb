"""Run configuration: TOML parsing, defaults, validation, content hash."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ImportError:                      # Python 3.10
    import tomli as tomllib

from .expressions import compile_expression
from .geometry import NestedDomains, disk, ellipse, polynomial_domain

__all__ = ["RunConfig", "ConfigError", "load_config", "default_config_dict"]


class ConfigError(ValueError):
    pass


def default_config_dict() -> dict:
    return {
        "domain": {"preset": "disk", "outer_radius": 1.0, "inner_radius": 0.25,
                   "rho_scale": 0.01, "margin": 0.05},
        "lagrangian": {"family": "rochet_chone", "q_cost": 2.0, "eta0": "1"},
        "boundary": {"phi": "x1*x1 + x2*x2", "psi": "0.25"},
        "run": {"resolution": 65, "seed": 0, "output_dir": "out",
                "oracle": True, "measurements": True},
        "epsilon": {"schedule": [0.1, 0.05, 0.02, 0.01]},
        "ma": {"tol": 1e-8, "max_iter": 200},
        "lma": {"tol": 1e-8, "fallback": "auto"},
        "outer": {"tol": 1e-6, "max_sweeps": 200},
        "oracle": {"tol": 1e-7, "max_iter": 4000},
        "measurements": {
            "centers": [[0.0, 0.0], [0.3, 0.2], [-0.4, 0.1],
                        [0.2, -0.4], [-0.2, -0.3]],
            "harnack_height": 0.08,
            "volume_heights": [0.02, 0.045, 0.09, 0.14, 0.2],
            "decay_thresholds": [1.02, 1.05, 1.1, 1.2, 1.4, 1.8, 2.5, 4.0, 7.0],
        },
    }


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    """Validated, resolved run configuration.

    ``raw`` is the merged dict the hash is computed from; callables are
    compiled once at load.
    """

    raw: dict
    config_hash: str
    resolution: int
    seed: int
    output_dir: Path
    schedule: list
    run_oracle: bool
    run_measurements: bool

    def domains(self) -> NestedDomains:
        d = self.raw["domain"]
        preset = d.get("preset", "disk")
        if preset == "disk":
            outer = disk(d["outer_radius"], margin=d.get("margin", 0.05),
                         rho_scale=d.get("rho_scale", 1.0))
            inner = disk(d["inner_radius"])
            sep = d["outer_radius"] - d["inner_radius"]
        elif preset == "ellipse":
            outer = ellipse(d["a"], d["b"], margin=d.get("margin", 0.05),
                            rho_scale=d.get("rho_scale", 1.0))
            inner = disk(d["inner_radius"])
            sep = min(d["a"], d["b"]) - d["inner_radius"]
        elif preset == "polynomial":
            coeffs = {tuple(int(i) for i in k.split(",")): float(v)
                      for k, v in d["rho_poly"].items()}
            outer = polynomial_domain(coeffs, tuple(d["bounding_box"]))
            inner = disk(d["inner_radius"])
            sep = float(d.get("separation", 0.1))
        else:
            raise ConfigError(f"unknown domain preset {preset!r}")
        return NestedDomains(outer, inner, separation=sep)

    def lagrangian(self):
        from .lagrangian import rochet_chone
        lg = self.raw["lagrangian"]
        if lg.get("family", "rochet_chone") != "rochet_chone":
            raise ConfigError(f"unknown Lagrangian family {lg.get('family')!r}")
        eta0 = lg.get("eta0", "1")
        if isinstance(eta0, str):
            fn = compile_expression(eta0)
            try:
                const = float(eta0)
                return rochet_chone(lg.get("q_cost", 2.0), const,
                                    smoothing=lg.get("smoothing"))
            except ValueError:
                return rochet_chone(lg.get("q_cost", 2.0), fn,
                                    smoothing=lg.get("smoothing"))
        return rochet_chone(lg.get("q_cost", 2.0), float(eta0),
                            smoothing=lg.get("smoothing"))

    def boundary_data(self):
        b = self.raw["boundary"]
        return compile_expression(str(b["phi"])), compile_expression(str(b["psi"]))

    def measurement_spec(self) -> dict:
        return self.raw["measurements"]

    def solver_options(self) -> dict:
        return {"ma": self.raw["ma"], "lma": self.raw["lma"],
                "outer": self.raw["outer"], "oracle": self.raw["oracle"]}


def _validate(raw: dict) -> None:
    sched = raw["epsilon"]["schedule"]
    if not sched or any(e <= 0 for e in sched):
        raise ConfigError("epsilon schedule must be positive")
    if any(b >= a for a, b in zip(sched, sched[1:])):
        raise ConfigError("epsilon schedule must be strictly decreasing")
    if raw["run"]["resolution"] < 8:
        raise ConfigError("resolution must be at least 8")
    if not isinstance(raw["run"]["seed"], int):
        raise ConfigError("seed must be an integer")


def load_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Load and resolve a config (defaults < file < overrides)."""
    raw = default_config_dict()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = _merge(raw, tomllib.load(fh))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from exc
    if overrides:
        raw = _merge(raw, overrides)
    _validate(raw)
    # the hash identifies the experiment, not its destination
    hashed = {k: ({kk: vv for kk, vv in v.items() if kk != "output_dir"}
                  if k == "run" else v)
              for k, v in raw.items()}
    canon = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    h = hashlib.sha256(canon.encode()).hexdigest()[:16]
    return RunConfig(
        raw=raw, config_hash=h,
        resolution=int(raw["run"]["resolution"]),
        seed=int(raw["run"]["seed"]),
        output_dir=Path(raw["run"]["output_dir"]),
        schedule=[float(e) for e in raw["epsilon"]["schedule"]],
        run_oracle=bool(raw["run"]["oracle"]),
        run_measurements=bool(raw["run"]["measurements"]),
    )
