"""Field serialization: CSV rows (index, x, y, value) and flat binary dumps."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .geometry import ScalarField

__all__ = ["write_field_csv", "write_field_bin", "read_field_bin"]

_MAGIC = b"ABFD"


def write_field_csv(path: str | Path, f: ScalarField, config_hash: str = "") -> None:
    """Inside nodes first, boundary feet appended with running indices."""
    g = f.grid
    lines = []
    if config_hash:
        lines.append(f"# config_hash={config_hash}")
    lines.append("index,x,y,value")
    for k in range(g.n_inside):
        lines.append(f"{k},{float(g.xy[k, 0])!r},{float(g.xy[k, 1])!r},"
                     f"{float(f.inside[k])!r}")
    for j in range(g.n_feet):
        lines.append(f"{g.n_inside + j},{float(g.feet_xy[j, 0])!r},"
                     f"{float(g.feet_xy[j, 1])!r},{float(f.feet[j])!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_field_bin(path: str | Path, f: ScalarField) -> None:
    """Header: nx, ny (int32), spacing (float64); payload: row-major lattice
    values with NaN outside."""
    g = f.grid
    lat = f.lattice()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<iid", g.nx, g.ny, g.spacing))
        fh.write(lat.astype("<f8").tobytes(order="C"))


def read_field_bin(path: str | Path) -> tuple[np.ndarray, float]:
    """Returns (lattice array (ny, nx), spacing)."""
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError("not a field dump")
        nx, ny, spacing = struct.unpack("<iid", fh.read(16))
        payload = np.frombuffer(fh.read(8 * nx * ny), dtype="<f8")
    return payload.reshape(ny, nx).copy(), spacing
