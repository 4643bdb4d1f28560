"""File formats: VTK fields, comparison tables, yield windows, reference dumps."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .fem import frobenius

COMPARE_COLUMNS = ("scenario", "algorithm", "Bi", "h", "iterations", "seconds", "converged")
REFERENCE_MAGIC = "VISCOPLASTIC-REFERENCE 1"


@dataclass
class YieldWindow:
    values: np.ndarray      # |tau| clamped into [Bi(1-w), Bi(1+w)]
    unyielded: np.ndarray   # True where |tau| <= Bi


def export_yield_window(tau, Bi: float, window_fraction: float = 1e-3) -> YieldWindow:
    """Clamp the stress magnitude into a narrow window around ``Bi``."""
    if not window_fraction > 0:
        raise ValueError("window fraction must be > 0")
    values = getattr(tau, "values", tau)
    mag = frobenius(np.asarray(values, dtype=float))
    lo, hi = Bi * (1.0 - window_fraction), Bi * (1.0 + window_fraction)
    return YieldWindow(np.clip(mag, lo, hi), mag <= Bi)


def _fmt(a) -> str:
    return "\n".join(" ".join(f"{v:.17g}" for v in np.atleast_1d(row)) for row in a)


def write_vtk(path, fine, point_vectors: dict | None = None, point_scalars: dict | None = None,
              cell_scalars: dict | None = None, title: str = "viscoplastic flow") -> None:
    """Legacy ASCII unstructured grid of triangles (cell type 5)."""
    nv, nt = fine.n_vertices, fine.n_triangles
    pts = np.column_stack([fine.vertices, np.zeros(nv)])
    cells = np.column_stack([np.full(nt, 3), fine.triangles])
    parts = [
        "# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID",
        f"POINTS {nv} double", _fmt(pts),
        f"CELLS {nt} {4 * nt}", "\n".join(" ".join(map(str, c)) for c in cells),
        f"CELL_TYPES {nt}", "\n".join(["5"] * nt),
    ]
    if point_vectors or point_scalars:
        parts.append(f"POINT_DATA {nv}")
        for name, v in (point_vectors or {}).items():
            v = np.asarray(v, dtype=float).reshape(nv, -1)
            v3 = np.column_stack([v, np.zeros((nv, 3 - v.shape[1]))])
            parts += [f"VECTORS {name} double", _fmt(v3)]
        for name, s in (point_scalars or {}).items():
            parts += [f"SCALARS {name} double 1", "LOOKUP_TABLE default",
                      _fmt(np.asarray(s, dtype=float).reshape(nv, 1))]
    if cell_scalars:
        parts.append(f"CELL_DATA {nt}")
        for name, s in cell_scalars.items():
            parts += [f"SCALARS {name} double 1", "LOOKUP_TABLE default",
                      _fmt(np.asarray(s, dtype=float).reshape(nt, 1))]
    Path(path).write_text("\n".join(parts) + "\n")


def write_fields(path, ops, result, Bi: float, window_fraction: float = 1e-3) -> None:
    """Velocity, pressure, |tau|, yield flag, yield window and residual."""
    fine = ops.fine
    residual = frobenius(ops.sym_grad(result.u.flat) - result.gamma.values)
    win = export_yield_window(result.tau, Bi, window_fraction)
    write_vtk(path, fine,
              point_vectors={"velocity": result.u.values},
              point_scalars={"pressure": ops.prolong @ result.p.values},
              cell_scalars={"tau_norm": result.tau.norm(),
                            "unyielded": win.unyielded.astype(float),
                            "yield_window": win.values,
                            "residual": residual})


def read_vtk_summary(path) -> dict:
    """Counts and section names of a legacy VTK file (for checks, not a full reader)."""
    info = {"sections": []}
    for line in Path(path).read_text().splitlines():
        head = line.split()
        if not head:
            continue
        if head[0] in ("POINTS", "CELLS", "CELL_TYPES", "POINT_DATA", "CELL_DATA"):
            info[head[0]] = int(head[1])
        elif head[0] in ("SCALARS", "VECTORS"):
            info["sections"].append(head[1])
        elif head[0] == "DATASET":
            info["DATASET"] = head[1]
    return info


def write_comparison(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARE_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in COMPARE_COLUMNS})


def read_comparison(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != COMPARE_COLUMNS:
            raise ValueError(f"unexpected comparison header {reader.fieldnames}")
        return [dict(r) for r in reader]


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")


def write_reference(path, fine, model, iterations: int, u, tau, gamma, p) -> None:
    """Binary field dump behind a short text header."""
    arrays = [np.ascontiguousarray(a, dtype="<f8").ravel() for a in (u, tau, gamma, p)]
    header = "\n".join([
        REFERENCE_MAGIC,
        f"mesh_checksum {fine.checksum()}",
        f"model {json.dumps(model.to_dict(), sort_keys=True)}",
        f"iterations {int(iterations)}",
        "sizes " + " ".join(str(len(a)) for a in arrays),
        "END",
    ]) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for a in arrays:
            fh.write(a.tobytes())


@dataclass
class Reference:
    mesh_checksum: str
    model: dict
    iterations: int
    u: np.ndarray
    tau: np.ndarray
    gamma: np.ndarray
    p: np.ndarray


def read_reference(path, fine=None) -> Reference:
    """Load a reference dump; with ``fine`` given, the mesh checksum must match."""
    with open(path, "rb") as fh:
        meta = {}
        first = fh.readline().decode("ascii", "replace").strip()
        if first != REFERENCE_MAGIC:
            raise ValueError(f"{path}: not a reference dump")
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            line = line.decode("ascii").strip()
            if line == "END":
                break
            key, _, val = line.partition(" ")
            meta[key] = val
        sizes = [int(s) for s in meta["sizes"].split()]
        data = np.frombuffer(fh.read(), dtype="<f8")
    if len(data) != sum(sizes):
        raise ValueError(f"{path}: expected {sum(sizes)} values, found {len(data)}")
    if fine is not None and meta["mesh_checksum"] != fine.checksum():
        raise ValueError(f"{path}: reference was computed on a different mesh")
    chunks = np.split(data.copy(), np.cumsum(sizes)[:-1])
    u, tau, gamma, p = chunks
    return Reference(meta["mesh_checksum"], json.loads(meta["model"]), int(meta["iterations"]),
                     u.reshape(-1, 2), tau.reshape(-1, 3), gamma.reshape(-1, 3), p)
