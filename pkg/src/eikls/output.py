"""CSV tables, VTK legacy files, and run manifests."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .mesh import Mesh

__all__ = ["fmt", "write_csv", "write_vtk_cells", "write_vtk_polydata", "write_json_atomic",
           "equidistant_levels", "ERROR_COLUMNS"]

ERROR_COLUMNS = ["case", "bc", "M", "cells", "h_ave", "dt", "E1z", "Einfz", "Ev", "E1", "E1g",
                 "EOC_E1z", "EOC_Einfz", "EOC_Ev", "EOC_E1", "EOC_E1g"]

VTK_CONVEX_POINT_SET = 41


def fmt(x) -> str:
    """Fixed 17-significant-digit formatting so reruns are byte-identical."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        if np.isnan(x):
            return "nan"
        return f"{float(x):.17g}"
    return str(x)


def _atomic_write(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, rows: Iterable[Mapping], columns: Sequence[str]) -> None:
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt(row.get(c, "")) for c in columns])
    _atomic_write(Path(path), buf.getvalue())


def write_json_atomic(path, data) -> None:
    def default(o):
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, Path):
            return str(o)
        return str(o)

    _atomic_write(Path(path), json.dumps(data, indent=2, sort_keys=True, default=default) + "\n")


def _points_block(points: np.ndarray) -> list[str]:
    lines = [f"POINTS {len(points)} double"]
    lines += [" ".join(fmt(c) for c in p) for p in points]
    return lines


def write_vtk_cells(path, mesh: Mesh, cell_data: Mapping[str, np.ndarray],
                    title: str = "cell field") -> None:
    """Legacy ASCII unstructured grid; each polyhedron is a convex point set."""
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines += _points_block(mesh.vertices)
    n = mesh.n_cells
    counts = np.diff(mesh.cvert_ptr)
    lines.append(f"CELLS {n} {int(counts.sum() + n)}")
    for p in range(n):
        verts = mesh.cvert_idx[mesh.cvert_ptr[p]:mesh.cvert_ptr[p + 1]]
        lines.append(" ".join([str(len(verts))] + [str(v) for v in verts]))
    lines.append(f"CELL_TYPES {n}")
    lines += [str(VTK_CONVEX_POINT_SET)] * n
    if cell_data:
        lines.append(f"CELL_DATA {n}")
        for name, values in cell_data.items():
            values = np.asarray(values, dtype=float)
            if values.ndim == 1:
                lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
                lines += [fmt(v) for v in values]
            else:
                lines.append(f"VECTORS {name} double")
                lines += [" ".join(fmt(c) for c in v) for v in values]
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def write_vtk_polydata(path, surfaces: Mapping[float, np.ndarray],
                       title: str = "isosurfaces") -> None:
    """Triangle soups ``(M,3,3)`` per level as one polydata with a level scalar."""
    pts, tris, lev = [], [], []
    offset = 0
    for level, soup in surfaces.items():
        soup = np.asarray(soup, dtype=float).reshape(-1, 3, 3)
        pts.append(soup.reshape(-1, 3))
        tris.append(offset + np.arange(3 * len(soup)).reshape(-1, 3))
        lev.append(np.full(len(soup), float(level)))
        offset += 3 * len(soup)
    points = np.concatenate(pts) if pts else np.zeros((0, 3))
    polys = np.concatenate(tris) if tris else np.zeros((0, 3), dtype=int)
    levels = np.concatenate(lev) if lev else np.zeros(0)
    lines = ["# vtk DataFile Version 3.0", title[:255], "ASCII", "DATASET POLYDATA"]
    lines += _points_block(points)
    lines.append(f"POLYGONS {len(polys)} {4 * len(polys)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in polys]
    if len(polys):
        lines += [f"CELL_DATA {len(polys)}", "SCALARS level double 1", "LOOKUP_TABLE default"]
        lines += [fmt(v) for v in levels]
    _atomic_write(Path(path), "\n".join(lines) + "\n")


def equidistant_levels(count: int = 5) -> list[float]:
    """Levels ``0.25 (l - 2)`` for ``l = 1..count``."""
    return [0.25 * (l - 2) for l in range(1, count + 1)]
