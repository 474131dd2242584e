"""Error metrics, convergence orders, CFL numbers, and marching tetrahedra.

The tetrahedra used for volumes and isosurfaces have a face triangle
``(v_j, v_{j+1}, x_g)`` as base and the owning cell center ``x_p`` as apex;
they tile each (star-shaped) cell.  Vertices with ``u <= 0`` count as inside.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .mesh import Mesh, characteristic_lengths
from .recon import ReconstructionCache, StencilKind, gradient_operators
from .scenarios import DELTA, VelocityField

__all__ = [
    "EmptyBand",
    "zero_band",
    "tet_points",
    "tet_inside_volumes",
    "TetGeometry",
    "mesh_lengths",
    "enclosed_volume",
    "isosurface",
    "ErrorReport",
    "ErrorAccumulator",
    "ReversibilityAccumulator",
    "eoc",
    "cfl_stats",
    "cell_h",
]


class EmptyBand(ValueError):
    pass


def cell_h(mesh: Mesh) -> np.ndarray:
    """Per-cell characteristic length (cube root of the bounding-box volume)."""
    return np.cbrt(mesh.cell_bbox_volumes)


def zero_band(mesh: Mesh, vertex_values: np.ndarray, allow_empty: bool = False) -> np.ndarray:
    """Cells whose vertex samples have both signs (``<= 0`` and ``> 0``)."""
    vals = vertex_values[mesh.cvert_idx]
    counts = np.diff(mesh.cvert_ptr)
    starts = mesh.cvert_ptr[:-1]
    lo = np.minimum.reduceat(vals, starts)
    hi = np.maximum.reduceat(vals, starts)
    lo[counts == 0] = np.inf
    band = np.flatnonzero((lo <= 0.0) & (hi > 0.0))
    if band.size == 0 and not allow_empty:
        raise EmptyBand("no cell contains the zero level set")
    return band


# -- marching tetrahedra -----------------------------------------------------

def tet_points(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """``(points (H,4,3), global point ids (H,4))`` of the half-triangle tets.

    Point ids index ``[cells | vertices | face centers]``.
    """
    n, nv = mesh.n_cells, mesh.n_vertices
    a = mesh.ht_tri
    ids = np.stack([n + mesh.tri_v0[a], n + mesh.tri_v1[a], n + nv + mesh.tri_face[a],
                    mesh.ht_cell], axis=1)
    pts = np.concatenate([mesh.cell_centers, mesh.vertices, mesh.face_centers])[ids]
    return pts, ids


@njit(cache=True)
def _tet_volume(p0, p1, p2, p3):
    ax, ay, az = p1[0] - p0[0], p1[1] - p0[1], p1[2] - p0[2]
    bx, by, bz = p2[0] - p0[0], p2[1] - p0[1], p2[2] - p0[2]
    cx, cy, cz = p3[0] - p0[0], p3[1] - p0[1], p3[2] - p0[2]
    det = ax * (by * cz - bz * cy) - ay * (bx * cz - bz * cx) + az * (bx * cy - by * cx)
    return abs(det) / 6.0


@njit(cache=True)
def _lerp(pa, pb, ua, ub):
    t = ua / (ua - ub)
    return pa + t * (pb - pa)


@njit(cache=True)
def _inside_volume(P, u):
    """Volume of ``{u <= 0}`` in one tet with linear ``u``."""
    inside = np.empty(4, dtype=np.int64)
    outside = np.empty(4, dtype=np.int64)
    ni = 0
    no = 0
    for i in range(4):
        if u[i] <= 0.0:
            inside[ni] = i
            ni += 1
        else:
            outside[no] = i
            no += 1
    if ni == 0:
        return 0.0
    full = _tet_volume(P[0], P[1], P[2], P[3])
    if ni == 4:
        return full
    if ni == 1 or ni == 3:
        lone = inside[0] if ni == 1 else outside[0]
        frac = 1.0
        for i in range(4):
            if i != lone:
                frac *= u[lone] / (u[lone] - u[i])
        return full * frac if ni == 1 else full * (1.0 - frac)
    a, b = inside[0], inside[1]
    c, d = outside[0], outside[1]
    pP = _lerp(P[a], P[c], u[a], u[c])
    pQ = _lerp(P[a], P[d], u[a], u[d])
    pR = _lerp(P[b], P[c], u[b], u[c])
    pS = _lerp(P[b], P[d], u[b], u[d])
    return (_tet_volume(P[a], pP, pQ, pS) + _tet_volume(P[a], pP, pR, pS)
            + _tet_volume(P[a], P[b], pR, pS))


@njit(cache=True)
def _inside_volumes(points, values, out):
    for h in range(points.shape[0]):
        out[h] = _inside_volume(points[h], values[h])


def tet_inside_volumes(points: np.ndarray, values: np.ndarray, level: float = 0.0) -> np.ndarray:
    """Per-tet volume of ``{u <= level}`` under linear interpolation."""
    out = np.empty(points.shape[0])
    _inside_volumes(np.ascontiguousarray(points, dtype=float),
                    np.ascontiguousarray(values - level, dtype=float), out)
    return out


@njit(cache=True)
def _indexed_volumes(coords, ids, vals, level, out):
    P = np.empty((4, 3))
    u = np.empty(4)
    for h in range(ids.shape[0]):
        for k in range(4):
            u[k] = vals[ids[h, k]] - level
        if u[0] > 0.0 and u[1] > 0.0 and u[2] > 0.0 and u[3] > 0.0:
            out[h] = 0.0
            continue
        for k in range(4):
            i = ids[h, k]
            P[k, 0] = coords[i, 0]
            P[k, 1] = coords[i, 1]
            P[k, 2] = coords[i, 2]
        out[h] = _inside_volume(P, u)


class TetGeometry:
    """Cached tet connectivity of a mesh for repeated volume evaluations."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        n, nv = mesh.n_cells, mesh.n_vertices
        a = mesh.ht_tri
        self.coords = np.ascontiguousarray(
            np.concatenate([mesh.cell_centers, mesh.vertices, mesh.face_centers]))
        self.ids = np.stack([n + mesh.tri_v0[a], n + mesh.tri_v1[a], n + nv + mesh.tri_face[a],
                             mesh.ht_cell], axis=1).astype(np.int32)

    def point_values(self, u, vertex_values, face_values) -> np.ndarray:
        return np.concatenate([u, vertex_values, face_values])

    def tet_volumes(self, u, vertex_values, face_values, level: float = 0.0) -> np.ndarray:
        out = np.empty(self.ids.shape[0])
        _indexed_volumes(self.coords, self.ids,
                         self.point_values(u, vertex_values, face_values), float(level), out)
        return out

    def volume(self, u, vertex_values, face_values, level: float = 0.0) -> float:
        return float(np.sum(self.tet_volumes(u, vertex_values, face_values, level)))

    def isosurface(self, u, vertex_values, face_values, level: float = 0.0) -> np.ndarray:
        vals = self.point_values(u, vertex_values, face_values)[self.ids]
        lo, hi = vals.min(axis=1), vals.max(axis=1)
        sel = np.flatnonzero((lo <= level) & (hi > level))
        return isosurface(self.coords[self.ids[sel]], vals[sel], level)


def enclosed_volume(mesh: Mesh, u: np.ndarray, vertex_values: np.ndarray,
                    face_values: np.ndarray, level: float = 0.0,
                    tets: TetGeometry | None = None) -> float:
    tets = tets or TetGeometry(mesh)
    return tets.volume(u, vertex_values, face_values, level)


def isosurface(points: np.ndarray, values: np.ndarray, level: float = 0.0) -> np.ndarray:
    """Triangle soup ``(M,3,3)`` of ``{u = level}`` over the given tets."""
    u = values - level
    inside = u <= 0.0
    k = inside.sum(axis=1)
    tris = []
    # one vertex separated from the other three
    for count in (1, 3):
        sel = np.flatnonzero(k == count)
        if sel.size == 0:
            continue
        flag = inside[sel] if count == 1 else ~inside[sel]
        order = np.argsort(~flag, axis=1, kind="stable")
        P = np.take_along_axis(points[sel], order[..., None], axis=1)
        U = np.take_along_axis(u[sel], order, axis=1)
        edges = [_lerp_np(P[:, 0], P[:, j], U[:, 0], U[:, j]) for j in (1, 2, 3)]
        tris.append(np.stack(edges, axis=1))
    sel = np.flatnonzero(k == 2)
    if sel.size:
        order = np.argsort(~inside[sel], axis=1, kind="stable")
        P = np.take_along_axis(points[sel], order[..., None], axis=1)
        U = np.take_along_axis(u[sel], order, axis=1)
        pP = _lerp_np(P[:, 0], P[:, 2], U[:, 0], U[:, 2])
        pQ = _lerp_np(P[:, 0], P[:, 3], U[:, 0], U[:, 3])
        pR = _lerp_np(P[:, 1], P[:, 2], U[:, 1], U[:, 2])
        pS = _lerp_np(P[:, 1], P[:, 3], U[:, 1], U[:, 3])
        tris.append(np.stack([pP, pR, pS], axis=1))
        tris.append(np.stack([pP, pS, pQ], axis=1))
    if not tris:
        return np.zeros((0, 3, 3))
    return np.concatenate(tris)


def _lerp_np(pa, pb, ua, ub):
    t = ua / (ua - ub)
    return pa + t[:, None] * (pb - pa)


# -- error metrics -----------------------------------------------------------

@dataclass
class ErrorReport:
    E1z: float
    Einfz: float
    Ev: float
    E1: float
    E1g: float
    steps: int
    trace: dict[str, list[float]] = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict[str, float]:
        return {"E1z": self.E1z, "Einfz": self.Einfz, "Ev": self.Ev, "E1": self.E1,
                "E1g": self.E1g}


class ErrorAccumulator:
    """Step observer accumulating the time-integrated error sums.

    Each step contributes with weight ``dt_n / T``; the zero band is
    recomputed from the exact solution at every step and the band average is
    normalized per step.
    """

    def __init__(self, mesh: Mesh, exact: Callable[[np.ndarray, float], np.ndarray], T: float,
                 volume: bool = True, trace: bool = True):
        self.mesh = mesh
        self.exact = exact
        self.T = float(T)
        self.vol = mesh.cell_volumes
        self.total = float(self.vol.sum())
        self.G, _, _ = gradient_operators(mesh, StencilKind.LOCAL)
        self.tets = TetGeometry(mesh) if volume else None
        self.keep_trace = trace
        self.t_prev = 0.0
        self.n = 0
        self.s_E1z = self.s_E1 = self.s_E1g = self.s_Ev = 0.0
        self.Einfz = 0.0
        self.empty_band_steps = 0
        self.trace: dict[str, list[float]] = {k: [] for k in
                                              ("t", "E1z", "Einfz", "E1", "E1g", "V", "Ve")}

    def __call__(self, n: int, t: float, u: np.ndarray, cache: ReconstructionCache | None = None):
        m = self.mesh
        w = (t - self.t_prev) / self.T
        self.t_prev = t
        self.n += 1
        err = np.abs(u - self.exact(m.cell_centers, t))
        ue_v = self.exact(m.vertices, t)
        band = zero_band(m, ue_v, allow_empty=True)
        if band.size:
            e1z = float(err[band] @ self.vol[band] / self.vol[band].sum())
            einf = float(err[band].max())
        else:
            self.empty_band_steps += 1
            e1z = einf = math.nan
        e1 = float(err @ self.vol / self.total)
        g = (self.G @ u).reshape(-1, 3)
        e1g = float(np.abs(np.linalg.norm(g, axis=1) - 1.0) @ self.vol / self.total)
        if band.size:
            self.s_E1z += w * e1z
            self.Einfz = max(self.Einfz, einf)
        self.s_E1 += w * e1
        self.s_E1g += w * e1g
        V = Ve = math.nan
        if self.tets is not None:
            if cache is None:
                raise ValueError("volume error needs the reconstruction cache")
            V = self.tets.volume(u, cache.vertex_values, cache.face_values)
            Ve = self.tets.volume(self.exact(m.cell_centers, t), ue_v,
                                  self.exact(m.face_centers, t))
            self.s_Ev += abs(V - Ve)
        if self.keep_trace:
            for k, v in zip(("t", "E1z", "Einfz", "E1", "E1g", "V", "Ve"),
                            (t, e1z, einf, e1, e1g, V, Ve)):
                self.trace[k].append(v)

    def report(self, strict: bool = True) -> ErrorReport:
        """Final errors; with ``strict`` an empty band at any step is an error."""
        if self.n == 0:
            raise ValueError("no steps recorded")
        if self.empty_band_steps and strict:
            raise EmptyBand(f"zero band empty at {self.empty_band_steps} of {self.n} steps")
        E1z = self.s_E1z if not self.empty_band_steps or not strict else math.nan
        Ev = self.s_Ev / self.n if self.tets is not None else math.nan
        return ErrorReport(E1z, self.Einfz, Ev, self.s_E1, self.s_E1g, self.n,
                           dict(self.trace) if self.keep_trace else {})


class ReversibilityAccumulator:
    """Errors against the discrete initial field for runs returning to it."""

    def __init__(self, mesh: Mesh, u0: np.ndarray, cache0: ReconstructionCache):
        self.mesh = mesh
        self.u0 = np.asarray(u0, dtype=float).copy()
        self.tets = TetGeometry(mesh)
        self.V0 = self.tets.volume(u0, cache0.vertex_values, cache0.face_values)
        self.dV: list[float] = []
        self.u_last = None

    def __call__(self, n, t, u, cache):
        self.dV.append(abs(self.tets.volume(u, cache.vertex_values, cache.face_values) - self.V0))
        self.u_last = u

    def report(self) -> dict[str, float]:
        vol = self.mesh.cell_volumes
        e = np.abs(self.u_last - self.u0)
        return {"e1": float(e @ vol / vol.sum()), "einf": float(e.max()),
                "ev": float(np.mean(self.dV))}


def eoc(errors, h) -> list[float]:
    """``log(E_{M+1}/E_M) / log(h_{M+1}/h_M)``; NaN where undefined."""
    errors = [float(e) for e in errors]
    h = [float(x) for x in h]
    if len(errors) != len(h):
        raise ValueError("errors and h must have equal length")
    if len(errors) < 2:
        raise ValueError("need at least two levels")
    out = []
    for e0, e1, h0, h1 in zip(errors, errors[1:], h, h[1:]):
        if not (e0 > 0 and e1 > 0 and h0 > 0 and h1 > 0) or h0 == h1:
            out.append(math.nan)
        else:
            out.append(math.log(e1 / e0) / math.log(h1 / h0))
    return out


def cfl_stats(mesh: Mesh, velocity: VelocityField, dt: float, t: float = 0.0,
              grads: np.ndarray | None = None, delta: float = DELTA) -> tuple[float, float, float]:
    """Min, mean, and max of ``|v(x_p)| dt / h_p`` over cells."""
    if velocity.needs_gradient and grads is None:
        raise ValueError("velocity has a normal component; pass cell gradients")
    v = velocity(mesh.cell_centers, t, grads if velocity.needs_gradient else None, delta)
    c = np.linalg.norm(v, axis=1) * dt / cell_h(mesh)
    return float(c.min()), float(c.mean()), float(c.max())


def mesh_lengths(mesh: Mesh) -> dict[str, float]:
    h_min, h_ave, h_max = characteristic_lengths(mesh)
    return {"h_min": h_min, "h_ave": h_ave, "h_max": h_max}
