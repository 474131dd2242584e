"""Fluxes, sign sets, and row assembly for the coupled transport/eikonal scheme.

Internal cells always carry the inflow-implicit/outflow-explicit transport
row.  Boundary cells carry either the same transport row closed by a
boundary treatment (Dirichlet, zero Neumann, linear extension) or the
semi-implicitly linearized eikonal row, which drops every inflow boundary
triangle.

Row layout of the transport equation for cell ``p`` at iterate ``k``::

    |O_p|/dt (u_p - u_p^{n-1})
      + sum_{inflow f} (u_q + Du_q^{k-1}.(x_f - x_q) - u_p) mu_pf
      + sum_{outflow a} (Du_p^{n-1}.(x_a - x_p)) mu_pa = 0

and of the eikonal equation on a boundary cell::

    sum_{inflow f} (u_q + Du_q^{k-1}.(x_f - x_q) - u_p) nu_pf
      + sum_{outflow a, internal or boundary} (Du_p^{k-1}.(x_a - x_p)) nu_pa = |O_p|

Fluxes and sign sets are frozen at the start of the step.  The assembled
matrix is therefore fixed during the deferred-correction loop; only the
right-hand side depends on the iterate, through ``u`` and the representative
gradients ``Du``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .mesh import Mesh
from .scenarios import DELTA, VelocityField

__all__ = [
    "BoundaryMode",
    "FluxSet",
    "LinearRow",
    "StepSystem",
    "mu_flux",
    "nu_flux",
    "triangle_mu",
    "triangle_nu",
    "classify_signs",
    "soner_mask",
    "sign_sets",
    "assemble_internal_row",
    "assemble_eikonal_row",
    "assemble_dirichlet_row",
    "assemble_znbc_row",
    "assemble_lebc_row",
    "assemble_step",
    "ROW_TRANSPORT",
    "ROW_EIKONAL",
    "ROW_DEGENERATE",
]

ROW_TRANSPORT = 0
ROW_EIKONAL = 1
ROW_DEGENERATE = 2


class BoundaryMode(enum.Enum):
    EIKONAL = "eikonal"
    DIRICHLET = "dirichlet"
    ZNBC = "znbc"
    LEBC = "lebc"

    @classmethod
    def parse(cls, name: str) -> "BoundaryMode":
        aliases = {"ekbc": "eikonal", "dbc": "dirichlet", "zero-neumann": "znbc",
                   "linear": "lebc"}
        key = aliases.get(name.lower(), name.lower())
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown boundary mode {name!r}; valid: "
                             + ", ".join(m.value for m in cls)) from None


# -- fluxes ------------------------------------------------------------------

def mu_flux(velocity: VelocityField, x_a, normal, area: float, grad=None, t: float = 0.0,
            delta: float = DELTA) -> float:
    """``v(x_a, t, grad) . n |e|`` for one triangle."""
    v = velocity(np.atleast_2d(np.asarray(x_a, dtype=float)), t,
                 None if grad is None else np.atleast_2d(np.asarray(grad, dtype=float)), delta)[0]
    return float(v @ np.asarray(normal, dtype=float) * area)


def nu_flux(grad, normal, area: float, delta: float = DELTA) -> float:
    """``grad / |grad|_delta . n |e|``."""
    g = np.asarray(grad, dtype=float)
    return float(g @ np.asarray(normal, dtype=float) / np.sqrt(g @ g + delta * delta) * area)


def triangle_mu(mesh: Mesh, velocity: VelocityField, tri_grads: np.ndarray, t: float,
                delta: float = DELTA) -> np.ndarray:
    """Owner-oriented ``mu`` for every triangle."""
    grads = tri_grads if velocity.needs_gradient else None
    v = velocity(mesh.tri_centers, t, grads, delta)
    return np.einsum("ij,ij->i", v, mesh.tri_normals) * mesh.tri_areas


def triangle_nu(mesh: Mesh, tri_grads: np.ndarray, delta: float = DELTA) -> np.ndarray:
    """Owner-oriented ``nu`` for every triangle."""
    g = tri_grads
    w = g / np.sqrt(np.einsum("ij,ij->i", g, g) + delta * delta)[:, None]
    return np.einsum("ij,ij->i", w, mesh.tri_normals) * mesh.tri_areas


@dataclass(frozen=True)
class FluxSet:
    """Fluxes frozen at ``time``, stored per triangle (owner-oriented).

    Half-triangle values are ``sign * value``; minus sets use strict
    negativity, zero fluxes land in the plus sets.
    """

    time: float
    mu: np.ndarray
    nu: np.ndarray | None
    mu_half: np.ndarray = field(repr=False)
    nu_half: np.ndarray | None = field(repr=False)
    mu_minus: np.ndarray = field(repr=False)  # bool per half-triangle
    nu_minus: np.ndarray | None = field(repr=False)


def classify_signs(mesh: Mesh, mu: np.ndarray, nu: np.ndarray | None = None,
                   time: float = 0.0) -> FluxSet:
    mu_half = mesh.ht_sign * mu[mesh.ht_tri]
    nu_half = None if nu is None else mesh.ht_sign * nu[mesh.ht_tri]
    return FluxSet(time, mu, nu, mu_half, nu_half, mu_half < 0.0,
                   None if nu_half is None else nu_half < 0.0)


def sign_sets(mesh: Mesh, flux: FluxSet, p: int) -> dict[str, np.ndarray]:
    """Triangle ids of ``F^{mu-}, F^{mu+}, B^{mu-}, B^{mu+}`` (and the nu sets) of cell ``p``."""
    s = mesh.cell_half_triangles(p)
    tris = mesh.ht_tri[s]
    internal = mesh.ht_other[s] >= 0
    out = {}
    arrays = [("mu", flux.mu_minus)] + ([("nu", flux.nu_minus)] if flux.nu_minus is not None else [])
    for name, minus in arrays:
        m = minus[s]
        out[f"F_{name}-"] = tris[internal & m]
        out[f"F_{name}+"] = tris[internal & ~m]
        out[f"B_{name}-"] = tris[~internal & m]
        out[f"B_{name}+"] = tris[~internal & ~m]
    return out


def soner_mask(mesh: Mesh, nu: np.ndarray) -> np.ndarray:
    """Triangles kept in the Soner-filtered gradient average.

    Boundary triangles have the boundary cell as owner, so ``nu < 0`` there
    is exactly the inflow boundary set.
    """
    return (mesh.tri_neighbor >= 0) | (nu >= 0.0)


# -- reference per-cell assembly ---------------------------------------------

@dataclass
class LinearRow:
    cell: int
    diagonal: float
    off: dict[int, float]
    rhs: float
    kind: int = ROW_TRANSPORT

    def residual(self, u: np.ndarray) -> float:
        return self.diagonal * u[self.cell] + sum(c * u[q] for q, c in self.off.items()) - self.rhs


def _half(mesh: Mesh, p: int):
    s = mesh.cell_half_triangles(p)
    return list(zip(mesh.ht_tri[s], mesh.ht_other[s], range(s.start, s.stop)))


def _transport_core(mesh, p, flux, Du_prev, Du_iter, u_prev, dt):
    vol = mesh.cell_volumes[p]
    xp = mesh.cell_centers[p]
    diag = vol / dt
    rhs = vol / dt * u_prev[p]
    off: dict[int, float] = {}
    bdr_in = []
    for a, q, h in _half(mesh, p):
        mu = flux.mu_half[h]
        xa = mesh.tri_centers[a]
        if mu < 0.0:
            if q >= 0:
                diag -= mu
                off[int(q)] = off.get(int(q), 0.0) + mu
                rhs -= mu * (Du_iter[q] @ (xa - mesh.cell_centers[q]))
            else:
                bdr_in.append((a, mu))
        else:
            rhs -= mu * (Du_prev[p] @ (xa - xp))
    return diag, off, rhs, bdr_in


def assemble_internal_row(mesh: Mesh, p: int, flux: FluxSet, Du_prev: np.ndarray,
                          Du_iter: np.ndarray, u_prev: np.ndarray, dt: float) -> LinearRow:
    diag, off, rhs, bdr_in = _transport_core(mesh, p, flux, Du_prev, Du_iter, u_prev, dt)
    if bdr_in:
        raise ValueError(f"cell {p} has inflow boundary triangles; use a boundary row")
    return LinearRow(p, diag, off, rhs)


def assemble_dirichlet_row(mesh: Mesh, p: int, flux: FluxSet, Du_prev, Du_iter, u_prev,
                           dt: float, u_boundary) -> LinearRow:
    """``u_boundary(a)`` returns the prescribed value at triangle ``a`` at ``t^n``."""
    diag, off, rhs, bdr_in = _transport_core(mesh, p, flux, Du_prev, Du_iter, u_prev, dt)
    for a, mu in bdr_in:
        diag -= mu
        rhs -= mu * u_boundary(a)
    return LinearRow(p, diag, off, rhs)


def assemble_znbc_row(mesh: Mesh, p: int, flux: FluxSet, Du_prev, Du_iter, u_prev,
                      dt: float) -> LinearRow:
    diag, off, rhs, _ = _transport_core(mesh, p, flux, Du_prev, Du_iter, u_prev, dt)
    return LinearRow(p, diag, off, rhs)


def assemble_lebc_row(mesh: Mesh, p: int, flux: FluxSet, Du_prev, Du_iter, u_prev,
                      dt: float, u_iter: np.ndarray) -> LinearRow:
    diag, off, rhs, bdr_in = _transport_core(mesh, p, flux, Du_prev, Du_iter, u_prev, dt)
    xp = mesh.cell_centers[p]
    for a, mu in bdr_in:
        ub = u_iter[p] + Du_iter[p] @ (mesh.tri_centers[a] - xp)
        diag -= mu
        rhs -= mu * ub
    return LinearRow(p, diag, off, rhs)


def assemble_eikonal_row(mesh: Mesh, p: int, flux: FluxSet, Du_iter: np.ndarray,
                         u_iter: np.ndarray | None = None) -> LinearRow:
    """Eikonal row of boundary cell ``p``; inflow boundary triangles are skipped.

    Without implicit inflow neighbors the row degenerates to
    ``u_p = u_p^{k-1}`` (needs ``u_iter``).
    """
    xp = mesh.cell_centers[p]
    diag = 0.0
    rhs = float(mesh.cell_volumes[p])
    off: dict[int, float] = {}
    for a, q, h in _half(mesh, p):
        nu = flux.nu_half[h]
        xa = mesh.tri_centers[a]
        if nu < 0.0:
            if q < 0:
                continue
            diag -= nu
            off[int(q)] = off.get(int(q), 0.0) + nu
            rhs -= nu * (Du_iter[q] @ (xa - mesh.cell_centers[q]))
        else:
            rhs -= nu * (Du_iter[p] @ (xa - xp))
    if not off:
        if u_iter is None:
            raise ValueError(f"eikonal row of cell {p} is degenerate and needs u_iter")
        return LinearRow(p, 1.0, {}, float(u_iter[p]), ROW_DEGENERATE)
    return LinearRow(p, diag, off, rhs, ROW_EIKONAL)


# -- vectorized assembly -----------------------------------------------------

@dataclass
class StepSystem:
    """``A u = b0 + U u^{k-1} + C Du^{k-1}`` for one time step."""

    A: sp.csr_matrix
    b0: np.ndarray
    U: sp.csr_matrix
    C: sp.csr_matrix
    row_kind: np.ndarray

    def rhs(self, u: np.ndarray, Du: np.ndarray) -> np.ndarray:
        return self.b0 + self.U @ u + self.C @ Du.ravel()

    def residual(self, u: np.ndarray, Du: np.ndarray) -> np.ndarray:
        return self.A @ u - self.rhs(u, Du)

    @property
    def n_degenerate(self) -> int:
        return int(np.count_nonzero(self.row_kind == ROW_DEGENERATE))

    def row(self, p: int) -> tuple[float, dict[int, float]]:
        s = slice(self.A.indptr[p], self.A.indptr[p + 1])
        cols, vals = self.A.indices[s], self.A.data[s]
        diag = float(vals[cols == p].sum())
        return diag, {int(c): float(v) for c, v in zip(cols, vals) if c != p}


class SchemeGeometry:
    """Per-half-triangle offsets reused by every assembly on a mesh."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        xa = mesh.tri_centers[mesh.ht_tri]
        self.d_own = xa - mesh.cell_centers[mesh.ht_cell]
        other = np.where(mesh.ht_other >= 0, mesh.ht_other, mesh.ht_cell)
        self.d_other = xa - mesh.cell_centers[other]
        self.internal = mesh.ht_other >= 0
        self.bpos = np.full(mesh.n_triangles, -1, dtype=np.int64)
        self.bpos[mesh.boundary_triangles] = np.arange(mesh.boundary_triangles.size)


def _grad_entries(rows, cols, coef, d):
    """Sparse triplets for ``-coef * d . Du[cols]`` added to ``rows``."""
    comp = np.arange(3)
    r = np.repeat(rows, 3)
    c = (3 * cols[:, None] + comp).ravel()
    v = (-coef[:, None] * d).ravel()
    return r, c, v


def assemble_step(geom: SchemeGeometry, mode: BoundaryMode, flux: FluxSet, Du_prev: np.ndarray,
                  u_prev: np.ndarray, dt: float,
                  boundary_values: np.ndarray | None = None) -> StepSystem:
    """Assemble the frozen matrix and right-hand side operators for one step.

    ``boundary_values`` (Dirichlet mode) are aligned with
    ``mesh.boundary_triangles`` and taken at ``t^n``.
    """
    mesh = geom.mesh
    mode = BoundaryMode(mode)
    n = mesh.n_cells
    hc, ho = mesh.ht_cell, mesh.ht_other
    internal = geom.internal
    vol = mesh.cell_volumes
    eik_cell = mesh.is_boundary_cell if mode is BoundaryMode.EIKONAL else np.zeros(n, dtype=bool)
    row_kind = np.where(eik_cell, ROW_EIKONAL, ROW_TRANSPORT).astype(np.int8)
    tr_h = ~eik_cell[hc]

    diag = np.where(eik_cell, 0.0, vol / dt)
    b0 = np.where(eik_cell, vol, vol / dt * u_prev)
    A_r, A_c, A_v = [], [], []
    C_r, C_c, C_v = [], [], []
    U_r, U_c, U_v = [], [], []

    # transport rows
    mu = flux.mu_half
    tin = tr_h & flux.mu_minus
    tin_int = np.flatnonzero(tin & internal)
    tin_bdr = np.flatnonzero(tin & ~internal)
    tout = np.flatnonzero(tr_h & ~flux.mu_minus)
    diag -= np.bincount(hc[tin_int], weights=mu[tin_int], minlength=n)
    A_r.append(hc[tin_int]); A_c.append(ho[tin_int]); A_v.append(mu[tin_int])
    r, c, v = _grad_entries(hc[tin_int], ho[tin_int], mu[tin_int], geom.d_other[tin_int])
    C_r.append(r); C_c.append(c); C_v.append(v)
    b0 -= np.bincount(hc[tout], weights=mu[tout] * np.einsum(
        "ij,ij->i", Du_prev[hc[tout]], geom.d_own[tout]), minlength=n)
    if mode is BoundaryMode.DIRICHLET:
        if boundary_values is None:
            raise ValueError("Dirichlet mode needs boundary values")
        ub = boundary_values[geom.bpos[mesh.ht_tri[tin_bdr]]]
        diag -= np.bincount(hc[tin_bdr], weights=mu[tin_bdr], minlength=n)
        b0 -= np.bincount(hc[tin_bdr], weights=mu[tin_bdr] * ub, minlength=n)
    elif mode is BoundaryMode.LEBC:
        diag -= np.bincount(hc[tin_bdr], weights=mu[tin_bdr], minlength=n)
        U_r.append(hc[tin_bdr]); U_c.append(hc[tin_bdr]); U_v.append(-mu[tin_bdr])
        r, c, v = _grad_entries(hc[tin_bdr], hc[tin_bdr], mu[tin_bdr], geom.d_own[tin_bdr])
        C_r.append(r); C_c.append(c); C_v.append(v)
    # ZNBC: (u_p - u_p) mu_pb vanishes; eikonal rows never see boundary inflow

    if mode is BoundaryMode.EIKONAL:
        nu = flux.nu_half
        eh = eik_cell[hc]
        ein = np.flatnonzero(eh & flux.nu_minus & internal)
        eout = np.flatnonzero(eh & ~flux.nu_minus)
        has_in = np.bincount(hc[ein], minlength=n) > 0
        degenerate = eik_cell & ~has_in
        ein = ein[~degenerate[hc[ein]]]
        eout = eout[~degenerate[hc[eout]]]
        diag -= np.bincount(hc[ein], weights=nu[ein], minlength=n)
        A_r.append(hc[ein]); A_c.append(ho[ein]); A_v.append(nu[ein])
        r, c, v = _grad_entries(hc[ein], ho[ein], nu[ein], geom.d_other[ein])
        C_r.append(r); C_c.append(c); C_v.append(v)
        r, c, v = _grad_entries(hc[eout], hc[eout], nu[eout], geom.d_own[eout])
        C_r.append(r); C_c.append(c); C_v.append(v)
        deg = np.flatnonzero(degenerate)
        diag[deg] = 1.0
        b0[deg] = 0.0
        U_r.append(deg); U_c.append(deg); U_v.append(np.ones(deg.size))
        row_kind[deg] = ROW_DEGENERATE

    ar = np.arange(n)
    A = sp.csr_matrix((np.concatenate(A_v + [diag]), (np.concatenate(A_r + [ar]),
                       np.concatenate(A_c + [ar]))), shape=(n, n))
    A.sum_duplicates()
    C = sp.csr_matrix((np.concatenate(C_v), (np.concatenate(C_r), np.concatenate(C_c))),
                      shape=(n, 3 * n))
    C.sum_duplicates()
    if U_r:
        U = sp.csr_matrix((np.concatenate(U_v), (np.concatenate(U_r), np.concatenate(U_c))),
                          shape=(n, n))
    else:
        U = sp.csr_matrix((n, n))
    return StepSystem(A, b0, U, C, row_kind)
