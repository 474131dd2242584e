"""Cell-centered reconstruction on polyhedral meshes.

The pipeline runs in a fixed order for a cell field ``u``:

1. weighted least-squares cell gradients (``L_p`` or Dirichlet-augmented
   ``D_p`` stencils, weight ``1/|x - x_p|``);
2. vertex values by inverse-distance averaging of linear extrapolations;
3. face-center values from an affine fit over the face vertices and the
   adjacent cell centers (diamond-cell fit);
4. triangle gradients from an affine fit over ``{v_j, v_{j+1}, x_g, x_p[, x_q]}``
   with the slope constrained to the closed unit ball;
5. representative cell gradients, the inverse-distance average of the
   triangle gradients of a cell, optionally skipping masked triangles.

Every stage except the unit-ball projection is linear in ``u``, so the
geometric part of each fit is factored once per mesh into sparse operators
(:class:`Reconstructor`).  The module-level functions are direct per-item
implementations of the same formulas; the tests use them to cross-check the
vectorized operators.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
from numba import njit
from scipy.optimize import brentq

from .mesh import Mesh

__all__ = [
    "StencilKind",
    "GradientMode",
    "RankDeficient",
    "DegenerateStencil",
    "ReconstructionCache",
    "Reconstructor",
    "project_unit_ball",
    "gradient_operators",
    "ls_cell_gradient",
    "vertex_value",
    "face_value",
    "triangle_gradient",
    "representative_cell_gradient",
]

EXACT_HIT = 1e-14
RANK_TOL = 1e-12


class StencilKind(enum.Enum):
    """Point set for the least-squares cell gradient."""

    DIRICHLET = "D"  # neighbors plus boundary-triangle centers with given values
    LOCAL = "L"  # neighbors only


class GradientMode(enum.Enum):
    ALL_FACES = "all"
    SONER = "soner"  # drop boundary triangles with inflow nu flux


class RankDeficient(np.linalg.LinAlgError):
    pass


class DegenerateStencil(ValueError):
    pass


@dataclass(frozen=True)
class ReconstructionCache:
    """All reconstructed quantities for one cell field."""

    u: np.ndarray
    time: float
    cell_gradients: np.ndarray  # (N, 3)
    vertex_values: np.ndarray  # (V,)
    face_values: np.ndarray  # (F,)
    triangle_gradients: np.ndarray  # (T, 3)
    representative_gradients: np.ndarray  # (N, 3)
    triangle_mask: np.ndarray | None = None  # triangles used in the average


def _inv_distance(d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dist = np.sqrt(np.einsum("ij,ij->i", d, d))
    return dist, 1.0 / np.maximum(dist, EXACT_HIT)


def _sym_from_pairs(rows: np.ndarray, n: int, w2: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Batched ``sum_k w2_k x_k x_k^T`` grouped by ``rows``."""
    k = x.shape[1]
    out = np.empty((n, k, k))
    for a in range(k):
        for b in range(a, k):
            out[:, a, b] = np.bincount(rows, weights=w2 * x[:, a] * x[:, b], minlength=n)
            out[:, b, a] = out[:, a, b]
    return out


def _deficient(eig: np.ndarray) -> np.ndarray:
    return eig[:, 0] <= RANK_TOL * np.maximum(eig[:, -1], 1e-300)


def project_unit_ball(beta0: np.ndarray, eigval: np.ndarray, eigvec: np.ndarray,
                      max_iter: int = 60) -> np.ndarray:
    """Minimize ``(b - beta0)^T H (b - beta0)`` over ``|b| <= 1`` for each row.

    ``H = eigvec @ diag(eigval) @ eigvec.T`` must be positive definite.  Rows
    with ``|beta0| <= 1`` are returned unchanged; the others are solved on the
    sphere with the Newton iteration of More and Sorensen on the secular
    equation ``1 - 1/|b(s)| = 0``, ``(H + s I) b(s) = H beta0``, which
    approaches the root monotonically from ``s = 0``.
    """
    beta0 = np.asarray(beta0, dtype=float)
    out = beta0.copy()
    norm = np.linalg.norm(beta0, axis=1)
    sat = np.flatnonzero(norm > 1.0)
    if sat.size == 0:
        return out
    Q = eigvec[sat]
    lam = eigval[sat]
    c = np.einsum("tij,ti->tj", Q, beta0[sat])
    lc = lam * c
    s = np.zeros(sat.size)
    active = np.arange(sat.size)
    for _ in range(max_iter):
        den = lam[active] + s[active, None]
        r = lc[active] / den
        p2 = np.einsum("ij,ij->i", r, r)
        pn = np.sqrt(p2)
        q2 = np.einsum("ij,ij->i", r * r, 1.0 / den)
        step = (p2 / q2) * (pn - 1.0)
        s[active] += step
        done = (pn - 1.0) <= 4e-16
        active = active[~done]
        if active.size == 0:
            break
    r = lc / (lam + s[:, None])
    b = np.einsum("tij,tj->ti", Q, r)
    out[sat] = b / np.linalg.norm(b, axis=1)[:, None]
    return out


def gradient_operators(mesh: Mesh, stencil: StencilKind = StencilKind.LOCAL):
    """Sparse least-squares gradient operators ``(G_cells, G_bdr, deficient)``.

    ``G_cells @ u + G_bdr @ u_b`` gives the stacked ``(3N,)`` cell gradients;
    ``G_bdr`` is ``None`` for the local stencil.  Rank-deficient cells use the
    pseudo-inverse of their normal matrix and are listed in ``deficient``.
    """
    m = mesh
    stencil = StencilKind(stencil)
    bdr_tris = m.boundary_triangles
    n = m.n_cells
    counts = np.diff(m.nbr_ptr)
    rows = np.repeat(np.arange(n), counts)
    cols = m.nbr_idx
    d = m.cell_centers[cols] - m.cell_centers[rows]
    nb = bdr_tris.size
    if stencil is StencilKind.DIRICHLET:
        brow = m.tri_owner[bdr_tris]
        bd = m.tri_centers[bdr_tris] - m.cell_centers[brow]
        all_rows = np.concatenate([rows, brow])
        all_d = np.concatenate([d, bd])
    else:
        all_rows, all_d = rows, d
    dist, w = _inv_distance(all_d)
    w2 = np.where(dist < EXACT_HIT, 0.0, w * w)
    M = _sym_from_pairs(all_rows, n, w2, all_d)
    eig = np.linalg.eigvalsh(M)
    bad = _deficient(eig)
    Minv = np.empty_like(M)
    good = ~bad
    Minv[good] = np.linalg.inv(M[good])
    if bad.any():
        Minv[bad] = np.linalg.pinv(M[bad])
    coef = np.einsum("kij,kj->ki", Minv[all_rows], all_d) * w2[:, None]
    ncell = rows.size
    c_cell, c_bdr = coef[:ncell], coef[ncell:]
    comp = np.arange(3)
    r = (3 * rows[:, None] + comp).ravel()
    diag = np.zeros((n, 3))
    np.add.at(diag, all_rows, -coef)
    ri = np.concatenate([r, (3 * np.arange(n)[:, None] + comp).ravel()])
    ci = np.concatenate([np.repeat(cols, 3), np.repeat(np.arange(n), 3)])
    vi = np.concatenate([c_cell.ravel(), diag.ravel()])
    G_cells = sp.csr_matrix((vi, (ri, ci)), shape=(3 * n, n))
    G_bdr = None
    if stencil is StencilKind.DIRICHLET:
        rb = (3 * brow[:, None] + comp).ravel()
        cb = np.repeat(np.arange(nb), 3)
        G_bdr = sp.csr_matrix((c_bdr.ravel(), (rb, cb)), shape=(3 * n, nb))
    return G_cells, G_bdr, np.flatnonzero(bad)


@njit(cache=True, nogil=True)
def _fit_and_project(vals, idx, coef, eigval, eigvec, out):
    """Fused gather, unconstrained fit and unit-ball projection per triangle."""
    T, K = idx.shape
    r = np.empty(3)
    for t in range(T):
        b0 = 0.0
        b1 = 0.0
        b2 = 0.0
        for k in range(K):
            v = vals[idx[t, k]]
            b0 += v * coef[t, k, 0]
            b1 += v * coef[t, k, 1]
            b2 += v * coef[t, k, 2]
        if b0 * b0 + b1 * b1 + b2 * b2 <= 1.0:
            out[t, 0] = b0
            out[t, 1] = b1
            out[t, 2] = b2
            continue
        lc0 = 0.0
        lc1 = 0.0
        lc2 = 0.0
        for j in range(3):
            c = eigvec[t, 0, j] * b0 + eigvec[t, 1, j] * b1 + eigvec[t, 2, j] * b2
            if j == 0:
                lc0 = eigval[t, 0] * c
            elif j == 1:
                lc1 = eigval[t, 1] * c
            else:
                lc2 = eigval[t, 2] * c
        s = 0.0
        for _ in range(60):
            d0 = eigval[t, 0] + s
            d1 = eigval[t, 1] + s
            d2 = eigval[t, 2] + s
            r0 = lc0 / d0
            r1 = lc1 / d1
            r2 = lc2 / d2
            p2 = r0 * r0 + r1 * r1 + r2 * r2
            pn = np.sqrt(p2)
            if pn - 1.0 <= 4e-16:
                break
            q2 = r0 * r0 / d0 + r1 * r1 / d1 + r2 * r2 / d2
            s += (p2 / q2) * (pn - 1.0)
        r[0] = lc0 / (eigval[t, 0] + s)
        r[1] = lc1 / (eigval[t, 1] + s)
        r[2] = lc2 / (eigval[t, 2] + s)
        nrm = np.sqrt(r[0] * r[0] + r[1] * r[1] + r[2] * r[2])
        for i in range(3):
            out[t, i] = (eigvec[t, i, 0] * r[0] + eigvec[t, i, 1] * r[1]
                         + eigvec[t, i, 2] * r[2]) / nrm


class Reconstructor:
    """Sparse reconstruction operators for one mesh and stencil kind.

    Construction does all the geometry work; :meth:`build` then reduces to a
    handful of sparse products plus the unit-ball projection.
    """

    def __init__(self, mesh: Mesh, stencil: StencilKind = StencilKind.LOCAL):
        self.mesh = mesh
        self.stencil = StencilKind(stencil)
        self.bdr_tris = mesh.boundary_triangles
        self._build_gradient_ops()
        self._build_vertex_ops()
        self._build_face_op()
        self._build_triangle_op()
        self._build_average_op()

    # -- operator construction --------------------------------------------
    def _build_gradient_ops(self):
        self.G_cells, self.G_bdr, self.gradient_deficient = gradient_operators(
            self.mesh, self.stencil)

    def _build_vertex_ops(self):
        m = self.mesh
        nv, n = m.n_vertices, m.n_cells
        counts = np.diff(m.vcell_ptr)
        rows = np.repeat(np.arange(nv), counts)
        cols = m.vcell_idx
        d = m.vertices[rows] - m.cell_centers[cols]
        dist, w = _inv_distance(d)
        hit = dist < EXACT_HIT
        if hit.any():
            hit_v = np.zeros(nv, dtype=bool)
            hit_v[rows[hit]] = True
            w = np.where(hit_v[rows], hit.astype(float), w)
        wn = w / np.bincount(rows, weights=w, minlength=nv)[rows]
        self.V_u = sp.csr_matrix((wn, (rows, cols)), shape=(nv, n))
        comp = np.arange(3)
        self.V_g = sp.csr_matrix(
            ((wn[:, None] * d).ravel(), (np.repeat(rows, 3), (3 * cols[:, None] + comp).ravel())),
            shape=(nv, 3 * n))

    def _build_face_op(self):
        m = self.mesh
        n, nv, nf = m.n_cells, m.n_vertices, m.n_faces
        fcount = np.diff(m.face_ptr)
        frows = np.repeat(np.arange(nf), fcount)
        fcols = n + m.face_idx
        internal = np.flatnonzero(m.face_neighbor >= 0)
        rows = np.concatenate([frows, np.arange(nf), internal])
        cols = np.concatenate([fcols, m.face_owner, m.face_neighbor[internal]])
        pts = np.concatenate([m.vertices[m.face_idx], m.cell_centers[m.face_owner],
                              m.cell_centers[m.face_neighbor[internal]]])
        d = pts - m.face_centers[rows]
        dist, w = _inv_distance(d)
        scale = np.bincount(rows, weights=dist, minlength=nf) / np.bincount(rows, minlength=nf)
        X = np.concatenate([np.ones((rows.size, 1)), d / scale[rows, None]], axis=1)
        w2 = w * w
        M = _sym_from_pairs(rows, nf, w2, X)
        eig = np.linalg.eigvalsh(M)
        bad = _deficient(eig)
        first = np.zeros((nf, 4))
        e0 = np.zeros((int((~bad).sum()), 4))
        e0[:, 0] = 1.0
        first[~bad] = np.linalg.solve(M[~bad], e0[..., None])[..., 0]
        coef = w2 * np.einsum("ij,ij->i", first[rows], X)
        if bad.any():
            fb = bad[rows]
            wsum = np.bincount(rows, weights=w, minlength=nf)
            coef[fb] = (w / wsum[rows])[fb]
        hit = dist < EXACT_HIT
        if hit.any():
            hit_f = np.zeros(nf, dtype=bool)
            hit_f[rows[hit]] = True
            coef = np.where(hit_f[rows], hit.astype(float), coef)
        self.face_deficient = np.flatnonzero(bad)
        self.F_op = sp.csr_matrix((coef, (rows, cols)), shape=(nf, n + nv))

    def _build_triangle_op(self):
        m = self.mesh
        n, nv, T = m.n_cells, m.n_vertices, m.n_triangles
        nbr = m.tri_neighbor
        idx = np.empty((T, 5), dtype=np.int64)
        idx[:, 0] = n + m.tri_v0
        idx[:, 1] = n + m.tri_v1
        idx[:, 2] = n + nv + m.tri_face
        idx[:, 3] = m.tri_owner
        idx[:, 4] = np.where(nbr >= 0, nbr, m.tri_owner)
        present = np.ones((T, 5))
        present[:, 4] = nbr >= 0
        P = np.empty((T, 5, 3))
        P[:, 0] = m.vertices[m.tri_v0]
        P[:, 1] = m.vertices[m.tri_v1]
        P[:, 2] = m.face_centers[m.tri_face]
        P[:, 3] = m.cell_centers[m.tri_owner]
        P[:, 4] = m.cell_centers[idx[:, 4]]
        P -= m.tri_centers[:, None, :]
        w2 = present / np.maximum(np.einsum("tkc,tkc->tk", P, P), EXACT_HIT ** 2)
        dbar = np.einsum("tk,tkc->tc", w2, P) / w2.sum(axis=1)[:, None]
        P -= dbar[:, None, :]
        H = np.einsum("tk,tki,tkj->tij", w2, P, P)
        eigval, eigvec = np.linalg.eigh(H)
        del H
        bad = _deficient(eigval)
        eigval[bad] = 1.0
        # c_k = H^{-1} w2_k (d_k - dbar)
        tmp = np.einsum("tji,tkj->tki", eigvec, P) / eigval[:, None, :]
        coef = np.einsum("tij,tkj->tki", eigvec, tmp) * w2[..., None]
        del tmp, P
        coef[bad] = 0.0
        self.tri_idx = idx if n + nv + m.n_faces > 2**31 - 1 else idx.astype(np.int32)
        self.tri_coef = coef
        self.tri_eigval = eigval
        self.tri_eigvec = eigvec
        self.triangle_deficient = np.flatnonzero(bad)

    def _build_average_op(self):
        m = self.mesh
        d = m.tri_centers[m.ht_tri] - m.cell_centers[m.ht_cell]
        _, w = _inv_distance(d)
        self.A_avg = sp.csr_matrix((w, (m.ht_cell, m.ht_tri)),
                                   shape=(m.n_cells, m.n_triangles))

    # -- evaluation -------------------------------------------------------
    def cell_gradients(self, u: np.ndarray, boundary_values: np.ndarray | None = None) -> np.ndarray:
        g = self.G_cells @ u
        if self.G_bdr is not None:
            if boundary_values is None:
                raise ValueError("Dirichlet-augmented stencil needs boundary values")
            g += self.G_bdr @ boundary_values
        return g.reshape(-1, 3)

    def vertex_values(self, u: np.ndarray, grads: np.ndarray) -> np.ndarray:
        return self.V_u @ u + self.V_g @ grads.ravel()

    def face_values(self, u: np.ndarray, uv: np.ndarray) -> np.ndarray:
        return self.F_op @ np.concatenate([u, uv])

    def unconstrained_triangle_gradients(self, u, uv, ug) -> np.ndarray:
        vals = np.concatenate([u, uv, ug])[self.tri_idx]
        return np.einsum("tk,tkc->tc", vals, self.tri_coef)

    def triangle_gradients(self, u, uv, ug, grads, compiled: bool = True) -> np.ndarray:
        if compiled:
            beta = np.empty((self.mesh.n_triangles, 3))
            _fit_and_project(np.concatenate([u, uv, ug]), self.tri_idx, self.tri_coef,
                             self.tri_eigval, self.tri_eigvec, beta)
        else:
            beta0 = self.unconstrained_triangle_gradients(u, uv, ug)
            beta = project_unit_ball(beta0, self.tri_eigval, self.tri_eigvec)
        if self.triangle_deficient.size:
            g = grads[self.mesh.tri_owner[self.triangle_deficient]]
            beta[self.triangle_deficient] = g / np.maximum(1.0, np.linalg.norm(g, axis=1))[:, None]
        return beta

    def representative_gradients(self, tri_grads: np.ndarray,
                                 mask: np.ndarray | None = None) -> np.ndarray:
        """Average-based cell gradients; ``mask`` selects the triangles used."""
        if mask is None:
            num = self.A_avg @ tri_grads
            den = np.asarray(self.A_avg.sum(axis=1)).ravel()
        else:
            num = self.A_avg @ np.where(mask[:, None], tri_grads, 0.0)
            den = self.A_avg @ mask.astype(float)
        empty = np.flatnonzero(den <= 0.0)
        if empty.size:
            raise DegenerateStencil(f"cell {int(empty[0])} has no triangle left to average")
        return num / den[:, None]

    def build(self, u: np.ndarray, time: float = 0.0, boundary_values=None,
              mask: np.ndarray | None = None) -> ReconstructionCache:
        u = np.asarray(u, dtype=float)
        g = self.cell_gradients(u, boundary_values)
        uv = self.vertex_values(u, g)
        ug = self.face_values(u, uv)
        tg = self.triangle_gradients(u, uv, ug, g)
        rg = self.representative_gradients(tg, mask)
        return ReconstructionCache(u, time, g, uv, ug, tg, rg, mask)

    def remask(self, cache: ReconstructionCache, mask: np.ndarray | None) -> ReconstructionCache:
        """Same cache with representative gradients averaged over ``mask``."""
        return replace(cache, representative_gradients=self.representative_gradients(
            cache.triangle_gradients, mask), triangle_mask=mask)


# -- per-item reference implementations ----------------------------------

def ls_cell_gradient(mesh: Mesh, u: np.ndarray, p: int,
                     stencil: StencilKind = StencilKind.LOCAL,
                     boundary_values: np.ndarray | None = None) -> np.ndarray:
    """Weighted least-squares gradient at the center of cell ``p``.

    ``boundary_values`` is aligned with ``mesh.boundary_triangles`` and only
    used by the Dirichlet-augmented stencil.
    """
    xp = mesh.cell_centers[p]
    pts = [mesh.cell_centers[q] for q in mesh.neighbors(p)]
    vals = [u[q] for q in mesh.neighbors(p)]
    if StencilKind(stencil) is StencilKind.DIRICHLET:
        if boundary_values is None:
            raise ValueError("Dirichlet-augmented stencil needs boundary values")
        pos = {int(b): i for i, b in enumerate(mesh.boundary_triangles)}
        for b in mesh.cell_boundary_triangles(p):
            pts.append(mesh.tri_centers[b])
            vals.append(boundary_values[pos[int(b)]])
    if not pts:
        raise RankDeficient(f"cell {p} has an empty stencil")
    d = np.asarray(pts) - xp
    w = 1.0 / np.linalg.norm(d, axis=1)
    A = w[:, None] * d
    rhs = w * (np.asarray(vals) - u[p])
    M = A.T @ A
    ev = np.linalg.eigvalsh(M)
    if ev[0] <= RANK_TOL * ev[-1]:
        raise RankDeficient(f"least-squares stencil of cell {p} does not span 3D")
    return np.linalg.solve(M, A.T @ rhs)


def vertex_value(mesh: Mesh, u: np.ndarray, grads: np.ndarray, v: int) -> float:
    xv = mesh.vertices[v]
    cells = mesh.vertex_cells(v)
    ext = []
    wts = []
    for p in cells:
        d = xv - mesh.cell_centers[p]
        dist = np.linalg.norm(d)
        e = u[p] + grads[p] @ d
        if dist < EXACT_HIT:
            return float(e)
        ext.append(e)
        wts.append(1.0 / dist)
    wts = np.asarray(wts)
    return float(wts @ np.asarray(ext) / wts.sum())


def face_value(mesh: Mesh, u: np.ndarray, vertex_values: np.ndarray, f: int) -> float:
    """Diamond-cell affine fit evaluated at the face center."""
    xg = mesh.face_centers[f]
    vs = mesh.face_vertices(f)
    pts = [mesh.vertices[v] for v in vs] + [mesh.cell_centers[mesh.face_owner[f]]]
    vals = [vertex_values[v] for v in vs] + [u[mesh.face_owner[f]]]
    if mesh.face_neighbor[f] >= 0:
        pts.append(mesh.cell_centers[mesh.face_neighbor[f]])
        vals.append(u[mesh.face_neighbor[f]])
    d = np.asarray(pts) - xg
    vals = np.asarray(vals)
    dist = np.linalg.norm(d, axis=1)
    if np.any(dist < EXACT_HIT):
        return float(vals[np.argmin(dist)])
    w = 1.0 / dist
    X = np.column_stack([np.ones(len(pts)), d])
    A = w[:, None] * X
    M = A.T @ A
    ev = np.linalg.eigvalsh(M)
    if ev[0] <= RANK_TOL * ev[-1]:
        return float(w @ vals / w.sum())
    sol = np.linalg.lstsq(A, w * vals, rcond=None)[0]
    return float(sol[0])


def triangle_gradient(mesh: Mesh, u: np.ndarray, vertex_values: np.ndarray,
                      face_values: np.ndarray, a: int,
                      cell_gradients: np.ndarray | None = None) -> tuple[float, np.ndarray]:
    """``(alpha, beta)`` of the slope-constrained affine fit on triangle ``a``."""
    f = mesh.tri_face[a]
    p, q = mesh.tri_owner[a], mesh.tri_neighbor[a]
    pts = [mesh.vertices[mesh.tri_v0[a]], mesh.vertices[mesh.tri_v1[a]],
           mesh.face_centers[f], mesh.cell_centers[p]]
    vals = [vertex_values[mesh.tri_v0[a]], vertex_values[mesh.tri_v1[a]], face_values[f], u[p]]
    if q >= 0:
        pts.append(mesh.cell_centers[q])
        vals.append(u[q])
    d = np.asarray(pts) - mesh.tri_centers[a]
    vals = np.asarray(vals)
    w2 = 1.0 / np.einsum("ij,ij->i", d, d)
    dbar = w2 @ d / w2.sum()
    ubar = w2 @ vals / w2.sum()
    dc = d - dbar
    H = (w2[:, None] * dc).T @ dc
    ev = np.linalg.eigvalsh(H)
    if ev[0] <= RANK_TOL * ev[-1]:
        if cell_gradients is None:
            raise RankDeficient(f"triangle {a} fit is rank deficient")
        g = cell_gradients[p]
        beta = g / max(1.0, float(np.linalg.norm(g)))
    else:
        rhs = (w2[:, None] * dc).T @ (vals - ubar)
        beta = np.linalg.solve(H, rhs)
        if np.linalg.norm(beta) > 1.0:
            hb = H @ beta

            def excess(s):
                return np.linalg.norm(np.linalg.solve(H + s * np.eye(3), hb)) - 1.0

            hi = 1.0
            while excess(hi) > 0.0:
                hi *= 2.0
            s = brentq(excess, 0.0, hi, xtol=1e-15, rtol=1e-15, maxiter=500)
            beta = np.linalg.solve(H + s * np.eye(3), hb)
            beta /= np.linalg.norm(beta)
    alpha = float(ubar - beta @ dbar)
    return alpha, beta


def representative_cell_gradient(mesh: Mesh, tri_grads: np.ndarray, p: int,
                                 mode: GradientMode = GradientMode.ALL_FACES,
                                 nu: np.ndarray | None = None) -> np.ndarray:
    """Inverse-distance average of the triangle gradients of cell ``p``.

    In ``SONER`` mode boundary triangles with ``nu < 0`` are skipped; ``nu`` is
    the owner-oriented per-triangle flux.
    """
    tris = mesh.cell_triangles(p)
    if GradientMode(mode) is GradientMode.SONER:
        if nu is None:
            raise ValueError("Soner-filtered average needs nu fluxes")
        keep = (mesh.tri_neighbor[tris] >= 0) | (nu[tris] >= 0.0)
        tris = tris[keep]
    if tris.size == 0:
        raise DegenerateStencil(f"cell {p} has no triangle left to average")
    w = 1.0 / np.linalg.norm(mesh.tri_centers[tris] - mesh.cell_centers[p], axis=1)
    return w @ tri_grads[tris] / w.sum()
