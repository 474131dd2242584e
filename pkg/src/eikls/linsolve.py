"""Sparse linear solves, the deferred-correction loop, and the time loop."""

from __future__ import annotations

import logging
import math
import time as _time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numba import njit

from .mesh import Mesh
from .recon import Reconstructor, ReconstructionCache, StencilKind
from .scenarios import DELTA, VelocityField
from .scheme import (BoundaryMode, FluxSet, SchemeGeometry, StepSystem, assemble_step,
                     classify_signs, soner_mask, triangle_mu, triangle_nu)

__all__ = [
    "NoConvergence",
    "LinearSolver",
    "solve_linear",
    "relative_residual",
    "SolveReport",
    "TimeLoopConfig",
    "LevelSetSolver",
    "Trajectory",
    "StepFailure",
    "time_loop",
]

log = logging.getLogger(__name__)

DIRECT_LIMIT = 2_000


class NoConvergence(RuntimeError):
    def __init__(self, message: str, best: np.ndarray, residual: float):
        super().__init__(message)
        self.best = best
        self.residual = residual


def relative_residual(A, x, b) -> float:
    """``||A x - b||_inf / max(1, ||b||_inf)``."""
    r = A @ x - b
    return float(np.abs(r).max(initial=0.0) / max(1.0, float(np.abs(b).max(initial=0.0))))


DENSE_MAX = 256  # larger cyclic blocks: point sweeps inside BiCGStab are cheaper
DENSE_BUDGET = 30_000_000  # stored inverse entries


@njit(cache=True)
def _tarjan_components(indptr, indices, n):
    """Strongly connected components of ``row p depends on column q`` edges.

    Components are emitted dependencies-first: every component comes after
    all components its rows reference.  Returns ``(comp_ptr, nodes)``.
    """
    index = np.full(n, -1, dtype=np.int64)
    low = np.zeros(n, dtype=np.int64)
    onstack = np.zeros(n, dtype=np.bool_)
    stack = np.empty(n, dtype=np.int64)
    calls = np.empty(n, dtype=np.int64)
    ptr = np.empty(n, dtype=np.int64)
    nodes = np.empty(n, dtype=np.int64)
    comp_ptr = np.zeros(n + 1, dtype=np.int64)
    counter = 0
    sp_top = -1
    n_nodes = 0
    n_comp = 0
    for root in range(n):
        if index[root] >= 0:
            continue
        top = 0
        calls[0] = root
        index[root] = counter
        low[root] = counter
        counter += 1
        sp_top += 1
        stack[sp_top] = root
        onstack[root] = True
        ptr[root] = indptr[root]
        while top >= 0:
            v = calls[top]
            if ptr[v] < indptr[v + 1]:
                w = indices[ptr[v]]
                ptr[v] += 1
                if index[w] < 0:
                    index[w] = counter
                    low[w] = counter
                    counter += 1
                    sp_top += 1
                    stack[sp_top] = w
                    onstack[w] = True
                    ptr[w] = indptr[w]
                    top += 1
                    calls[top] = w
                elif onstack[w] and index[w] < low[v]:
                    low[v] = index[w]
            else:
                top -= 1
                if top >= 0:
                    u = calls[top]
                    if low[v] < low[u]:
                        low[u] = low[v]
                if low[v] == index[v]:
                    while True:
                        w = stack[sp_top]
                        sp_top -= 1
                        onstack[w] = False
                        nodes[n_nodes] = w
                        n_nodes += 1
                        if w == v:
                            break
                    n_comp += 1
                    comp_ptr[n_comp] = n_nodes
    return comp_ptr[:n_comp + 1], nodes


@njit(cache=True)
def _invert_blocks(indptr, indices, data, comp_ptr, nodes, dense, offsets, out):
    """Dense inverses of the components flagged in ``dense``, stored flat."""
    n = indptr.size - 1
    local = np.full(n, -1, dtype=np.int64)
    for c in range(comp_ptr.size - 1):
        if not dense[c]:
            continue
        a = comp_ptr[c]
        size = comp_ptr[c + 1] - a
        M = np.zeros((size, size))
        for i in range(size):
            local[nodes[a + i]] = i
        for i in range(size):
            p = nodes[a + i]
            for j in range(indptr[p], indptr[p + 1]):
                q = indices[j]
                if local[q] >= 0:
                    M[i, local[q]] += data[j]
        inv = np.linalg.inv(M)
        out[offsets[c]:offsets[c] + size * size] = inv.ravel()
        for i in range(size):
            local[nodes[a + i]] = -1


@njit(cache=True)
def _block_sweep(indptr, indices, data, diag, comp_ptr, nodes, pos, dense, offsets, inv, r):
    """Forward block Gauss-Seidel over components in dependency order.

    Components with a stored inverse are solved exactly, so the sweep is a
    direct solve when every cyclic component has one.  The remaining large
    components get one point Gauss-Seidel pass.
    """
    n = r.size
    x = np.zeros(n)
    for c in range(comp_ptr.size - 1):
        a = comp_ptr[c]
        b = comp_ptr[c + 1]
        size = b - a
        if size == 1:
            p = nodes[a]
            s = r[p]
            for j in range(indptr[p], indptr[p + 1]):
                q = indices[j]
                if q != p:
                    s -= data[j] * x[q]
            x[p] = s / diag[p]
        elif dense[c]:
            rhs = np.empty(size)
            for i in range(size):
                p = nodes[a + i]
                s = r[p]
                for j in range(indptr[p], indptr[p + 1]):
                    q = indices[j]
                    if pos[q] < a:
                        s -= data[j] * x[q]
                rhs[i] = s
            o = offsets[c]
            for i in range(size):
                s = 0.0
                row = o + i * size
                for k in range(size):
                    s += inv[row + k] * rhs[k]
                x[nodes[a + i]] = s
        else:
            for i in range(a, b):
                p = nodes[i]
                s = r[p]
                for j in range(indptr[p], indptr[p + 1]):
                    q = indices[j]
                    if q != p and pos[q] < i:
                        s -= data[j] * x[q]
                x[p] = s / diag[p]
    return x


class LinearSolver:
    """Factor once per matrix, then solve many right-hand sides.

    ``direct`` uses a sparse LU factorization.  ``sweep`` runs BiCGStab
    preconditioned by one block Gauss-Seidel sweep over the strongly
    connected components of the upwind graph in dependency order; when every
    component is small the sweep alone is an exact solve.  ``ilu`` uses an
    incomplete LU preconditioner.  All are wrapped in iterative refinement
    until the scaled infinity-norm residual meets ``tol``.
    """

    def __init__(self, method: str = "auto", tol: float = 1e-13, max_iter: int = 500,
                 ilu_drop: float = 1e-5, ilu_fill: float = 4.0):
        self.method = method
        self.tol = tol
        self.max_iter = max_iter
        self.ilu_drop = ilu_drop
        self.ilu_fill = ilu_fill
        self.A = None
        self._lu = None
        self.iterations: list[int] = []

    def prepare(self, A: sp.spmatrix) -> "LinearSolver":
        A = sp.csc_matrix(A)
        self.A = A.tocsr()
        method = self.method
        if method == "auto":
            method = "direct" if A.shape[0] <= DIRECT_LIMIT else "sweep"
        self._kind = method
        if method == "sweep":
            A = self.A
            A.sort_indices()
            diag = A.diagonal()
            if np.any(diag == 0.0):
                raise ValueError("zero diagonal entry")
            indptr = A.indptr.astype(np.int64)
            indices = A.indices.astype(np.int64)
            comp_ptr, nodes = _tarjan_components(indptr, indices, A.shape[0])
            pos = np.empty_like(nodes)
            pos[nodes] = np.arange(nodes.size)
            sizes = np.diff(comp_ptr)
            self.largest_component = int(sizes.max())
            dense = (sizes > 1) & (sizes <= DENSE_MAX)
            cost = np.where(dense, sizes * sizes, 0)
            if cost.sum() > DENSE_BUDGET:
                # keep the smallest blocks dense within the budget
                order = np.argsort(cost, kind="stable")
                keep = np.cumsum(cost[order]) <= DENSE_BUDGET
                dense[:] = False
                dense[order[keep & (cost[order] > 0)]] = True
                cost = np.where(dense, cost, 0)
            offsets = np.concatenate([[0], np.cumsum(cost)[:-1]]).astype(np.int64)
            inv = np.empty(int(cost.sum()))
            _invert_blocks(indptr, indices, A.data, comp_ptr, nodes, dense, offsets, inv)
            args = (indptr, indices, A.data, diag, comp_ptr, nodes, pos, dense, offsets, inv)
            self._sweep = lambda r: _block_sweep(*args, r)
            self._M = spla.LinearOperator(A.shape, self._sweep)
        elif method == "direct":
            self._lu = spla.splu(A, permc_spec="COLAMD")
        elif method == "ilu":
            self._lu = spla.spilu(A, drop_tol=self.ilu_drop, fill_factor=self.ilu_fill,
                                  permc_spec="COLAMD")
            self._M = spla.LinearOperator(A.shape, self._lu.solve)
        else:
            raise ValueError(f"unknown linear solver method {method!r}")
        return self

    def _correction(self, r: np.ndarray) -> tuple[np.ndarray, int]:
        if self._kind == "direct":
            return self._lu.solve(r), 1
        counter = [0]

        def cb(_):
            counter[0] += 1

        scale = float(np.abs(r).max())
        pre = self._sweep if self._kind == "sweep" else self._lu.solve
        x0 = pre(r / scale)
        if float(np.abs(self.A @ x0 - r / scale).max()) <= 1e-14:
            return x0 * scale, 1
        dx, info = spla.bicgstab(self.A, r / scale, x0=x0, rtol=1e-12,
                                 atol=0.0, maxiter=self.max_iter, M=self._M, callback=cb)
        return dx * scale, max(1, counter[0])

    def solve(self, b: np.ndarray, x0: np.ndarray | None = None) -> np.ndarray:
        if self.A is None:
            raise RuntimeError("call prepare() first")
        A = self.A
        bnorm = max(1.0, float(np.abs(b).max(initial=0.0)))
        x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
        r = b - A @ x
        res = float(np.abs(r).max(initial=0.0)) / bnorm
        best, best_res = x.copy(), res
        its = 0
        for _ in range(20):
            if res <= self.tol:
                break
            dx, k = self._correction(r)
            its += k
            x = x + dx
            r = b - A @ x
            res = float(np.abs(r).max(initial=0.0)) / bnorm
            if res < best_res:
                best, best_res = x.copy(), res
        self.iterations.append(its)
        if best_res > self.tol:
            raise NoConvergence(f"linear solve reached {best_res:.3e} > {self.tol:.1e}",
                                best, best_res)
        return best


def solve_linear(A, b, guess=None, tol: float = 1e-13, max_iter: int = 200,
                 method: str = "auto") -> np.ndarray:
    return LinearSolver(method, tol, max_iter).prepare(A).solve(np.asarray(b, dtype=float), guess)


@dataclass
class SolveReport:
    step: int
    time: float
    iterations: int
    residuals: list[float]
    linear_iterations: list[int]
    converged: bool
    degenerate_rows: int = 0

    @property
    def final_residual(self) -> float:
        return self.residuals[-1] if self.residuals else math.nan


@dataclass
class TimeLoopConfig:
    dt: float
    T: float
    boundary_mode: BoundaryMode
    velocity: VelocityField
    dirichlet: Callable[[np.ndarray, float], np.ndarray] | None = None
    eta: float = 1e-12
    k_max: int = 50
    linear_tol: float = 1e-13
    delta: float = DELTA
    snapshot_stride: int = 0  # 0 keeps only the final field
    linear_method: str = "auto"

    def __post_init__(self):
        self.boundary_mode = BoundaryMode(self.boundary_mode)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T >= self.dt * (1 - 1e-12):
            raise ValueError("T must be at least dt")
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be at least 1")
        if self.boundary_mode is BoundaryMode.DIRICHLET and self.dirichlet is None:
            raise ValueError("Dirichlet mode needs an exact-solution evaluator")

    @property
    def n_steps(self) -> int:
        return max(1, int(math.ceil(self.T / self.dt - 1e-9)))

    def step_time(self, n: int) -> float:
        return min(n * self.dt, self.T) if n < self.n_steps else self.T


class StepFailure(RuntimeError):
    """A time step failed; carries the step index and the original error."""

    def __init__(self, step: int, time: float, cause: BaseException):
        super().__init__(f"step {step} (t={time:.6g}) failed: {type(cause).__name__}: {cause}")
        self.step = step
        self.time = time
        self.cause = cause


@dataclass
class Trajectory:
    times: list[float]
    snapshots: list[np.ndarray]
    reports: list[SolveReport]
    final: np.ndarray
    final_cache: ReconstructionCache | None = None
    wall_time: float = 0.0

    @property
    def all_converged(self) -> bool:
        return all(r.converged for r in self.reports)


StepObserver = Callable[[int, float, np.ndarray, ReconstructionCache], None]
SystemHook = Callable[[int, int, StepSystem, np.ndarray, np.ndarray, "LinearSolver"], None]


class LevelSetSolver:
    """Owns the per-mesh operators and advances a cell field in time."""

    def __init__(self, mesh: Mesh, config: TimeLoopConfig,
                 reconstructor: Reconstructor | None = None,
                 geometry: SchemeGeometry | None = None):
        self.mesh = mesh
        self.config = config
        stencil = (StencilKind.DIRICHLET if config.boundary_mode is BoundaryMode.DIRICHLET
                   else StencilKind.LOCAL)
        if reconstructor is None or reconstructor.stencil is not stencil:
            reconstructor = Reconstructor(mesh, stencil)
        self.recon = reconstructor
        self.geom = geometry or SchemeGeometry(mesh)
        self.bdr_centers = mesh.tri_centers[mesh.boundary_triangles]
        self.system_hook: SystemHook | None = None
        self.flux_hook: Callable[[int, FluxSet], None] | None = None

    # -- helpers -------------------------------------------------------------
    def boundary_values(self, t: float) -> np.ndarray | None:
        if self.config.boundary_mode is not BoundaryMode.DIRICHLET:
            return None
        return np.asarray(self.config.dirichlet(self.bdr_centers, t), dtype=float)

    def build_cache(self, u, t, mask=None) -> ReconstructionCache:
        return self.recon.build(u, t, self.boundary_values(t), mask)

    def freeze(self, cache_prev: ReconstructionCache, dt: float) -> tuple[FluxSet, np.ndarray | None]:
        """Fluxes from the ``t^{n-1}`` triangle gradients.

        Explicit time dependence of the velocity is sampled at the step
        midpoint so that piecewise schedules switch on step boundaries.
        """
        cfg = self.config
        tg = cache_prev.triangle_gradients
        mu = triangle_mu(self.mesh, cfg.velocity, tg, cache_prev.time + 0.5 * dt, cfg.delta)
        nu = mask = None
        if cfg.boundary_mode is BoundaryMode.EIKONAL:
            nu = triangle_nu(self.mesh, tg, cfg.delta)
            mask = soner_mask(self.mesh, nu)
        return classify_signs(self.mesh, mu, nu, cache_prev.time), mask

    # -- one step ------------------------------------------------------------
    def step(self, n: int, u_prev: np.ndarray, t_prev: float, dt: float,
             cache_prev: ReconstructionCache | None = None
             ) -> tuple[np.ndarray, ReconstructionCache, SolveReport]:
        cfg = self.config
        t_n = t_prev + dt
        if cache_prev is None or cache_prev.time != t_prev:
            cache_prev = self.build_cache(u_prev, t_prev)
        flux, mask = self.freeze(cache_prev, dt)
        if self.flux_hook is not None:
            self.flux_hook(n, flux)
        if mask is not None:
            cache_prev = self.recon.remask(cache_prev, mask)
        bv_n = self.boundary_values(t_n)
        system = assemble_step(self.geom, cfg.boundary_mode, flux,
                               cache_prev.representative_gradients, u_prev, dt, bv_n)
        solver = LinearSolver(cfg.linear_method, cfg.linear_tol).prepare(system.A)
        # u^{n,0} = u^{n-1} together with its own (consistent) reconstruction
        cache = ReconstructionCache(u_prev, t_n, cache_prev.cell_gradients,
                                    cache_prev.vertex_values, cache_prev.face_values,
                                    cache_prev.triangle_gradients,
                                    cache_prev.representative_gradients, mask)
        residuals: list[float] = []
        best = (math.inf, cache)
        converged = False
        for k in range(1, cfg.k_max + 1):
            f = system.rhs(cache.u, cache.representative_gradients)
            u = solver.solve(f, cache.u)
            if self.system_hook is not None:
                self.system_hook(n, k, system, f, u, solver)
            cache = self.recon.build(u, t_n, bv_n, mask)
            res = float(np.mean(np.abs(system.residual(u, cache.representative_gradients))))
            residuals.append(res)
            if res < best[0]:
                best = (res, cache)
            if res < cfg.eta:
                converged = True
                break
        if not converged:
            log.warning("step %d: deferred correction stopped at k_max=%d, residual %.3e",
                        n, cfg.k_max, residuals[-1])
            cache = best[1]
        report = SolveReport(n, t_n, len(residuals), residuals, list(solver.iterations),
                             converged, system.n_degenerate)
        return cache.u, cache, report

    def run(self, u0: np.ndarray, observer: StepObserver | None = None) -> Trajectory:
        cfg = self.config
        start = _time.perf_counter()
        u = np.asarray(u0, dtype=float).copy()
        t = 0.0
        cache = None
        times, snaps, reports = [], [], []
        for n in range(1, cfg.n_steps + 1):
            t_next = cfg.step_time(n)
            try:
                u, cache, rep = self.step(n, u, t, t_next - t, cache)
            except StepFailure:
                raise
            except Exception as exc:
                raise StepFailure(n, t_next, exc) from exc
            t = t_next
            reports.append(rep)
            if observer is not None:
                observer(n, t, u, cache)
            if cfg.snapshot_stride and n % cfg.snapshot_stride == 0:
                times.append(t)
                snaps.append(u.copy())
        return Trajectory(times, snaps, reports, u, cache, _time.perf_counter() - start)


def time_loop(mesh: Mesh, u0: np.ndarray, config: TimeLoopConfig,
              observer: StepObserver | None = None) -> Trajectory:
    return LevelSetSolver(mesh, config).run(u0, observer)
