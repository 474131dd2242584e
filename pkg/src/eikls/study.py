"""Single runs, refinement sweeps, and boundary-condition comparisons."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .analysis import (ErrorAccumulator, ErrorReport, ReversibilityAccumulator, cfl_stats, eoc,
                       mesh_lengths)
from .linsolve import LevelSetSolver, TimeLoopConfig, Trajectory
from .mesh import Mesh, build_hex_mesh
from .scenarios import TestCase
from .scheme import BoundaryMode

__all__ = ["level_dt", "level_cells", "RunResult", "run_level", "convergence_study",
           "reversibility_run", "eoc_table", "DOMAIN"]

log = logging.getLogger(__name__)

DOMAIN = ((-1.25, 1.25),) * 3


def level_dt(M: int) -> float:
    """Time step ``0.1 / 2^(M-1)`` of refinement level ``M``."""
    return 0.1 / 2 ** (M - 1)


def level_cells(M: int) -> int:
    """Cells per direction of the generated hex mesh at level ``M`` (16, 32, 64, ...)."""
    return 16 * 2 ** (M - 1)


@dataclass
class RunResult:
    case: str
    mode: str
    level: int | None
    dt: float
    mesh_stats: dict
    cfl: tuple[float, float, float]
    errors: ErrorReport | None
    trajectory: Trajectory
    wall_time: float
    extra: dict = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return self.trajectory.all_converged

    def solve_summary(self) -> dict:
        reps = self.trajectory.reports
        return {
            "steps": len(reps),
            "all_converged": self.converged,
            "max_iterations": max((r.iterations for r in reps), default=0),
            "mean_iterations": float(np.mean([r.iterations for r in reps])) if reps else 0.0,
            "max_final_residual": max((r.final_residual for r in reps), default=math.nan),
            "degenerate_rows_max": max((r.degenerate_rows for r in reps), default=0),
        }


def run_level(case: TestCase, mode: BoundaryMode | str, mesh: Mesh, dt: float, *,
              level: int | None = None, eta: float = 1e-12, k_max: int = 50,
              linear_tol: float = 1e-13, volume: bool = True, strict_band: bool = True,
              snapshot_stride: int = 0, solver_hooks: dict | None = None,
              observers: list | None = None) -> RunResult:
    """Run ``case`` on ``mesh`` and accumulate errors against the exact solution."""
    mode = BoundaryMode.parse(mode) if isinstance(mode, str) else BoundaryMode(mode)
    exact = case.exact if case.has_exact else None
    cfg = TimeLoopConfig(dt=dt, T=case.T, boundary_mode=mode, velocity=case.velocity,
                         dirichlet=exact, eta=eta, k_max=k_max, linear_tol=linear_tol,
                         snapshot_stride=snapshot_stride)
    start = time.perf_counter()
    solver = LevelSetSolver(mesh, cfg)
    for name, hook in (solver_hooks or {}).items():
        setattr(solver, name, hook)
    u0 = case.initial(mesh.cell_centers)
    acc = ErrorAccumulator(mesh, case.exact, case.T, volume=volume) if exact else None
    grads = None
    if case.velocity.needs_gradient:
        grads = solver.build_cache(u0, 0.0).representative_gradients
    cfl = cfl_stats(mesh, case.velocity, dt, 0.5 * dt, grads)

    def observe(n, t, u, cache):
        if acc is not None:
            acc(n, t, u, cache)
        for ob in observers or ():
            ob(n, t, u, cache)

    traj = solver.run(u0, observe)
    errors = acc.report(strict=strict_band) if acc is not None else None
    stats = {**mesh.summary(), **mesh_lengths(mesh)}
    extra = {"empty_band_steps": acc.empty_band_steps} if acc is not None else {}
    return RunResult(case.name, mode.value, level, dt, stats, cfl, errors, traj,
                     time.perf_counter() - start, extra)


def reversibility_run(case: TestCase, mode: BoundaryMode | str, mesh: Mesh, dt: float,
                      **kw) -> tuple[dict, Trajectory]:
    """Run a case returning to its initial shape; errors against the discrete ``u^0``."""
    mode = BoundaryMode.parse(mode) if isinstance(mode, str) else BoundaryMode(mode)
    cfg = TimeLoopConfig(dt=dt, T=case.T, boundary_mode=mode, velocity=case.velocity,
                         dirichlet=case.exact, **kw)
    solver = LevelSetSolver(mesh, cfg)
    u0 = case.initial(mesh.cell_centers)
    acc = ReversibilityAccumulator(mesh, u0, solver.build_cache(u0, 0.0))
    traj = solver.run(u0, acc)
    return acc.report(), traj


def convergence_study(case: TestCase, mode: BoundaryMode | str, levels, *,
                      perturbation: float = 0.0, seed: int = 0, **kw) -> list[RunResult]:
    """Run ``case`` on generated meshes of the given levels with ``dt = level_dt(M)``."""
    out = []
    for M in levels:
        mesh = build_hex_mesh(DOMAIN, level_cells(M), perturbation, seed)
        res = run_level(case, mode, mesh, level_dt(M), level=M, **kw)
        log.info("%s %s level %d: %s (%.1f s)", case.name, res.mode, M,
                 res.errors.as_dict() if res.errors else "-", res.wall_time)
        out.append(res)
        del mesh
    return out


def eoc_table(results: list[RunResult]) -> dict[str, list[float]]:
    h = [r.mesh_stats["h_ave"] for r in results]
    keys = ("E1z", "Einfz", "Ev", "E1", "E1g")
    return {k: eoc([getattr(r.errors, k) for r in results], h) for k in keys}
