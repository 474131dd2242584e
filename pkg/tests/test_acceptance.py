"""Acceptance criteria A1-A11.

Every test records one PASS/FAIL line (shown in the terminal summary) and
then asserts.  The convergence runs share module-scoped fixtures so that the
64^3 meshes are built once each, one at a time.
"""

import gc
import math
import time

import numpy as np
import pytest
import scipy.linalg as sla

import eikls.linsolve as linsolve_mod
from eikls.analysis import TetGeometry, eoc
from eikls.linsolve import LevelSetSolver, TimeLoopConfig, relative_residual
from eikls.mesh import build_hex_mesh
from eikls.recon import Reconstructor, StencilKind, gradient_operators
from eikls.scenarios import (ConstantVelocity, Sphere, custom_case, exact_solution, get_case,
                             rotation_z, sdf)
from eikls.scheme import ROW_DEGENERATE, ROW_EIKONAL, ROW_TRANSPORT, BoundaryMode, FluxSet
from eikls.study import DOMAIN, level_cells, level_dt, reversibility_run, run_level

pytestmark = pytest.mark.slow

LEVELS = (1, 2, 3)
TS_T = 0.5  # with the catalog T = 2 the sphere leaves the domain and the band empties


def level_mesh(M):
    return build_hex_mesh(DOMAIN, level_cells(M))


# -- structural Soner check (A5) -------------------------------------------------

class SonerAudit:
    """Wraps ``assemble_step`` and audits every eikonal system it produces.

    Two independent checks per system: (1) reassembling with the fluxes of
    the inflow boundary triangles replaced by NaN leaves every eikonal row of
    ``A``, ``b0``, ``U`` and ``C`` bit-identical and finite; (2) the column
    pattern of each eikonal row only references the cell itself and its
    implicit inflow neighbours, and ``b0`` equals the cell volume.
    """

    def __init__(self, original):
        self.original = original
        self.systems = 0
        self.rows = 0
        self.dropped = 0
        self.violations: list[str] = []

    def __call__(self, geom, mode, flux, Du_prev, u_prev, dt, boundary_values=None):
        system = self.original(geom, mode, flux, Du_prev, u_prev, dt, boundary_values)
        if BoundaryMode(mode) is BoundaryMode.EIKONAL:
            self.audit(geom, mode, flux, Du_prev, u_prev, dt, boundary_values, system)
        return system

    def fail(self, msg):
        if len(self.violations) < 20:
            self.violations.append(msg)

    def audit(self, geom, mode, flux, Du_prev, u_prev, dt, bv, system):
        mesh = geom.mesh
        n = mesh.n_cells
        self.systems += 1
        drop = (mesh.ht_other < 0) & flux.nu_minus
        self.dropped += int(drop.sum())
        rows = np.flatnonzero(system.row_kind != ROW_TRANSPORT)
        self.rows += rows.size
        nu = flux.nu.copy()
        nu[mesh.ht_tri[drop]] = np.nan
        poisoned = FluxSet(flux.time, flux.mu, nu, flux.mu_half,
                           np.where(drop, np.nan, flux.nu_half), flux.mu_minus, flux.nu_minus)
        other = self.original(geom, mode, poisoned, Du_prev, u_prev, dt, bv)
        for name in ("A", "U", "C"):
            a, b = getattr(system, name)[rows], getattr(other, name)[rows]
            same = (np.array_equal(a.indptr, b.indptr) and np.array_equal(a.indices, b.indices)
                    and np.array_equal(a.data, b.data))
            if not same or not np.isfinite(a.data).all():
                self.fail(f"{name} rows depend on inflow boundary fluxes")
        if not np.array_equal(system.b0[rows], other.b0[rows]):
            self.fail("b0 depends on inflow boundary fluxes")

        hc, ho = mesh.ht_cell, mesh.ht_other
        imp = (ho >= 0) & flux.nu_minus
        allowed = np.union1d(hc[imp] * n + ho[imp], np.arange(n) * (n + 1))
        eik = np.flatnonzero(system.row_kind == ROW_EIKONAL)
        A = system.A.tocsr()
        r = np.repeat(np.arange(n), np.diff(A.indptr))
        sel = np.isin(r, eik)
        if not np.isin(r[sel] * n + A.indices[sel], allowed).all():
            self.fail("A eikonal row references a non-inflow cell")
        C = system.C.tocsr()
        r = np.repeat(np.arange(n), np.diff(C.indptr))
        sel = np.isin(r, eik)
        if not np.isin(r[sel] * n + C.indices[sel] // 3, allowed).all():
            self.fail("C eikonal row references a non-inflow cell")
        if system.U[eik].nnz:
            self.fail("U has entries in eikonal rows")
        if not np.array_equal(system.b0[eik], mesh.cell_volumes[eik]):
            self.fail("b0 of an eikonal row differs from the cell volume")
        deg = np.flatnonzero(system.row_kind == ROW_DEGENERATE)
        if deg.size and (system.A[deg].nnz != deg.size or system.C[deg].nnz):
            self.fail("degenerate row is not the identity")


@pytest.fixture(scope="module")
def soner(request):
    audit = SonerAudit(linsolve_mod.assemble_step)
    mp = pytest.MonkeyPatch()
    mp.setattr(linsolve_mod, "assemble_step", audit)
    yield audit
    mp.undo()


# -- linear-solver capture (A11) ---------------------------------------------------

class SolveCapture:
    def __init__(self, dense_limit=4096):
        self.dense_limit = dense_limit
        self.max_residual = 0.0
        self.count = 0
        self.small: list[tuple[int, np.ndarray, np.ndarray]] = []
        self.matrices: dict[int, object] = {}
        self._current = None

    def hook(self):
        def record(n, k, system, f, u, solver):
            res = relative_residual(system.A, u, f)
            self.max_residual = max(self.max_residual, res)
            self.count += 1
            if system.A.shape[0] <= self.dense_limit:
                # object ids are recycled, so number the systems as they arrive
                if system is not self._current:
                    self._current = system
                    self.matrices[len(self.matrices)] = system.A.copy()
                self.small.append((len(self.matrices) - 1, f.copy(), u.copy()))
        return record


# -- shared convergence runs --------------------------------------------------------

def summarize(res):
    return {"errors": res.errors.as_dict(), "h": res.mesh_stats["h_ave"],
            "converged": res.trajectory.all_converged, "wall": res.wall_time,
            "max_residual": max(r.residuals[-1] for r in res.trajectory.reports),
            "max_iterations": max(r.iterations for r in res.trajectory.reports)}


@pytest.fixture(scope="module")
def a2_runs(soner):
    capture = SolveCapture()
    out = {}
    start = time.perf_counter()
    for name in ("TS", "SS"):
        case = get_case(name, T=TS_T) if name == "TS" else get_case(name)
        for mode in ("dirichlet", "eikonal"):
            for M in LEVELS:
                mesh = level_mesh(M)
                res = run_level(case, mode, mesh, level_dt(M), level=M,
                                solver_hooks={"system_hook": capture.hook()})
                out[(name, mode, M)] = summarize(res)
                del res, mesh
                gc.collect()
    return out, capture, time.perf_counter() - start


def test_a1_stationarity(soner, acceptance_log):
    mesh = build_hex_mesh(DOMAIN, 16)
    u0 = sdf(Sphere((0.0, 0.0, 0.0), 0.5), mesh.cell_centers)
    cfg = TimeLoopConfig(0.1, 2.0, "eikonal", ConstantVelocity((0.0, 0.0, 0.0)))
    start = time.perf_counter()
    traj = LevelSetSolver(mesh, cfg).run(u0)
    wall = time.perf_counter() - start
    G, _, _ = gradient_operators(mesh, StencilKind.LOCAL)
    vol = mesh.cell_volumes

    def e1g(u):
        g = (G @ u).reshape(-1, 3)
        return float(np.abs(np.linalg.norm(g, axis=1) - 1.0) @ vol / vol.sum())

    drift = float(np.abs(traj.final - u0).max())
    inner = float(np.abs(traj.final - u0)[~mesh.is_boundary_cell].max())
    g0, g1 = e1g(u0), e1g(traj.final)
    ok = (len(traj.reports) == 20 and drift <= 1e-8 and g1 <= g0 + 1e-8 and wall < 10.0)
    acceptance_log("A1", ok, f"steps={len(traj.reports)} drift={drift:.3e} (internal "
                   f"{inner:.3e}) E1g {g0:.6e} -> {g1:.6e} wall={wall:.1f}s")
    assert ok


def test_a2_dirichlet_parity(a2_runs, acceptance_log):
    runs, _, wall = a2_runs
    ok = wall < 1800
    parts = []
    for name in ("TS", "SS"):
        for M in LEVELS:
            d, e = runs[(name, "dirichlet", M)], runs[(name, "eikonal", M)]
            r1 = e["errors"]["E1z"] / d["errors"]["E1z"]
            ri = e["errors"]["Einfz"] / d["errors"]["Einfz"]
            ok &= r1 <= 2.5 and ri <= 2.5
            parts.append(f"{name}M{M} E1z {e['errors']['E1z']:.3e}/{d['errors']['E1z']:.3e}"
                         f" Einfz {e['errors']['Einfz']:.3e}/{d['errors']['Einfz']:.3e}")
        for mode in ("eikonal", "dirichlet"):
            rs = [runs[(name, mode, M)] for M in LEVELS]
            orders = eoc([r["errors"]["E1z"] for r in rs], [r["h"] for r in rs])
            if mode == "eikonal":
                ok &= all(o >= 1.5 for o in orders)
            parts.append(f"{name} {mode} EOC_E1z={[round(o, 3) for o in orders]}")
    acceptance_log("A2", ok, "; ".join(parts) + f"; wall={wall:.0f}s")
    assert ok


def test_a3_cube_order_band(acceptance_log):
    case = get_case("TC")
    rs = []
    for M in LEVELS:
        mesh = level_mesh(M)
        rs.append(summarize(run_level(case, "eikonal", mesh, level_dt(M), level=M)))
        del mesh
        gc.collect()
    orders = eoc([r["errors"]["Einfz"] for r in rs], [r["h"] for r in rs])
    ok = all(0.4 <= o <= 1.2 for o in orders)
    einf = [f"{r['errors']['Einfz']:.3e}" for r in rs]
    acceptance_log("A3", ok, f"TC eikonal Einfz={einf}"
                   f" EOC={[round(o, 3) for o in orders]}")
    assert ok


def test_a4_gradient_preservation(acceptance_log):
    case = get_case("RSS")
    start = time.perf_counter()
    e1g = {}
    for mode in ("eikonal", "znbc", "lebc"):
        e1g[mode] = []
        for M in (1, 2):
            res = run_level(case, mode, level_mesh(M), level_dt(M), level=M)
            e1g[mode].append(res.errors.E1g)
            del res
            gc.collect()
    wall = time.perf_counter() - start
    ratio = {m: v[1] / v[0] for m, v in e1g.items()}
    ok = (ratio["eikonal"] <= 0.7 and ratio["znbc"] >= 0.85 and ratio["lebc"] >= 0.85
          and wall < 1200)
    acceptance_log("A4", ok, " ".join(f"{m}: E1g {v[0]:.3e}->{v[1]:.3e} ratio={ratio[m]:.3f}"
                                      for m, v in e1g.items()) + f" wall={wall:.0f}s")
    assert ok


def test_a5_soner_structure(a2_runs, soner, acceptance_log):
    # the audit is active for every eikonal run of this module up to here; for a
    # sphere whose center stays inside the box the distance gradient points out of
    # every boundary face, so the inflow boundary set is only populated once the
    # center leaves the domain, as in the catalog reversible translation
    case = get_case("TRS")
    LevelSetSolver(level_mesh(1), TimeLoopConfig(level_dt(1), case.T, "eikonal",
                                                 case.velocity)).run(case.initial(
                                                     level_mesh(1).cell_centers))
    ok = not soner.violations and soner.systems > 0 and soner.dropped > 0
    acceptance_log("A5", ok, f"eikonal systems={soner.systems} boundary rows={soner.rows} "
                   f"inflow boundary half-triangles excluded={soner.dropped} "
                   f"violations={soner.violations[:3]}")
    assert ok


def test_a6_reconstruction_exactness(acceptance_log):
    mesh = build_hex_mesh(DOMAIN, 8, 0.2, 11)
    rng = np.random.default_rng(2024)
    recs = {s: Reconstructor(mesh, s) for s in StencilKind}
    bt = mesh.tri_centers[mesh.boundary_triangles]
    worst = 0.0
    for _ in range(100):
        g = rng.normal(size=3)
        g *= rng.uniform(0.05, 0.95) / np.linalg.norm(g)  # inside the unit ball
        c = rng.normal()
        f = lambda x: c + np.asarray(x) @ g  # noqa: E731
        for s, rec in recs.items():
            bv = f(bt) if s is StencilKind.DIRICHLET else None
            cache = rec.build(f(mesh.cell_centers), 0.0, bv)
            errs = [np.abs(cache.cell_gradients - g).max(),
                    np.abs(cache.vertex_values - f(mesh.vertices)).max(),
                    np.abs(cache.face_values - f(mesh.face_centers)).max(),
                    np.abs(cache.triangle_gradients - g).max(),
                    np.abs(cache.representative_gradients - g).max()]
            worst = max(worst, max(errs))
    rec = recs[StencilKind.LOCAL]
    max_norm = 0.0
    for _ in range(1000):
        u = rng.normal(scale=rng.choice([0.1, 1.0, 10.0]), size=mesh.n_cells)
        g = rec.cell_gradients(u)
        uv = rec.vertex_values(u, g)
        tg = rec.triangle_gradients(u, uv, rec.face_values(u, uv), g)
        max_norm = max(max_norm, float(np.linalg.norm(tg, axis=1).max()))
    ok = worst <= 1e-10 and max_norm <= 1 + 1e-12
    acceptance_log("A6", ok, f"affine max error={worst:.3e} (100 fields, both stencils); "
                   f"max |beta|={max_norm:.15f} (1000 fields)")
    assert ok


def test_a7_volume_extraction(acceptance_log):
    s = Sphere((0.0, 0.0, 0.0), 0.5)
    ref = math.pi / 6
    rel = []
    for n in (32, 64):
        mesh = build_hex_mesh(DOMAIN, n)
        V = TetGeometry(mesh).volume(sdf(s, mesh.cell_centers), sdf(s, mesh.vertices),
                                     sdf(s, mesh.face_centers))
        rel.append(abs(V - ref) / ref)
        del mesh
    order = math.log2(rel[0] / rel[1])
    ok = rel[0] < 0.02 and rel[1] < 0.006 and order >= 1.8
    acceptance_log("A7", ok, f"rel err 32^3={rel[0]:.3e} 64^3={rel[1]:.3e} order={order:.2f}")
    assert ok


def test_a8_large_cfl(acceptance_log):
    case = get_case("TS", T=TS_T)
    mesh = level_mesh(1)
    big = run_level(case, "eikonal", mesh, 0.1, level=1)
    small = run_level(case, "eikonal", mesh, 0.05, level=1)
    reps = big.trajectory.reports
    conv = all(r.converged and r.iterations <= 50 and r.residuals[-1] < 1e-12 for r in reps)
    ratio = big.errors.Einfz / small.errors.Einfz
    ok = conv and ratio <= 3.0 and abs(big.cfl[1] - 2 * math.sqrt(3) * 0.1 / (2.5 / 16)) < 1e-12
    acceptance_log("A8", ok, f"CFL_ave={big.cfl[1]:.4f} all converged={conv} "
                   f"max K={max(r.iterations for r in reps)} "
                   f"max residual={max(r.residuals[-1] for r in reps):.2e} "
                   f"Einfz dt=0.1 {big.errors.Einfz:.3e} / dt=0.05 {small.errors.Einfz:.3e} "
                   f"= {ratio:.3f}")
    assert ok


def test_a9_reversibility(acceptance_log):
    # the catalog reversible translation carries its sphere to (1.5)^3, outside the
    # domain; this one travels from (-1)^3 to (1)^3 and back while staying inside
    base = get_case("TRS")
    case = custom_case("TRS-in", Sphere((-1.0, -1.0, -1.0), 0.2), base.velocity, base.T)
    reps = []
    for M in (1, 2):
        rep, _ = reversibility_run(case, "eikonal", level_mesh(M), level_dt(M))
        reps.append(rep)
        gc.collect()
    ratio = reps[1]["e1"] / reps[0]["e1"]
    ok = ratio <= 0.6
    acceptance_log("A9", ok, f"TRS e1 16^3={reps[0]['e1']:.3e} 32^3={reps[1]['e1']:.3e} "
                   f"ratio={ratio:.3f}")
    assert ok


def _rk4_rotation(x, velocity, t_end, steps=2000):
    h = t_end / steps
    for _ in range(steps):
        k1 = velocity(x, 0.0)
        k2 = velocity(x + 0.5 * h * k1, 0.0)
        k3 = velocity(x + 0.5 * h * k2, 0.0)
        k4 = velocity(x + h * k3, 0.0)
        x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def test_a10_rotation_shrink_oracle(acceptance_log):
    t = 0.5
    rng = np.random.default_rng(10)
    rot = lambda x, _t: np.pi * np.stack([x[:, 1], -x[:, 0], np.zeros(len(x))], 1)  # noqa: E731
    worst = {}
    for name in ("RSS", "RSC"):
        case = get_case(name)
        c = np.asarray(case.shape.center, dtype=float)
        r = case.shape.radius
        shrink = 0.1 * t
        d = rng.normal(size=(10_000, 3))
        if name == "RSS":
            d /= np.linalg.norm(d, axis=1)[:, None]
            pts = c + (r - shrink) * d  # eroded sphere surface
        else:
            # points on the cube surface, then erosion as half-width reduction
            axis = rng.integers(0, 3, 10_000)
            side = rng.choice([-1.0, 1.0], 10_000)
            q = rng.uniform(-1.0, 1.0, (10_000, 3))
            q[np.arange(10_000), axis] = side
            pts = c + (r - shrink) * q
        moved = _rk4_rotation(pts, rot, t)
        worst[name] = float(np.abs(exact_solution(case, moved, t)).max())
    # the frame rotation used by the exact solution agrees with the integrated flow
    sanity = float(np.abs(_rk4_rotation(np.array([[0.625, 0.0, 0.0]]), rot, t)
                          - np.array([[0.625, 0.0, 0.0]]) @ rotation_z(-np.pi * t).T).max())
    ok = all(w <= 1e-3 for w in worst.values())
    acceptance_log("A10", ok, " ".join(f"{k} max|u_exact| on advected front={v:.2e}"
                                       for k, v in worst.items())
                   + f" (center rotation check {sanity:.1e})")
    assert ok


def test_a11_linear_solver_contract(a2_runs, acceptance_log):
    _, capture, _ = a2_runs
    rng = np.random.default_rng(11)
    picks = rng.choice(len(capture.small), size=min(200, len(capture.small)), replace=False)
    lu = {}
    worst_res = worst_diff = 0.0
    for i in picks:
        key, f, u = capture.small[i]
        A = capture.matrices[key]
        if key not in lu:
            lu[key] = sla.lu_factor(A.toarray())
        worst_res = max(worst_res, relative_residual(A, u, f))
        worst_diff = max(worst_diff, float(np.abs(sla.lu_solve(lu[key], f) - u).max()))
    n = capture.matrices[capture.small[picks[0]][0]].shape[0]
    ok = (len(picks) == 200 and worst_res <= 1e-13 and worst_diff <= 1e-10
          and capture.max_residual <= 1e-13)
    acceptance_log("A11", ok, f"sampled {len(picks)} systems (n={n}, {len(lu)} distinct "
                   f"matrices): max residual={worst_res:.2e}, max |x - x_dense|={worst_diff:.2e}; "
                   f"all {capture.count} A2 solves max residual={capture.max_residual:.2e}")
    assert ok
