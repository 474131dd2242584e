"""Command-line driver: single runs, level sweeps, boundary-condition comparisons, meshes."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .analysis import EmptyBand, TetGeometry, eoc
from .linsolve import NoConvergence, StepFailure
from .mesh import Mesh, MeshError, build_hex_mesh, dump_poly_mesh, load_poly_mesh
from .output import (ERROR_COLUMNS, equidistant_levels, write_csv, write_json_atomic,
                     write_vtk_cells, write_vtk_polydata)
from .recon import DegenerateStencil, RankDeficient
from .scenarios import (CASES, ShapeVanished, TestCase, custom_case, get_case, shapes_from_spec,
                        velocity_from_text)
from .scheme import BoundaryMode
from .study import DOMAIN, RunResult, level_cells, level_dt, run_level

__all__ = ["main", "RunConfig", "ConfigError", "load_config_file", "resolve_config",
           "SCHEMA_VERSION", "ENV_PREFIX", "EXIT_OK", "EXIT_SOLVER", "EXIT_CONFIG"]

log = logging.getLogger("eikls")

SCHEMA_VERSION = 1
ENV_PREFIX = "EIKLS_"
EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 1, 2

SOLVER_ERRORS = (StepFailure, NoConvergence, EmptyBand, ShapeVanished, DegenerateStencil,
                 RankDeficient, FloatingPointError, np.linalg.LinAlgError)


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.field = key


# -- value parsers -----------------------------------------------------------

def _levels(text: str) -> list[int]:
    out: list[int] = []
    for part in text.replace(" ", "").split(","):
        if ".." in part:
            a, b = part.split("..", 1)
            lo, hi = int(a), int(b)
            if hi < lo:
                raise ValueError(f"empty range {part}")
            out += list(range(lo, hi + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 1:
        raise ValueError("levels must be positive integers, e.g. 1..3 or 1,2")
    return out


def _strings(text: str) -> list[str]:
    out = [s for s in text.replace(" ", "").split(",") if s]
    if not out:
        raise ValueError("empty list")
    return out


def _floats(text: str) -> list[float]:
    return [float(s) for s in _strings(text)]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(parse: Callable[[str], object]) -> Callable[[str], object]:
    def wrapped(text: str):
        return None if text.strip().lower() in ("", "none", "auto") else parse(text)
    return wrapped


def _positive(parse):
    def wrapped(text):
        v = parse(text)
        if v is not None and not v > 0:
            raise ValueError("must be positive")
        return v
    return wrapped


# key -> (parser, default); every value is parsed from text so file, env, and
# flag sources behave identically
SCHEMA: dict[str, tuple[Callable[[str], object], object]] = {
    "case": (_strings, ["TS"]),
    "bc": (_strings, ["eikonal"]),
    "levels": (_opt(_levels), None),
    "dt": (_positive(_opt(float)), None),
    "T": (_positive(_opt(float)), None),
    "mesh": (_opt(str), None),
    "n": (_positive(_opt(int)), None),
    "perturbation": (float, 0.0),
    "seed": (int, 0),
    "out": (str, "eikls-out"),
    "eta": (_positive(float), 1e-12),
    "kmax": (_positive(int), 50),
    "linear_tol": (_positive(float), 1e-13),
    "stride": (int, 0),
    "shape": (_opt(str), None),
    "center": (_opt(_floats), None),
    "radius": (_positive(_opt(float)), None),
    "velocity": (_opt(str), None),
    "iso_levels": (_floats, equidistant_levels(5)),
    "vtk": (_bool, True),
    "volume": (_bool, True),
    "strict_band": (_bool, True),
}


@dataclass
class RunConfig:
    case: list[str]
    bc: list[str]
    levels: list[int] | None
    dt: float | None
    T: float | None
    mesh: str | None
    n: int | None
    perturbation: float
    seed: int
    out: str
    eta: float
    kmax: int
    linear_tol: float
    stride: int
    shape: str | None
    center: list[float] | None
    radius: float | None
    velocity: str | None
    iso_levels: list[float]
    vtk: bool
    volume: bool
    strict_band: bool
    raw: dict[str, str] = field(default_factory=dict)
    sources: dict[str, str] = field(default_factory=dict)

    def echo(self) -> dict:
        d = {k: getattr(self, k) for k in SCHEMA}
        return {"schema": SCHEMA_VERSION, "values": d, "raw": dict(self.raw),
                "sources": dict(self.sources)}


def load_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` text with a mandatory ``schema`` line; ``#`` starts a comment."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc}") from None
    values: dict[str, str] = {}
    schema = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip().replace("-", "_"), value.strip()
        if not sep or not key:
            raise ConfigError("config", f"{path}:{lineno}: expected key = value")
        if key == "schema":
            schema = value
            continue
        if key not in SCHEMA:
            raise ConfigError(key, f"{path}:{lineno}: unknown key")
        values[key] = value
    if schema is None:
        raise ConfigError("schema", f"{path}: missing schema line (schema = {SCHEMA_VERSION})")
    if schema != str(SCHEMA_VERSION):
        raise ConfigError("schema", f"{path}: unsupported schema {schema!r}, "
                                    f"expected {SCHEMA_VERSION}")
    return values


def resolve_config(flags: dict[str, str | None], config_path: str | None = None,
                   environ: dict[str, str] | None = None) -> RunConfig:
    """Merge defaults < config file < ``EIKLS_*`` environment < command-line flags."""
    environ = os.environ if environ is None else environ
    raw: dict[str, str] = {}
    sources: dict[str, str] = {}
    if config_path:
        for k, v in load_config_file(config_path).items():
            raw[k], sources[k] = v, "file"
    for k in SCHEMA:
        env = environ.get(ENV_PREFIX + k.upper())
        if env is not None:
            raw[k], sources[k] = env, "env"
    for k, v in flags.items():
        if v is not None:
            raw[k], sources[k] = str(v), "flag"
    values = {}
    for k, (parse, default) in SCHEMA.items():
        if k in raw:
            try:
                values[k] = parse(raw[k])
            except (ValueError, TypeError) as exc:
                raise ConfigError(k, f"invalid value {raw[k]!r} ({exc})") from None
        else:
            values[k] = default
            sources[k] = "default"
    cfg = RunConfig(**values, raw=raw, sources=sources)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    valid = sorted(CASES)
    for name in cfg.case:
        if name != "custom" and name not in CASES:
            raise ConfigError("case", f"unknown case {name!r}; valid cases: "
                                      f"{', '.join(valid)}, custom")
    for b in cfg.bc:
        try:
            BoundaryMode.parse(b)
        except ValueError:
            raise ConfigError("bc", f"unknown boundary mode {b!r}; use "
                                    "eikonal, dirichlet, znbc, lebc") from None
    if "custom" in cfg.case:
        for k in ("shape", "center", "radius", "velocity", "T"):
            if getattr(cfg, k) is None:
                raise ConfigError(k, "required for the custom case")
        if len(cfg.center) != 3:
            raise ConfigError("center", "needs three coordinates")
    if not 0.0 <= cfg.perturbation < 0.3:
        raise ConfigError("perturbation", "must lie in [0, 0.3)")
    if cfg.stride < 0:
        raise ConfigError("stride", "must be non-negative")
    if cfg.mesh is not None and cfg.n is not None:
        raise ConfigError("mesh", "give either a mesh file or n, not both")
    if cfg.dt is None and cfg.levels is None and (cfg.mesh is not None or cfg.n is not None):
        raise ConfigError("dt", "needed when the mesh is not derived from a level")
    if cfg.levels is not None and (cfg.mesh is not None or cfg.n is not None) \
            and len(cfg.levels) > 1:
        raise ConfigError("levels", "several levels need generated level meshes "
                                    "(drop mesh/n)")


def build_case(cfg: RunConfig, name: str) -> TestCase:
    if name == "custom":
        try:
            shape = shapes_from_spec(cfg.shape, cfg.center, cfg.radius)
            vf, exact = velocity_from_text(cfg.velocity, shape)
        except ValueError as exc:
            raise ConfigError("velocity" if "velocity" in str(exc) else "shape", str(exc)) \
                from None
        return custom_case("custom", shape, vf, cfg.T, exact)
    try:
        return get_case(name, T=cfg.T)
    except KeyError as exc:
        raise ConfigError("case", str(exc)) from None


def _plans(cfg: RunConfig) -> list[tuple[int | None, Callable[[], Mesh], float]]:
    """``(level, mesh factory, dt)`` for each run of a case/mode pair."""
    if cfg.mesh is not None:
        path = cfg.mesh
        M = cfg.levels[0] if cfg.levels else None
        dt = cfg.dt if cfg.dt is not None else level_dt(M)
        return [(M, lambda: _load_mesh(path), dt)]
    if cfg.n is not None:
        M = cfg.levels[0] if cfg.levels else None
        dt = cfg.dt if cfg.dt is not None else level_dt(M)
        return [(M, lambda: build_hex_mesh(DOMAIN, cfg.n, cfg.perturbation, cfg.seed), dt)]
    plans = []
    for M in cfg.levels or [1]:
        dt = cfg.dt if cfg.dt is not None else level_dt(M)
        plans.append((M, (lambda M=M: build_hex_mesh(DOMAIN, level_cells(M), cfg.perturbation,
                                                      cfg.seed)), dt))
    return plans


def _load_mesh(path: str) -> Mesh:
    try:
        with open(path) as fh:
            return load_poly_mesh(fh)
    except OSError as exc:
        raise ConfigError("mesh", f"cannot read {path}: {exc}") from None
    except MeshError as exc:
        raise ConfigError("mesh", f"{path}: {exc}") from None


# -- running -----------------------------------------------------------------

def _row(res: RunResult) -> dict:
    row = {"case": res.case, "bc": res.mode, "M": "" if res.level is None else res.level,
           "cells": res.mesh_stats["cells"], "h_ave": res.mesh_stats["h_ave"], "dt": res.dt}
    for k in ("E1z", "Einfz", "Ev", "E1", "E1g"):
        row[k] = getattr(res.errors, k) if res.errors is not None else math.nan
    return row


def _add_eoc(rows: list[dict]) -> None:
    if len(rows) < 2:
        return
    h = [r["h_ave"] for r in rows]
    for k in ("E1z", "Einfz", "Ev", "E1", "E1g"):
        for r, v in zip(rows[1:], eoc([r[k] for r in rows], h)):
            r["EOC_" + k] = v


def _stem(res: RunResult) -> str:
    lev = "" if res.level is None else f"_M{res.level}"
    return f"{res.case}_{res.mode}{lev}"


def _write_fields(cfg: RunConfig, case: TestCase, mesh: Mesh, res: RunResult,
                  out: Path) -> list[str]:
    files = []
    stem = _stem(res)
    traj = res.trajectory
    n_steps = len(traj.reports)
    frames = [(round(t / res.dt), t, u) for t, u in zip(traj.times, traj.snapshots)]
    frames = [f for f in frames if f[0] != n_steps] + [(n_steps, case.T, traj.final)]
    for k, (n, t, u) in enumerate(frames):
        data = {"u": u}
        if case.has_exact:
            ex = case.exact(mesh.cell_centers, t)
            data["exact"] = ex
            data["error"] = u - ex
        last = k == len(frames) - 1
        path = out / "vtk" / (f"{stem}_final.vtk" if last else f"{stem}_step{n:05d}.vtk")
        write_vtk_cells(path, mesh, data, title=f"{stem} t={t:.17g}")
        files.append(str(path.relative_to(out)))
    cache = traj.final_cache
    if cache is not None:
        tets = TetGeometry(mesh)
        surfaces = {lv: tets.isosurface(traj.final, cache.vertex_values, cache.face_values, lv)
                    for lv in cfg.iso_levels}
        path = out / "vtk" / f"{stem}_iso.vtk"
        write_vtk_polydata(path, surfaces, title=f"{stem} isosurfaces t={case.T:.17g}")
        files.append(str(path.relative_to(out)))
    return files


def _run_block(cfg: RunConfig, case: TestCase, mode: str, out: Path) -> tuple[list[dict], list]:
    """All levels of one case/mode; returns csv rows and manifest entries."""
    rows, entries = [], []
    for M, make_mesh, dt in _plans(cfg):
        mesh = make_mesh()
        log.info("run %s %s level=%s cells=%d dt=%g", case.name, mode, M, mesh.n_cells, dt)
        res = run_level(case, mode, mesh, dt, level=M, eta=cfg.eta, k_max=cfg.kmax,
                        linear_tol=cfg.linear_tol, volume=cfg.volume and case.has_exact,
                        strict_band=cfg.strict_band, snapshot_stride=cfg.stride)
        files = _write_fields(cfg, case, mesh, res, out) if cfg.vtk else []
        rows.append(_row(res))
        entries.append({
            "case": case.name, "bc": res.mode, "level": M, "dt": dt, "T": case.T,
            "mesh": res.mesh_stats,
            "cfl": dict(zip(("min", "mean", "max"), res.cfl)),
            "wall_time": res.wall_time,
            "solve": res.solve_summary(),
            "steps": [{"step": r.step, "time": r.time, "iterations": r.iterations,
                       "final_residual": r.final_residual, "converged": r.converged,
                       "degenerate_rows": r.degenerate_rows} for r in res.trajectory.reports],
            "errors": res.errors.as_dict() if res.errors is not None else None,
            "extra": res.extra,
            "files": files,
        })
        if not res.converged:
            log.warning("%s %s level %s: deferred correction hit k_max at some steps",
                        case.name, res.mode, M)
    _add_eoc(rows)
    return rows, entries


def _execute(cfg: RunConfig, command: str, pairs: list[tuple[str, str]]) -> int:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    manifest = {"command": command, "version": __version__, "config": cfg.echo(), "runs": [],
                "failures": [], "status": "ok"}
    all_rows: list[dict] = []
    blocks: dict[str, list[dict]] = {}
    code = EXIT_OK
    for name, mode in pairs:
        case = build_case(cfg, name)
        mode = BoundaryMode.parse(mode).value
        if mode == BoundaryMode.DIRICHLET.value and not case.has_exact:
            raise ConfigError("bc", "dirichlet needs a case with a closed-form solution")
        try:
            rows, entries = _run_block(cfg, case, mode, out)
        except SOLVER_ERRORS as exc:
            step = getattr(exc, "step", None)
            log.error("%s %s failed: %s", name, mode, exc)
            manifest["failures"].append({"case": name, "bc": mode, "step": step,
                                         "error": f"{type(exc).__name__}: {exc}"})
            code = EXIT_SOLVER
            continue
        all_rows += rows
        blocks[mode] = rows
        manifest["runs"] += entries
    write_csv(out / "errors.csv", all_rows, ERROR_COLUMNS)
    manifest["error_table"] = all_rows
    if command == "compare":
        comp = _comparison(blocks)
        cols = ["case", "M", "cells", "dt"] + [f"{k}_{m}" for m in blocks
                                               for k in ("E1z", "Einfz", "E1", "E1g")]
        cols += [f"ratio_{k}_{m}" for m in list(blocks)[1:] for k in ("E1z", "Einfz", "E1", "E1g")]
        write_csv(out / "comparison.csv", comp, cols)
        manifest["comparison"] = comp
    manifest["wall_time"] = time.perf_counter() - start
    if code != EXIT_OK:
        manifest["status"] = "failed"
    write_json_atomic(out / "manifest.json", manifest)
    return code


def _comparison(blocks: dict[str, list[dict]]) -> list[dict]:
    """Side-by-side errors per level; ratios are relative to the first mode."""
    modes = list(blocks)
    if not modes:
        return []
    out = []
    for i, base in enumerate(blocks[modes[0]]):
        row = {k: base[k] for k in ("case", "M", "cells", "dt")}
        for m in modes:
            if i >= len(blocks[m]):
                continue
            for k in ("E1z", "Einfz", "E1", "E1g"):
                row[f"{k}_{m}"] = blocks[m][i][k]
                if m != modes[0]:
                    row[f"ratio_{k}_{m}"] = blocks[m][i][k] / base[k] if base[k] else math.nan
        out.append(row)
    return out


# -- argument parsing ----------------------------------------------------------

FLAG_KEYS = {"case": "--case", "bc": "--bc", "levels": "--levels", "dt": "--dt", "T": "--T",
             "mesh": "--mesh", "n": "--n", "perturbation": "--perturbation", "seed": "--seed",
             "out": "--out", "eta": "--eta", "kmax": "--kmax", "linear_tol": "--linear-tol",
             "stride": "--stride", "shape": "--shape", "center": "--center",
             "radius": "--radius", "velocity": "--velocity", "iso_levels": "--iso-levels",
             "vtk": "--vtk", "volume": "--volume", "strict_band": "--strict-band"}

HELP = {
    "case": "case name(s) from the catalog, or 'custom'",
    "bc": "boundary mode(s): eikonal, dirichlet, znbc, lebc",
    "levels": "refinement levels, e.g. 1, 1..3 or 1,2",
    "dt": "time step (default 0.1/2^(M-1))",
    "T": "final time override",
    "mesh": "polymesh file instead of a generated mesh",
    "n": "cells per axis of a generated mesh",
    "perturbation": "interior vertex jitter as a fraction of the spacing",
    "seed": "seed of the vertex jitter",
    "out": "output directory",
    "eta": "deferred-correction residual threshold",
    "kmax": "deferred-correction iteration cap",
    "linear_tol": "relative residual tolerance of the linear solves",
    "stride": "write a VTK snapshot every this many steps (0: final only)",
    "shape": "custom case shape: sphere or box",
    "center": "custom case center x,y,z",
    "radius": "custom case radius or half-width",
    "velocity": "custom case velocity: const:vx,vy,vz, rot:rate, normal:coef joined by '+'",
    "iso_levels": "isosurface levels for the final-time VTK",
    "vtk": "write VTK files (true/false)",
    "volume": "compute the volume error (true/false)",
    "strict_band": "fail when the exact zero band is empty at some step (true/false)",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file with a schema line")
    for key, flag in FLAG_KEYS.items():
        p.add_argument(flag, dest=key, default=None, metavar=key.upper(), help=HELP[key])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="eikls", description="Finite-volume level-set solver "
                                 "on polyhedral meshes with eikonal-based boundary conditions")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=f"eikls {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, desc in (("run", "one case and boundary mode over one or more levels"),
                       ("compare", "one case under several boundary modes"),
                       ("sweep", "every case x mode x level combination")):
        _add_run_flags(sub.add_parser(name, help=desc, description=desc))
    m = sub.add_parser("mesh", help="generate or check polymesh files")
    msub = m.add_subparsers(dest="mesh_command", required=True)
    g = msub.add_parser("gen", help="write a generated hexahedral mesh")
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--perturbation", type=float, default=0.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--box", default="-1.25,1.25", help="lo,hi applied to all axes")
    g.add_argument("--out", required=True, help="output file")
    c = msub.add_parser("check", help="load and validate a polymesh file")
    c.add_argument("--mesh", required=True)
    sub.add_parser("cases", help="list the case catalog")
    return ap


def _mesh_command(args) -> int:
    if args.mesh_command == "gen":
        try:
            lo, hi = (float(x) for x in args.box.split(","))
            mesh = build_hex_mesh((lo, hi), args.n, args.perturbation, args.seed)
        except ValueError as exc:
            raise ConfigError("mesh", str(exc)) from None
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        with open(args.out, "w") as fh:
            dump_poly_mesh(mesh, fh)
        print(json.dumps(mesh.summary(), indent=2))
        return EXIT_OK
    mesh = _load_mesh(args.mesh)
    print(json.dumps(mesh.summary(), indent=2))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "cases":
            for name, c in CASES.items():
                print(f"{name:4s} T={c.T:<4g} {c.description}")
            return EXIT_OK
        if args.command == "mesh":
            return _mesh_command(args)
        flags = {k: getattr(args, k) for k in FLAG_KEYS}
        cfg = resolve_config(flags, args.config)
        if args.command == "run":
            if len(cfg.case) != 1 or len(cfg.bc) != 1:
                raise ConfigError("case" if len(cfg.case) != 1 else "bc",
                                  "run takes a single case and mode; use sweep or compare")
            pairs = [(cfg.case[0], cfg.bc[0])]
        elif args.command == "compare":
            if len(cfg.case) != 1:
                raise ConfigError("case", "compare takes a single case")
            if len(cfg.bc) < 2:
                log.warning("compare with a single mode produces a single block")
            pairs = [(cfg.case[0], b) for b in cfg.bc]
        else:
            pairs = [(c, b) for c in cfg.case for b in cfg.bc]
        return _execute(cfg, args.command, pairs)
    except ConfigError as exc:
        print(f"eikls: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SOLVER_ERRORS as exc:
        print(f"eikls: solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
