"""Command-line pipeline: mesh, train, evaluate, sweep, ablate, plot.

Every command reads a JSON ``PipelineConfig`` and writes its artifacts below
the output directory.  Artifacts carry the config hash and seed; content
hashes in summaries exclude wall times so re-runs can be compared.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import CromError, MissingArtifact
from .fem import ComponentLibrary, build_space
from .geometry import build_library_meshes, validate_mesh, write_mesh
from .pod import (ComponentPod, collect_snapshots, component_pods, generate_training_configs,
                  load_snapshots, save_snapshots)
from .numkit import read_matrix, write_matrix
from .rom import RomLibrary
from .solvers import (FomSystem, RomSystem, build_topology, load_solution, reconstruct, relative_error,
                      save_solution)
from .svgplot import curve_plot, speed_heatmap

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = ("tensor", "eqp")
# fields left out of content hashes
TIMING_FIELDS = ("fom_time", "rom_time", "speedup")


@dataclass
class PipelineConfig:
    """Settings shared by all commands.

    The pipeline penalty defaults to 10, below the library default of 40:
    at the larger value the reduced bases lose accuracy at interfaces.
    """

    nu: float = 0.04
    n_edge: int = 8
    R_u: int = 40
    R_p: int = 40
    Z_p: int = 40
    delta: float = 0.01
    training_count: int = 100
    test_grids: list = field(default_factory=lambda: [2, 4, 8])
    test_count: int = 20
    seeds: dict = field(default_factory=lambda: {"train": 0, "test": 1})
    mode: str = "tensor"
    output_dir: str = "crom_output"
    penalty: float = 10.0
    fom_cap: int = 8
    max_modes: int = 80
    build_eqp: bool = True
    timing_repeats: int = 3
    sweep_sizes: list = field(default_factory=lambda: [10, 20, 40])
    sweep_grid: int = 4
    sweep_count: int = 5
    ablate_R_p: list = field(default_factory=lambda: [20, 40])
    ablate_Z_p: list = field(default_factory=lambda: [0, 20, 40, 60])
    ablate_grid: int = 4
    ablate_count: int = 4

    def __post_init__(self):
        self.seeds = {"train": 0, "test": 1, **dict(self.seeds)}
        self.validate()

    def validate(self):
        ints = ("n_edge", "R_u", "R_p", "training_count", "test_count", "max_modes", "timing_repeats",
                "sweep_grid", "sweep_count", "ablate_grid", "ablate_count", "fom_cap")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.Z_p < 0:
            raise ValueError("Z_p must be non-negative")
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must lie in (0, 1)")
        if self.nu <= 0 or self.penalty <= 0:
            raise ValueError("nu and penalty must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if any(int(g) < 1 for g in self.test_grids) or any(int(s) < 1 for s in self.sweep_sizes):
            raise ValueError("grid and basis sizes must be positive")
        if max(self.R_u, self.R_p, self.Z_p, *self.sweep_sizes, *self.ablate_R_p, *self.ablate_Z_p) > self.max_modes:
            raise ValueError("requested basis sizes exceed max_modes")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config fields: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self):
        return asdict(self)

    def hash(self):
        """Short sha256 of the canonical JSON, ignoring the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def library(self):
        return ComponentLibrary.default(self.n_edge, self.nu, self.penalty)


def _stamp(config, seed):
    return {"schema_version": SCHEMA_VERSION, "config_hash": config.hash(), "seed": seed}


def _write_json(path, data):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default))
    os.replace(tmp, path)


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def content_hash(rows):
    """sha256 of records with timing fields removed."""
    clean = [{k: v for k, v in r.items() if k not in TIMING_FIELDS} for r in rows]
    return hashlib.sha256(json.dumps(clean, sort_keys=True, default=_json_default).encode()).hexdigest()


def workers():
    """Worker cap from ``CROM_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("CROM_THREADS", "1")))
    except ValueError:
        return 1


def _map(fn, items):
    n = workers()
    if n == 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(n) as pool:
        return list(pool.map(fn, items))


# -- test cases -----------------------------------------------------------
@dataclass(frozen=True)
class EvalCase:
    case_id: str
    grid: tuple
    u_in: tuple


def make_cases(seed, size, count, names):
    """Random ``size x size`` layouts with inflow in ``U[-1, 1]^2``, one child seed per case."""
    out = []
    for k in range(count):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(size), k]))
        idx = rng.choice(len(names), size=(size, size))
        grid = tuple(tuple(names[i] for i in row) for row in idx)
        u_in = tuple(float(v) for v in rng.uniform(-1.0, 1.0, 2))
        out.append(EvalCase(f"g{size}_c{k:03d}", grid, u_in))
    return out


def timed_solve(system, u_in, repeats):
    """Solve ``repeats`` times; returns the last solution, report and median solve time."""
    times = []
    for _ in range(max(1, repeats)):
        sol, rep = system.solve(u_in)
        times.append(rep.solve_time)
    return sol, rep, float(np.median(times))


# -- bundle ---------------------------------------------------------------
class Bundle:
    """A trained bundle directory: reduced library plus POD data and snapshots."""

    def __init__(self, directory):
        self.dir = Path(directory)
        if not (self.dir / "rom" / "manifest.json").exists():
            raise MissingArtifact(f"{self.dir} is not a trained bundle")
        self.manifest = json.loads((self.dir / "rom" / "manifest.json").read_text())
        self.config = PipelineConfig.from_dict(self.manifest["config"])
        self._rom = None

    @property
    def rom(self):
        if self._rom is None:
            self._rom = RomLibrary.load(self.dir / "rom")
        return self._rom

    def pods(self):
        d = self.dir / "pods"
        info = json.loads((d / "manifest.json").read_text())
        out = {}
        for c in info["components"]:
            out[c] = ComponentPod(c, read_matrix(d / f"{c}_modes_u.mat"), read_matrix(d / f"{c}_modes_p.mat"),
                                  read_matrix(d / f"{c}_sigma_u.mat").ravel(),
                                  read_matrix(d / f"{c}_sigma_p.mat").ravel())
        return out

    def snapshots(self):
        if not (self.dir / "snapshots" / "manifest.json").exists():
            raise MissingArtifact(f"no snapshots in {self.dir}")
        return load_snapshots(self.dir / "snapshots")


def _save_pods(directory, pods):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for c, p in pods.items():
        write_matrix(d / f"{c}_modes_u.mat", p.modes_u)
        write_matrix(d / f"{c}_modes_p.mat", p.modes_p)
        write_matrix(d / f"{c}_sigma_u.mat", p.sigma_u)
        write_matrix(d / f"{c}_sigma_p.mat", p.sigma_p)
    _write_json(d / "manifest.json", {"format": "CROM-POD v1", "components": sorted(pods)})


def build_rom(library, pods, snapshots, R_u, R_p, Z_p, tensor=True, eqp=True, delta=0.01):
    """Reduced library from POD data truncated to ``(R_u, R_p, Z_p)``."""
    bases = {c: pods[c].basis(library.ops[c], R_u, R_p, Z_p) for c in library.names}
    states = None
    if eqp:
        states = {c: (bases[c].Phi_u.T @ snapshots.velocity[c]).T for c in library.names}
    return RomLibrary.build(library, bases, tensor=tensor, eqp_states=states, delta=delta)


def cmd_mesh(config, out):
    """Write the reference meshes with a validation report."""
    meshes = build_library_meshes(config.n_edge)
    d = Path(out) / "meshes"
    d.mkdir(parents=True, exist_ok=True)
    report = {}
    for name, mesh in meshes.items():
        write_mesh(mesh, d / f"{name}.mesh")
        problems = validate_mesh(mesh)
        if problems:
            raise CromError(f"mesh {name} is invalid: {problems[0]}")
        report[name] = {"vertices": len(mesh.vertices), "triangles": len(mesh.triangles),
                        "mesh_size": float(mesh.mesh_size)}
    _write_json(d / "manifest.json", {**_stamp(config, None), "n_edge": config.n_edge, "meshes": report})
    return d


def cmd_train(config, out, seed=None):
    """Train a bundle: snapshots, POD, supremizers, projected operators, tensor and EQP."""
    seed = config.seeds["train"] if seed is None else int(seed)
    out = Path(out)
    t0 = time.perf_counter()
    library = config.library()
    configs = generate_training_configs(seed, config.training_count)
    snaps = collect_snapshots(configs, library)
    t_snap = time.perf_counter() - t0
    missing = [c for c in library.names if snaps.count(c) == 0]
    if missing:
        raise CromError(f"no training snapshots for components {missing}; increase training_count")
    pods = component_pods(snaps, config.max_modes)
    t1 = time.perf_counter()
    rom = build_rom(library, pods, snaps, config.R_u, config.R_p, config.Z_p,
                    tensor=True, eqp=config.build_eqp, delta=config.delta)
    t_build = time.perf_counter() - t1
    save_snapshots(out / "snapshots", snaps, seed)
    _save_pods(out / "pods", pods)
    energy = {}
    for c, p in pods.items():
        e_u, e_p = p.sigma_u ** 2, p.sigma_p ** 2
        energy[c] = {
            "snapshots": snaps.count(c),
            "eps_u": float(1 - e_u[:config.R_u].sum() / e_u.sum()),
            "eps_p": float(1 - e_p[:config.R_p].sum() / e_p.sum()),
        }
    training = {"configs": len(configs), "failed": list(snaps.failed), "energy": energy}
    rom.save(out / "rom", extra={"config": config.to_dict(), **_stamp(config, seed), "training": training})
    _write_json(out / "timings.json", {"snapshots": t_snap, "build": t_build,
                                        "total": time.perf_counter() - t0})
    return out


# -- evaluation -----------------------------------------------------------
def _fmt(v):
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


RECORD_FIELDS = ("schema_version", "config_hash", "seed", "case_id", "grid", "u_in_x", "u_in_y", "mode",
                 "R_u", "R_p", "Z_p", "status", "velocity_error", "pressure_error", "fom_time", "rom_time",
                 "speedup", "fom_iterations", "rom_iterations", "n_q")


def write_records(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k)) for k in RECORD_FIELDS})
    os.replace(tmp, path)


def read_records(path):
    """Rows of a record CSV with numbers parsed and ``NA`` mapped to ``None``."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path))
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rec = {}
            for k, v in row.items():
                if v == "NA":
                    rec[k] = None
                    continue
                try:
                    rec[k] = int(v)
                except ValueError:
                    try:
                        rec[k] = float(v)
                    except ValueError:
                        rec[k] = v
            out.append(rec)
    return out


def mean_ci(values, z=1.959963984540054):
    """Mean and normal-approximation 95% confidence interval."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=float)
    if len(v) == 0:
        return {"n": 0, "mean": None, "ci_low": None, "ci_high": None}
    m = float(v.mean())
    h = float(z * v.std(ddof=1) / math.sqrt(len(v))) if len(v) > 1 else 0.0
    return {"n": int(len(v)), "mean": m, "ci_low": m - h, "ci_high": m + h}


def summarize(rows, keys=("grid", "mode")):
    groups = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    out = []
    for key, rs in sorted(groups.items(), key=lambda kv: tuple(str(x) for x in kv[0])):
        speed = [r["speedup"] for r in rs if r.get("speedup") is not None]
        rom_t = [r["rom_time"] for r in rs if r.get("rom_time") is not None]
        fom_t = [r["fom_time"] for r in rs if r.get("fom_time") is not None]
        out.append({
            **dict(zip(keys, key)),
            "cases": len(rs),
            "failed": sum(r["status"] != "ok" for r in rs),
            "velocity_error": mean_ci([r["velocity_error"] for r in rs]),
            "pressure_error": mean_ci([r["pressure_error"] for r in rs]),
            "median_speedup": float(np.median(speed)) if speed else None,
            "median_fom_time": float(np.median(fom_t)) if fom_t else None,
            "median_rom_time": float(np.median(rom_t)) if rom_t else None,
        })
    return out


def evaluate_case(case, library, rom, modes, config, fom_cap, repeats, seed, basis=None, fom=None,
                  solution_dir=None):
    """Evaluation records of one test case, one per advection mode.

    ``fom`` is an optional precomputed ``(solution, report, time)`` baseline.
    """
    size = len(case.grid)
    topo = build_topology(case.grid, names=library.spaces)
    base = {**_stamp(config, seed), "case_id": case.case_id, "grid": size,
            "u_in_x": case.u_in[0], "u_in_y": case.u_in[1]}
    R_u, R_p, Z_p = basis or (config.R_u, config.R_p, config.Z_p)
    fom_status = "skipped"
    if fom is None and size <= fom_cap:
        try:
            fom = timed_solve(FomSystem(topo, library), np.asarray(case.u_in), repeats)
            fom_status = "ok"
        except CromError as exc:
            log.warning("%s: full-order solve failed: %s", case.case_id, exc)
            fom_status = "fom_failed"
    elif fom is not None:
        fom_status = "ok"
    rows = []
    for mode in modes:
        row = {**base, "mode": mode, "R_u": R_u, "R_p": R_p, "Z_p": Z_p,
               "velocity_error": None, "pressure_error": None, "fom_time": None, "rom_time": None,
               "speedup": None, "fom_iterations": None, "rom_iterations": None, "n_q": None}
        if mode == "eqp":
            row["n_q"] = int(sum(rom.components[c].eqp.n_points for c in set(topo.cells)))
        if fom is not None:
            row["fom_time"] = fom[2]
            row["fom_iterations"] = fom[1].iterations
        try:
            system = RomSystem(topo, rom, mode)
            rs, rr, t = timed_solve(system, np.asarray(case.u_in), repeats)
        except CromError as exc:
            log.warning("%s (%s): reduced solve failed: %s", case.case_id, mode, exc)
            row["status"] = "rom_failed"
            rows.append(row)
            continue
        full = reconstruct(rs, rom)
        row["rom_time"] = t
        row["rom_iterations"] = rr.iterations
        row["status"] = "ok" if fom_status in ("ok", "skipped") else fom_status
        if fom is not None:
            ev, ep = relative_error(full, fom[0], library)
            row["velocity_error"], row["pressure_error"] = ev, ep
            row["speedup"] = fom[2] / t if t > 0 else None
        if solution_dir is not None:
            save_solution(Path(solution_dir) / f"{case.case_id}_{mode}", full, nu=library.nu, report=rr,
                          extra={"n_edge": config.n_edge, "case_id": case.case_id, "mode": mode})
        rows.append(row)
    return rows


def cmd_evaluate(config, bundle_dir, out, seed=None, mode=None, fom_cap=None, save_solutions=True):
    """Evaluate the bundle on random test arrays; writes ``records.csv`` and ``summary.json``."""
    bundle = Bundle(bundle_dir)
    _check_compatible(config, bundle.config)
    seed = config.seeds["test"] if seed is None else int(seed)
    mode = mode or config.mode
    fom_cap = config.fom_cap if fom_cap is None else int(fom_cap)
    modes = MODES if mode == "both" else (mode,)
    rom = bundle.rom
    if "eqp" in modes and any(rc.eqp is None for rc in rom.components.values()):
        raise MissingArtifact("bundle has no EQP rules; retrain with build_eqp")
    library = config.library()
    out = Path(out)
    sol_dir = out / "solutions" if save_solutions else None
    cases = [c for g in config.test_grids for c in make_cases(seed, g, config.test_count, library.names)]
    rows = [r for rs in _map(lambda c: evaluate_case(c, library, rom, modes, config, fom_cap,
                                                      config.timing_repeats, seed, solution_dir=sol_dir),
                              cases) for r in rs]
    write_records(out / "records.csv", rows)
    summary = {**_stamp(config, seed), "bundle_config_hash": bundle.manifest["config_hash"],
               "fom_cap": fom_cap, "groups": summarize(rows), "content_hash": content_hash(rows)}
    _write_json(out / "summary.json", summary)
    return rows, summary


def _check_compatible(config, trained):
    for name in ("nu", "n_edge", "penalty"):
        if getattr(config, name) != getattr(trained, name):
            raise CromError(f"config {name}={getattr(config, name)} differs from the bundle's "
                            f"{getattr(trained, name)}")


def _fixed_fom(cases, library, repeats):
    """Full-order baselines of a fixed case set; ``None`` where the solve failed."""
    def run(case):
        try:
            topo = build_topology(case.grid, names=library.spaces)
            return timed_solve(FomSystem(topo, library), np.asarray(case.u_in), repeats)
        except CromError as exc:
            log.warning("%s: full-order solve failed: %s", case.case_id, exc)
            return None
    return _map(run, cases)


def cmd_sweep(config, bundle_dir, out, sizes=None, seed=None):
    """Time and error of both advection modes versus basis size ``R_u = R_p = Z_p``."""
    bundle = Bundle(bundle_dir)
    _check_compatible(config, bundle.config)
    seed = config.seeds["test"] if seed is None else int(seed)
    sizes = sorted(int(s) for s in (sizes or config.sweep_sizes))
    library = config.library()
    pods, snaps = bundle.pods(), bundle.snapshots()
    cases = make_cases(seed, config.sweep_grid, config.sweep_count, library.names)
    foms = _fixed_fom(cases, library, config.timing_repeats)
    rows = []
    for s in sizes:
        rom = build_rom(library, pods, snaps, s, s, s, delta=config.delta)
        for case, fom in zip(cases, foms):
            if fom is None:
                continue
            rows.extend(evaluate_case(case, library, rom, MODES, config, config.fom_cap,
                                      config.timing_repeats, seed, basis=(s, s, s), fom=fom))
    out = Path(out)
    write_records(out / "sweep.csv", rows)
    _write_json(out / "sweep_summary.json", {**_stamp(config, seed), "sizes": sizes,
                                             "groups": summarize(rows, ("R_u", "mode")),
                                             "content_hash": content_hash(rows)})
    return rows


def cmd_ablate(config, bundle_dir, out, R_p_list=None, Z_p_list=None, seed=None):
    """Supremizer ablation: (velocity, pressure) error on a fixed test set per (R_p, Z_p)."""
    bundle = Bundle(bundle_dir)
    _check_compatible(config, bundle.config)
    seed = config.seeds["test"] if seed is None else int(seed)
    R_p_list = list(R_p_list or config.ablate_R_p)
    Z_p_list = list(Z_p_list or config.ablate_Z_p)
    library = config.library()
    pods, snaps = bundle.pods(), bundle.snapshots()
    cases = make_cases(seed, config.ablate_grid, config.ablate_count, library.names)
    foms = _fixed_fom(cases, library, 1)
    table = []
    for R_p in R_p_list:
        for Z_p in Z_p_list:
            rom = build_rom(library, pods, snaps, config.R_u, R_p, Z_p, eqp=config.mode == "eqp",
                            delta=config.delta)
            ev, ep, failed = [], [], 0
            for case, fom in zip(cases, foms):
                if fom is None:
                    continue
                rec = evaluate_case(case, library, rom, (config.mode,), config, config.fom_cap, 1, seed,
                                    basis=(config.R_u, R_p, Z_p), fom=fom)[0]
                if rec["status"] != "ok":
                    failed += 1
                else:
                    ev.append(rec["velocity_error"])
                    ep.append(rec["pressure_error"])
            diverged = failed > 0 or not ev
            table.append({"R_p": R_p, "Z_p": Z_p, "cases": len(ev) + failed, "diverged": failed,
                          "velocity_error": None if diverged else float(np.mean(ev)),
                          "pressure_error": None if diverged else float(np.mean(ep))})
    out = Path(out)
    _write_json(out / "ablation.json", {**_stamp(config, seed), "R_u": config.R_u, "mode": config.mode,
                                        "table": table, "content_hash": content_hash(table)})
    (out / "ablation.md").write_text(ablation_markdown(table, R_p_list, Z_p_list))
    return table


def ablation_markdown(table, R_p_list, Z_p_list):
    """Table of ``(velocity, pressure)`` relative errors in percent; diverged entries are N/A."""
    cell = {(r["R_p"], r["Z_p"]): r for r in table}
    lines = ["| R_p \\ Z_p | " + " | ".join(str(z) for z in Z_p_list) + " |",
             "|---" * (len(Z_p_list) + 1) + "|"]
    for R_p in R_p_list:
        entries = []
        for Z_p in Z_p_list:
            r = cell.get((R_p, Z_p))
            if r is None or r["velocity_error"] is None:
                entries.append("N/A")
            else:
                entries.append(f"({100 * r['velocity_error']:.3g}, {100 * r['pressure_error']:.3g})")
        lines.append(f"| {R_p} | " + " | ".join(entries) + " |")
    return "\n".join(lines) + "\n"


# -- plots ----------------------------------------------------------------
def sweep_curves(rows):
    """Error and time series per advection mode, keyed by basis size, with CI bounds."""
    err, tim = {}, {}
    for mode in MODES:
        rs = [r for r in rows if r["mode"] == mode and r["status"] == "ok"]
        sizes = sorted({r["R_u"] for r in rs})
        if not sizes:
            continue
        for target, key in ((err, "velocity_error"), (tim, "rom_time")):
            stats = [mean_ci([r[key] for r in rs if r["R_u"] == s]) for s in sizes]
            target[mode] = {"x": sizes, "y": [s["mean"] for s in stats],
                            "lo": [s["ci_low"] for s in stats], "hi": [s["ci_high"] for s in stats]}
    return err, tim


def heatmap_from_solution(directory, vmax=None):
    sol, manifest = load_solution(directory)
    if manifest.get("kind") != "full":
        raise CromError("heatmaps need reconstructed full-order solutions")
    n_edge = manifest.get("n_edge")
    if n_edge is None:
        raise MissingArtifact(f"{directory}: solution manifest lacks n_edge")
    meshes = build_library_meshes(int(n_edge))
    spaces = {c: build_space(meshes[c]) for c in set(sol.topology.cells)}
    title = f"speed {len(sol.topology.grid)}x{len(sol.topology.grid[0])}, u_in=({sol.u_in[0]:.2f}, {sol.u_in[1]:.2f})"
    return speed_heatmap(sol.topology, sol.u, spaces, vmax=vmax, title=title)


def cmd_plot(artifacts, out):
    """SVG files from solution directories (heatmaps) and sweep CSVs (curves)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for art in artifacts:
        path = Path(art)
        if not path.exists():
            raise MissingArtifact(str(path))
        if path.is_dir() and (path / "manifest.json").exists():
            svg = heatmap_from_solution(path)
            target = out / f"speed_{path.name}.svg"
            target.write_text(svg)
            written.append(target)
        elif path.is_dir() and (path / "sweep.csv").exists():
            written.extend(_plot_sweep(path / "sweep.csv", out))
        elif path.suffix == ".csv":
            written.extend(_plot_sweep(path, out))
        else:
            raise MissingArtifact(f"{path} is neither a solution directory nor a sweep CSV")
    return written


def _plot_sweep(csv_path, out):
    err, tim = sweep_curves(read_records(csv_path))
    a = out / "error_vs_basis.svg"
    b = out / "time_vs_basis.svg"
    a.write_text(curve_plot(err, "velocity error vs basis size", "basis size", "relative error", logy=True))
    b.write_text(curve_plot(tim, "reduced solve time vs basis size", "basis size", "seconds", logy=True))
    return [a, b]


# -- entry point ----------------------------------------------------------
def _parser():
    p = argparse.ArgumentParser(prog="crom", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, bundle=False):
        sp.add_argument("--config", type=Path, help="PipelineConfig JSON")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
        if bundle:
            sp.add_argument("--bundle", type=Path, help="trained bundle (default: OUT/bundle)")
        sp.add_argument("-v", "--verbose", action="store_true")

    common(sub.add_parser("mesh", help="generate and validate reference meshes"))
    common(sub.add_parser("train", help="collect snapshots and build the reduced bundle"))
    ev = sub.add_parser("evaluate", help="evaluate on random test arrays")
    common(ev, bundle=True)
    ev.add_argument("--mode", choices=(*MODES, "both"))
    ev.add_argument("--fom-cap", type=int)
    sw = sub.add_parser("sweep", help="error and time versus basis size")
    common(sw, bundle=True)
    sw.add_argument("--sizes", type=int, nargs="+")
    ab = sub.add_parser("ablate", help="supremizer ablation table")
    common(ab, bundle=True)
    ab.add_argument("--mode", choices=MODES)
    ab.add_argument("--R-p", type=int, nargs="+", dest="R_p")
    ab.add_argument("--Z-p", type=int, nargs="+", dest="Z_p")
    pl = sub.add_parser("plot", help="SVG plots from solutions and sweep results")
    pl.add_argument("artifacts", nargs="+", type=Path)
    pl.add_argument("--out", type=Path, required=True)
    pl.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.verb == "plot":
            for path in cmd_plot(args.artifacts, args.out):
                print(path)
            return 0
        config = PipelineConfig.load(args.config) if args.config else PipelineConfig()
        if getattr(args, "mode", None) in MODES and args.verb == "ablate":
            config.mode = args.mode
        out = Path(args.out or config.output_dir)
        bundle = getattr(args, "bundle", None) or out / "bundle"
        if args.verb == "mesh":
            print(cmd_mesh(config, out))
        elif args.verb == "train":
            print(cmd_train(config, out / "bundle", args.seed))
        elif args.verb == "evaluate":
            rows, summary = cmd_evaluate(config, bundle, out / "evaluate", args.seed, args.mode, args.fom_cap)
            for g in summary["groups"]:
                v = g["velocity_error"]
                mean = "NA" if v["mean"] is None else f"{v['mean']:.4f}"
                print(f"grid {g['grid']} {g['mode']}: cases {g['cases']} failed {g['failed']} "
                      f"velocity error {mean} speedup {g['median_speedup']}")
            if any(r["status"] != "ok" for r in rows):
                return 2
        elif args.verb == "sweep":
            rows = cmd_sweep(config, bundle, out / "sweep", args.sizes, args.seed)
            if any(r["status"] != "ok" for r in rows):
                return 2
        elif args.verb == "ablate":
            table = cmd_ablate(config, bundle, out / "ablate", args.R_p, args.Z_p, args.seed)
            print(ablation_markdown(table, args.R_p or config.ablate_R_p, args.Z_p or config.ablate_Z_p))
            if any(r["diverged"] for r in table):
                return 2
        return 0
    except (CromError, ValueError, OSError) as exc:
        print(f"crom {args.verb}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
