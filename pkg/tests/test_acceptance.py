"""Acceptance gates on the default desk-scale pipeline.

The session fixture trains the default configuration (100 random 2x2 arrays,
n_edge 8, R_u = R_p = Z_p = 40).  Set ``CROM_ACCEPTANCE_DIR`` to keep the
artifacts between runs; a bundle there is reused only if its config hash
matches.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from _mms import l2_errors, solve_mms
from _report import verdict
from crom.cli import Bundle, PipelineConfig, cmd_ablate, cmd_evaluate, cmd_train, make_cases
from crom.fem import ComponentLibrary, eval_advection
from crom.numkit import mgs_orthonormalize, nnls, svd_thin
from crom.pod import energy_criterion, identity_basis
from crom.rom import EqpRule, RomLibrary, eval_advection_eqp, eval_advection_tensor
from crom.solvers import (FomSystem, build_topology, load_solution, reconstruct, relative_error, solve_fom,
                          solve_rom)
from crom.svgplot import speed_heatmap

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    env = os.environ.get("CROM_ACCEPTANCE_DIR")
    if env:
        d = Path(env)
        d.mkdir(parents=True, exist_ok=True)
        return d
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def trained(workdir):
    config = PipelineConfig(output_dir=str(workdir))
    bdir = workdir / "bundle"
    t0 = time.perf_counter()
    manifest = bdir / "rom" / "manifest.json"
    if not (manifest.exists() and json.loads(manifest.read_text()).get("config_hash") == config.hash()):
        cmd_train(config, bdir)
    return config, Bundle(bdir), time.perf_counter() - t0


@pytest.fixture(scope="module")
def library(trained):
    return trained[0].library()


@pytest.fixture(scope="module")
def eval4(trained, workdir):
    """Both advection modes on 20 random 4x4 arrays with full-order baselines."""
    config, bundle, _ = trained
    cfg = PipelineConfig(**{**config.to_dict(), "test_grids": [4], "test_count": 20, "timing_repeats": 1})
    t0 = time.perf_counter()
    rows, summary = cmd_evaluate(cfg, bundle.dir, workdir / "eval4", mode="both")
    return rows, summary, workdir / "eval4" / "solutions", time.perf_counter() - t0


def test_criterion_1_tensor_exactness(trained, library):
    _, bundle, _ = trained
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for c, rc in bundle.rom.components.items():
        Phi = rc.basis.Phi_u
        for _ in range(10):
            u = rng.standard_normal(rc.dim_u)
            ref = Phi.T @ eval_advection(library.spaces[c], Phi @ u)
            worst = max(worst, np.linalg.norm(eval_advection_tensor(rc.tensor, u) - ref) / np.linalg.norm(ref))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 60
    verdict(1, ok, f"max relative tensor error {worst:.2e} (limit 1e-10), {elapsed:.1f}s")
    assert ok


def test_criterion_2_eqp_fidelity(trained, eval4):
    _, bundle, _ = trained
    rows, summary, sol_dir, elapsed = eval4
    snaps = bundle.snapshots()
    worst_train = 0.0
    for c, rc in bundle.rom.components.items():
        states = (rc.basis.Phi_u.T @ snaps.velocity[c]).T
        exact = eval_advection_tensor(rc.tensor, states)
        approx = eval_advection_eqp(rc.eqp, states)
        worst_train = max(worst_train, np.linalg.norm(approx - exact) / np.linalg.norm(exact))
    library = bundle.config.library()
    diffs = []
    for case in sorted({r["case_id"] for r in rows}):
        a, b = sol_dir / f"{case}_tensor", sol_dir / f"{case}_eqp"
        if a.exists() and b.exists():
            diffs.append(relative_error(load_solution(b)[0], load_solution(a)[0], library)[0])
    worst_test = max(diffs) if diffs else float("inf")
    n_q = {c: rc.eqp.n_points for c, rc in bundle.rom.components.items()}
    ok = worst_train <= 0.01 and worst_test <= 0.01 and len(diffs) >= 20 and elapsed < 1200
    verdict(2, ok, f"training discrepancy {worst_train:.4f}, max 4x4 tensor/EQP difference {worst_test:.4f} "
                   f"over {len(diffs)} cases (limits 0.01), N_q {n_q}, {elapsed:.0f}s")
    assert ok


def test_criterion_3_scale_up_accuracy(trained, eval4):
    _, _, t_train = trained
    rows, summary, _, elapsed = eval4
    errs = [r["velocity_error"] for r in rows if r["mode"] == "tensor" and r["velocity_error"] is not None]
    mean = float(np.mean(errs)) if errs else float("inf")
    g = next(g for g in summary["groups"] if g["mode"] == "tensor")
    ci = g["velocity_error"]
    ok = len(errs) >= 20 and mean <= 0.05 and t_train + elapsed < 7200
    verdict(3, ok, f"mean 4x4 velocity error {mean:.4f} [{ci['ci_low']:.4f}, {ci['ci_high']:.4f}] over "
                   f"{len(errs)} cases (limit 0.05), pressure {g['pressure_error']['mean']:.4f}")
    assert ok


def test_criterion_4_speedup(trained, workdir):
    config, bundle, _ = trained
    cfg = PipelineConfig(**{**config.to_dict(), "test_grids": [8], "test_count": 3, "timing_repeats": 3})
    t0 = time.perf_counter()
    rows, summary = cmd_evaluate(cfg, bundle.dir, workdir / "eval8", mode="tensor", save_solutions=False)
    elapsed = time.perf_counter() - t0
    speed = [r["speedup"] for r in rows if r["speedup"] is not None]
    med = float(np.median(speed)) if len(speed) == 3 else 0.0
    g = summary["groups"][0]
    ok = med >= 5.0 and elapsed < 7200
    verdict(4, ok, f"median 8x8 speedup {med:.1f}x (limit 5x), FOM {g['median_fom_time']:.2f}s, "
                   f"ROM {g['median_rom_time']:.3f}s")
    assert ok


def test_criterion_5_supremizer_ablation(trained, workdir):
    config, bundle, _ = trained
    t0 = time.perf_counter()
    table = cmd_ablate(config, bundle.dir, workdir / "ablate", [20, 40], [0, 20, 40, 60])
    elapsed = time.perf_counter() - t0
    cell = {(r["R_p"], r["Z_p"]): r for r in table}
    checks, notes = [], []
    for R_p in (20, 40):
        hi, lo = cell[(R_p, R_p - 20)]["pressure_error"], cell[(R_p, R_p)]["pressure_error"]
        ratio = (hi / lo) if (hi is not None and lo) else (float("inf") if hi is None else 0.0)
        vel = [cell[(R_p, z)]["velocity_error"] for z in (0, 20, 40, 60) if z >= R_p]
        spread = ((max(vel) - min(vel)) / min(vel)) if all(v is not None for v in vel) else float("inf")
        checks += [ratio >= 10.0, spread < 0.3]
        notes.append(f"R_p={R_p}: pressure ratio {ratio:.1f} (limit 10), velocity spread {100 * spread:.1f}% "
                     f"(limit 30%)")
    ok = all(checks) and elapsed < 3600
    verdict(5, ok, "; ".join(notes) + f", {elapsed:.0f}s")
    assert ok


def test_criterion_6_energy_identity(trained):
    config, bundle, _ = trained
    snaps, pods = bundle.snapshots(), bundle.pods()
    worst = 0.0
    achieved = {}
    for c, p in pods.items():
        for S, modes, sigma, R in ((snaps.velocity[c], p.modes_u, p.sigma_u, config.R_u),
                                   (snaps.pressure[c], p.modes_p, p.sigma_p, config.R_p)):
            Phi = modes[:, :R]
            direct = np.linalg.norm(S - Phi @ (Phi.T @ S)) ** 2 / np.linalg.norm(S) ** 2
            eps = energy_criterion(sigma ** 2, R)
            worst = max(worst, abs(direct - eps))
        achieved[c] = f"{energy_criterion(p.sigma_u ** 2, config.R_u):.1e}"
    ok = worst <= 1e-8
    verdict(6, ok, f"max |eps_R - projection error| {worst:.1e} (limit 1e-8); velocity eps at R=40 {achieved}")
    assert ok


def test_criterion_7_fom_verification(trained):
    config = trained[0]
    t0 = time.perf_counter()
    errs = []
    for n in (8, 16, 32):
        lib, sol, rep = solve_mms(n, nu=config.nu, sigma=config.penalty)
        errs.append(l2_errors(lib, sol))
    eu, ep = np.array(errs).T
    ru = np.log2(eu[:-1] / eu[1:])
    rp = np.log2(ep[:-1] / ep[1:])
    lib = ComponentLibrary.default(config.n_edge, config.nu, config.penalty)
    topo = build_topology([["empty", "empty"], ["empty", "empty"]])
    sol, _ = solve_fom(topo, lib, np.array([0.6, -0.8]))
    res = FomSystem(topo, lib).residual_norm(sol)
    elapsed = time.perf_counter() - t0
    ok = (np.all(np.abs(ru - 3.0) <= 0.3) and np.all(np.abs(rp - 2.0) <= 0.3) and res <= 1e-8
          and elapsed < 1800)
    verdict(7, ok, f"velocity rates {np.round(ru, 2).tolist()}, pressure rates {np.round(rp, 2).tolist()}, "
                   f"uniform-flow residual {res:.1e}")
    assert ok


def test_criterion_8_kernels():
    t0 = time.perf_counter()
    rng = np.random.default_rng(808)
    kkt = 0.0
    for _ in range(50):
        m, n = rng.integers(5, 60, size=2)
        G, b = rng.standard_normal((m, n)), rng.standard_normal(m)
        w = nnls(G, b).weights
        g = G.T @ (b - G @ w)
        scale = np.linalg.norm(G.T @ b)
        viol = max(0.0, -w.min(), g.max(), np.abs(g[w > 0]).max() if np.any(w > 0) else 0.0)
        kkt = max(kkt, viol / scale)
    svd_err = mgs_err = 0.0
    for _ in range(20):
        A = rng.standard_normal((80, 30)) @ np.diag(np.logspace(0, -4, 30))
        U, s, Vt = svd_thin(A)
        svd_err = max(svd_err, np.linalg.norm(U * s @ Vt - A) / np.linalg.norm(A))
        Q, _ = mgs_orthonormalize(rng.standard_normal((200, 40)))
        mgs_err = max(mgs_err, np.abs(Q.T @ Q - np.eye(Q.shape[1])).max())
    lib = ComponentLibrary.default(4)
    bases = {c: identity_basis(lib.ops[c]) for c in lib.names}
    rom = RomLibrary.build(lib, bases, tensor=False)
    for c in lib.names:
        rom.components[c].eqp = EqpRule.full(lib.spaces[c], bases[c].Phi_u)
    topo = build_topology([["circle", "star"], ["triangle", "square"]])
    fs, _ = solve_fom(topo, lib, np.array([0.9, 0.4]))
    rs, _ = solve_rom(topo, rom, fs.u_in, mode="eqp")
    ev, ep = relative_error(reconstruct(rs, rom), fs, lib)
    elapsed = time.perf_counter() - t0
    ok = kkt <= 1e-8 and svd_err <= 1e-10 and mgs_err <= 1e-12 and max(ev, ep) <= 1e-8 and elapsed < 600
    verdict(8, ok, f"NNLS KKT {kkt:.1e}, SVD {svd_err:.1e}, MGS {mgs_err:.1e}, identity ROM vs FOM "
                   f"({ev:.1e}, {ep:.1e})")
    assert ok


def test_criterion_9_large_rom_demo(trained, library, workdir):
    config, bundle, _ = trained
    t0 = time.perf_counter()
    case = make_cases(config.seeds["test"], 16, 1, library.names)[0]
    topo = build_topology(case.grid, names=library.spaces)
    rs, rep = solve_rom(topo, bundle.rom, np.asarray(case.u_in), mode=config.mode)
    full = reconstruct(rs, bundle.rom)
    svg = speed_heatmap(topo, full.u, library.spaces, title="16x16 reduced solution")
    path = workdir / "speed_16x16.svg"
    path.write_text(svg)
    n_tri = sum(len(library.spaces[c].mesh.triangles) for c in topo.cells)
    elapsed = time.perf_counter() - t0
    ok = (rep.status == "converged" and rep.residual_history[-1] <= 1e-8 and svg.count("<polygon") == n_tri
          and elapsed < 1800)
    verdict(9, ok, f"16x16 ROM {rep.status} in {rep.iterations} Newton steps ({rep.solve_time:.2f}s), "
                   f"SVG with {n_tri} triangles written")
    assert ok
