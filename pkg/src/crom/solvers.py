"""Global full-order and reduced-order solves over arrays of components.

A global system stacks, per cell, the velocity and pressure blocks
``[u_0, p_0, u_1, p_1, ..., lambda]`` where ``lambda`` is the multiplier
enforcing zero mean pressure.  Both models are solved with damped Newton
iterations started from the Stokes solution.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, MaxIterations, MissingArtifact, NewtonDivergence, UnknownComponent
from .fem import advection_jacobian_local, advection_pattern, eval_advection, load_vector
from .numkit import BlockGridSolver, Factorization, read_matrix, write_matrix
from .rom import eqp_jacobian, eval_advection_eqp, eval_advection_tensor, tensor_jacobian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GlobalTopology:
    """``grid[i][j]`` is the component occupying ``[j, j+1] x [i, i+1]``."""

    grid: tuple
    interfaces: tuple  # (m, n, face_m, face_n)
    exterior: tuple    # (m, face)

    @property
    def shape(self):
        return len(self.grid), len(self.grid[0])

    @property
    def cells(self):
        return [c for row in self.grid for c in row]

    @property
    def n_cells(self):
        return len(self.grid) * len(self.grid[0])

    def origin(self, m):
        rows, cols = self.shape
        return np.array([m % cols, m // cols], dtype=float)

    def exterior_faces(self, m):
        return [f for (c, f) in self.exterior if c == m]


def build_topology(grid, names=None):
    """Topology of an ``M x N`` array; ``grid`` is a nested list of component ids."""
    grid = tuple(tuple(str(c) for c in row) for row in grid)
    if not grid or not grid[0] or any(len(r) != len(grid[0]) for r in grid):
        raise ValueError("grid must be a non-empty rectangular array")
    if names is not None:
        for c in (c for row in grid for c in row):
            if c not in names:
                raise UnknownComponent(c)
    M, N = len(grid), len(grid[0])
    interfaces = []
    exterior = []
    for i in range(M):
        for j in range(N):
            m = i * N + j
            if j + 1 < N:
                interfaces.append((m, m + 1, "east", "west"))
            if i + 1 < M:
                interfaces.append((m, m + N, "north", "south"))
            if i == 0:
                exterior.append((m, "south"))
            if i == M - 1:
                exterior.append((m, "north"))
            if j == 0:
                exterior.append((m, "west"))
            if j == N - 1:
                exterior.append((m, "east"))
    return GlobalTopology(grid, tuple(interfaces), tuple(exterior))


@dataclass
class NewtonConfig:
    tol: float = 1e-8
    max_iter: int = 50
    max_halvings: int = 10


@dataclass
class SolveReport:
    status: str
    iterations: int
    residual_history: list
    times: dict
    n_dofs: int
    extra: dict = field(default_factory=dict)

    @property
    def solve_time(self):
        return self.times.get("total", 0.0)

    def as_dict(self):
        return {
            "status": self.status,
            "iterations": self.iterations,
            "residual_history": [float(r) for r in self.residual_history],
            "times": {k: float(v) for k, v in self.times.items()},
            "n_dofs": self.n_dofs,
            **self.extra,
        }


@dataclass
class GlobalSolution:
    """Per-cell coefficient blocks; ``kind`` is ``'full'`` or ``'reduced'``."""

    topology: GlobalTopology
    u: list
    p: list
    u_in: np.ndarray
    gauge: float = 0.0
    kind: str = "full"


class PatternedMatrix:
    """Sparse matrix with a fixed pattern: static values plus per-call dynamic values.

    Entries outside ``keep`` rows/columns are discarded, which restricts the
    operator to free unknowns without re-slicing on every call.
    """

    def __init__(self, n, static, dyn_rows, dyn_cols, free):
        rows, cols, vals = static
        index = -np.ones(n, dtype=np.int64)
        index[free] = np.arange(len(free))
        nf = len(free)
        r_s, c_s = index[rows], index[cols]
        ok_s = (r_s >= 0) & (c_s >= 0)
        r_d, c_d = index[dyn_rows], index[dyn_cols]
        self.ok_d = (r_d >= 0) & (c_d >= 0)
        all_r = np.concatenate([r_s[ok_s], r_d[self.ok_d]])
        all_c = np.concatenate([c_s[ok_s], c_d[self.ok_d]])
        key = all_r * nf + all_c
        ukeys, pos = np.unique(key, return_inverse=True)
        pos = pos.ravel()
        n_s = int(ok_s.sum())
        self.pos_d = pos[n_s:]
        self.base = np.bincount(pos[:n_s], weights=vals[ok_s], minlength=len(ukeys))
        r_u = ukeys // nf
        self.indices = (ukeys % nf).astype(np.int64)
        self.indptr = np.searchsorted(r_u, np.arange(nf + 1)).astype(np.int64)
        self.shape = (nf, nf)

    def matrix(self, dyn_vals=None):
        data = self.base.copy()
        if dyn_vals is not None:
            data += np.bincount(self.pos_d, weights=dyn_vals[self.ok_d], minlength=len(data))
        return sp.csr_matrix((data, self.indices, self.indptr), shape=self.shape)


def newton_solve(residual, jacobian, z0, scale, config, times, factorize=None):
    """Damped Newton iteration on free unknowns.

    Steps are halved up to ``config.max_halvings`` times until the residual
    norm decreases; converged when ``||R|| <= tol * scale``.  ``factorize``
    turns the value returned by ``jacobian`` into an object with ``solve``.
    """
    factorize = factorize or fom_factorization
    z = z0
    r = residual(z)
    rn = np.linalg.norm(r)
    history = [rn]
    target = config.tol * scale
    for it in range(config.max_iter + 1):
        if rn <= target:
            return z, history, it
        if it == config.max_iter:
            break
        t0 = time.perf_counter()
        J = jacobian(z)
        t1 = time.perf_counter()
        fac = factorize(J)
        t2 = time.perf_counter()
        dz = fac.solve(-r)
        times["assembly"] += t1 - t0
        times["factorization"] += t2 - t1
        step = 1.0
        for _ in range(config.max_halvings + 1):
            z_try = z + step * dz
            r_try = residual(z_try)
            rn_try = np.linalg.norm(r_try)
            if rn_try < rn:
                break
            step *= 0.5
        else:
            raise NewtonDivergence(
                f"residual {rn:.3e} not reduced after {config.max_halvings} halvings",
                report={"history": history + [rn_try], "iterations": it},
            )
        z, r, rn = z_try, r_try, rn_try
        history.append(rn)
    raise MaxIterations(
        f"no convergence in {config.max_iter} Newton iterations (residual {rn:.3e})",
        report={"history": history, "iterations": config.max_iter},
    )


def fom_factorization(J):
    """Sparse LU used for every full-order Newton system."""
    return Factorization(J, **FOM_LU_OPTIONS)


# SuperLU settings for the full-order saddle-point systems: COLAMD column
# ordering with a relaxed diagonal pivot threshold was the fastest stable
# choice on the array sizes used here.
FOM_LU_OPTIONS = {"permc_spec": "COLAMD", "diag_pivot_thresh": 0.01}


class FomSystem:
    """Coupled full-order system of one topology.

    ``bc='weak'`` treats exterior faces with Nitsche terms (the formulation
    the reduced models are projected from); ``bc='strong'`` fixes the
    exterior-face velocity dofs instead.  ``forcing(x, y)`` is a body force
    in global coordinates.
    """

    def __init__(self, topology, library, bc="weak", forcing=None):
        t0 = time.perf_counter()
        if bc not in ("weak", "strong"):
            raise ValueError(f"unknown boundary mode {bc!r}")
        self.topology = topology
        self.library = library
        self.bc = bc
        cells = topology.cells
        for c in cells:
            if c not in library.spaces:
                raise UnknownComponent(c)
        self.cells = cells
        off_u, off_p = [], []
        pos = 0
        for c in cells:
            sp_ = library.spaces[c]
            off_u.append(pos)
            off_p.append(pos + sp_.n_u)
            pos += sp_.n_u + sp_.n_p
        self.off_u = np.array(off_u)
        self.off_p = np.array(off_p)
        self.i_gauge = pos
        self.n = pos + 1

        rows, cols, vals = [], [], []

        def add(r0, c0, mat):
            m = sp.coo_matrix(mat)
            rows.append(m.row + r0)
            cols.append(m.col + c0)
            vals.append(m.data)

        self.F_const = np.zeros(self.n)
        self.F_g = np.zeros((self.n, 2))
        fixed = []
        fixed_strong = []
        lam = self.i_gauge
        for m, c in enumerate(cells):
            ops = library.ops[c]
            um, pm = self.off_u[m], self.off_p[m]
            add(um, um, ops.K)
            BT = ops.B.T
            add(um, pm, -BT)
            add(pm, um, -ops.B)
            add(pm, lam, ops.p_mass[:, None])
            add(lam, pm, ops.p_mass[None, :])
            fixed.append(um + ops.space.obstacle_dofs)
            if forcing is not None:
                ox, oy = topology.origin(m)
                self.F_const[um:um + ops.space.n_u] += load_vector(
                    ops.space, lambda x, y: forcing(x + ox, y + oy)
                )
        for (m, n, fm, fn) in topology.interfaces:
            blk = library.interface(cells[m], cells[n], fm)
            um, pm, un, pn = self.off_u[m], self.off_p[m], self.off_u[n], self.off_p[n]
            add(um, um, blk.K_mm); add(um, un, blk.K_mn)
            add(un, um, blk.K_nm); add(un, un, blk.K_nn)
            add(um, pm, blk.G_mm); add(um, pn, blk.G_mn)
            add(un, pm, blk.G_nm); add(un, pn, blk.G_nn)
            add(pm, um, blk.G_mm.T); add(pm, un, blk.G_nm.T)
            add(pn, um, blk.G_mn.T); add(pn, un, blk.G_nn.T)
        for (m, f) in topology.exterior:
            ops = library.ops[cells[m]]
            um, pm = self.off_u[m], self.off_p[m]
            if bc == "weak":
                ext = ops.exterior[f]
                add(um, um, ext.K)
                add(um, pm, ext.G)
                add(pm, um, ext.G.T)
                self.F_g[um:um + ops.space.n_u] += ext.L_mom
                self.F_g[pm:pm + ops.space.n_p] += ext.L_cont
            else:
                fixed_strong.append(um + ops.space.face_dofs(f))
        static = (np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
        self.A = sp.coo_matrix((static[2], (static[0], static[1])), shape=(self.n, self.n)).tocsr()
        obst = np.concatenate(fixed)
        strong = np.concatenate(fixed_strong) if fixed_strong else np.zeros(0, dtype=np.int64)
        self.fixed_zero = np.setdiff1d(np.unique(obst), strong)
        self.fixed_g = np.unique(strong)
        is_fixed = np.zeros(self.n, dtype=bool)
        is_fixed[self.fixed_zero] = True
        is_fixed[self.fixed_g] = True
        self.free = np.flatnonzero(~is_fixed)
        # component index (0 = x, 1 = y) for strongly fixed dofs
        self._g_comp = np.zeros(len(self.fixed_g), dtype=np.int64)
        for k, d in enumerate(self.fixed_g):
            m = np.searchsorted(self.off_u, d, side="right") - 1
            nn = library.spaces[cells[m]].n_nodes
            self._g_comp[k] = (d - self.off_u[m]) // nn

        self._groups = {}
        dyn_r, dyn_c = [], []
        for c in dict.fromkeys(cells):
            idx = np.array([m for m, cc in enumerate(cells) if cc == c])
            space = library.spaces[c]
            pr, pc = advection_pattern(space)
            offs = self.off_u[idx]
            dyn_r.append((offs[:, None] + pr[None]).ravel())
            dyn_c.append((offs[:, None] + pc[None]).ravel())
            gather = offs[:, None] + np.arange(space.n_u)[None]
            self._groups[c] = (idx, gather, space)
        self.jac = PatternedMatrix(self.n, static, np.concatenate(dyn_r), np.concatenate(dyn_c), self.free)
        self.assembly_time = time.perf_counter() - t0

    @property
    def n_dofs(self):
        return len(self.free) + 0

    def rhs(self, u_in):
        return self.F_const + self.F_g @ np.asarray(u_in, dtype=float)

    def advection(self, x):
        out = np.zeros(self.n)
        for idx, gather, space in self._groups.values():
            out[gather] += eval_advection(space, x[gather])
        return out

    def advection_jacobian_values(self, x):
        return np.concatenate(
            [advection_jacobian_local(space, x[gather]).ravel() for idx, gather, space in self._groups.values()]
        )

    def full_vector(self, z, u_in):
        x = np.zeros(self.n)
        x[self.free] = z
        x[self.fixed_g] = np.asarray(u_in, dtype=float)[self._g_comp]
        return x

    def solve(self, u_in, config=None, initial=None):
        config = config or NewtonConfig()
        g = np.asarray(u_in, dtype=float)
        times = {"assembly": 0.0, "factorization": 0.0, "stokes": 0.0}
        t_start = time.perf_counter()
        F = self.rhs(g)
        x_fix = self.full_vector(np.zeros(len(self.free)), g)
        F_free = (F - self.A @ x_fix)[self.free]
        scale = np.linalg.norm(F_free)
        if initial is None:
            t0 = time.perf_counter()
            z0 = fom_factorization(self.jac.matrix()).solve(F_free) if scale > 0 else np.zeros(len(self.free))
            times["stokes"] = time.perf_counter() - t0
        else:
            z0 = initial

        def residual(z):
            x = self.full_vector(z, g)
            return (self.A @ x + self.advection(x) - F)[self.free]

        def jacobian(z):
            return self.jac.matrix(self.advection_jacobian_values(self.full_vector(z, g)))

        z, history, it = newton_solve(residual, jacobian, z0, max(scale, np.finfo(float).tiny), config, times)
        times["total"] = time.perf_counter() - t_start
        x = self.full_vector(z, g)
        report = SolveReport("converged", it, history, times, len(self.free), {"setup": self.assembly_time})
        return self.split(x, g), report

    def split(self, x, u_in):
        u, p = [], []
        for m, c in enumerate(self.cells):
            sp_ = self.library.spaces[c]
            u.append(x[self.off_u[m]:self.off_u[m] + sp_.n_u].copy())
            p.append(x[self.off_p[m]:self.off_p[m] + sp_.n_p].copy())
        return GlobalSolution(self.topology, u, p, np.asarray(u_in, dtype=float), float(x[self.i_gauge]), "full")

    def pack(self, sol):
        x = np.zeros(self.n)
        for m in range(len(self.cells)):
            x[self.off_u[m]:self.off_u[m] + len(sol.u[m])] = sol.u[m]
            x[self.off_p[m]:self.off_p[m] + len(sol.p[m])] = sol.p[m]
        x[self.i_gauge] = sol.gauge
        return x

    def residual_norm(self, sol):
        """Relative residual of a full-order solution (free rows)."""
        x = self.pack(sol)
        F = self.rhs(sol.u_in)
        r = (self.A @ x + self.advection(x) - F)[self.free]
        x_fix = self.full_vector(np.zeros(len(self.free)), sol.u_in)
        scale = np.linalg.norm((F - self.A @ x_fix)[self.free])
        return float(np.linalg.norm(r) / max(scale, np.finfo(float).tiny))


def solve_fom(topology, library, u_in, config=None, bc="weak", forcing=None):
    system = FomSystem(topology, library, bc=bc, forcing=forcing)
    return system.solve(u_in, config)


def pressure_mean(sol, library):
    total = sum(library.ops[c].p_mass @ p for c, p in zip(sol.topology.cells, sol.p))
    area = sum(library.ops[c].p_mass.sum() for c in sol.topology.cells)
    return total / area


def relative_error(a, b, library):
    """Mass-weighted L2 relative errors ``(velocity, pressure)`` of ``a`` against ``b``.

    Pressures are compared after removing their global means.
    """
    if a.topology.grid != b.topology.grid:
        raise DimensionMismatch("solutions live on different topologies")
    if a.kind != "full" or b.kind != "full":
        raise DimensionMismatch("reconstruct reduced solutions before comparing")
    ma, mb = pressure_mean(a, library), pressure_mean(b, library)
    du = nu_ = dp = np_ = 0.0
    for c, ua, ub, pa, pb in zip(a.topology.cells, a.u, b.u, a.p, b.p):
        if len(ua) != len(ub) or len(pa) != len(pb):
            raise DimensionMismatch("per-cell block sizes differ")
        ops = library.ops[c]
        d = ua - ub
        du += d @ (ops.M_u @ d)
        nu_ += ub @ (ops.M_u @ ub)
        e = (pa - ma) - (pb - mb)
        q = pb - mb
        dp += e @ (ops.M_p @ e)
        np_ += q @ (ops.M_p @ q)
    ev = np.sqrt(du / nu_) if nu_ > 0 else np.sqrt(du)
    ep = np.sqrt(dp / np_) if np_ > 0 else np.sqrt(dp)
    return float(ev), float(ep)


class RomSystem:
    """Global reduced system of one topology.

    Unknowns per cell are ``[u_hat_m, p_hat_m]`` followed by a single gauge
    multiplier.  Static blocks are assembled once by lookup in the reduced
    library; only the diagonal advection Jacobians change between Newton
    steps.  ``mode`` selects the advection evaluator (``'tensor'`` or
    ``'eqp'``).
    """

    def __init__(self, topology, rom, mode="tensor"):
        t0 = time.perf_counter()
        if mode not in ("tensor", "eqp"):
            raise ValueError(f"unknown advection mode {mode!r}")
        self.topology = topology
        self.rom = rom
        self.mode = mode
        cells = topology.cells
        for c in cells:
            if c not in rom.components:
                raise UnknownComponent(c)
            rc = rom.components[c]
            if mode == "tensor" and rc.tensor is None:
                raise DimensionMismatch(f"component {c} has no advection tensor")
            if mode == "eqp" and rc.eqp is None:
                raise DimensionMismatch(f"component {c} has no EQP rule")
        self.cells = cells
        comps = [rom.components[c] for c in cells]
        self.ru = np.array([rc.dim_u for rc in comps])
        self.rp = np.array([rc.dim_p for rc in comps])
        sizes = self.ru + self.rp
        self.solver = BlockGridSolver(topology.shape, sizes, leaf_cells=1)
        self.offsets = self.solver.offsets
        self.n = self.solver.n

        diag = []
        for m, rc in enumerate(comps):
            Ru = rc.dim_u
            D = np.zeros((sizes[m], sizes[m]))
            D[:Ru, :Ru] = rc.K
            D[:Ru, Ru:] = -rc.B.T
            D[Ru:, :Ru] = -rc.B
            diag.append(D)
        off = {}
        self.F_g = np.zeros((self.n, 2))
        for (m, n, fm, fn) in topology.interfaces:
            blk = rom.interface(cells[m], cells[n], fm)
            rm, rn = self.ru[m], self.ru[n]
            Dm, Dn = diag[m], diag[n]
            Dm[:rm, :rm] += blk.K_mm
            Dm[:rm, rm:] += blk.G_mm
            Dm[rm:, :rm] += blk.G_mm.T
            Dn[:rn, :rn] += blk.K_nn
            Dn[:rn, rn:] += blk.G_nn
            Dn[rn:, :rn] += blk.G_nn.T
            O = np.zeros((sizes[m], sizes[n]))
            O[:rm, :rn] = blk.K_mn
            O[:rm, rn:] = blk.G_mn
            O[rm:, :rn] = blk.G_nm.T
            off[(m, n)] = O
            O = np.zeros((sizes[n], sizes[m]))
            O[:rn, :rm] = blk.K_nm
            O[:rn, rm:] = blk.G_nm
            O[rn:, :rm] = blk.G_mn.T
            off[(n, m)] = O
        for (m, f) in topology.exterior:
            K, G, Lm, Lc = comps[m].exterior[f]
            r = self.ru[m]
            D = diag[m]
            D[:r, :r] += K
            D[:r, r:] += G
            D[r:, :r] += G.T
            a = self.offsets[m]
            self.F_g[a:a + r] += Lm
            self.F_g[a + r:a + sizes[m]] += Lc
        self.diag_static = diag
        self.off = off
        self.border = [np.concatenate([np.zeros(rc.dim_u), rc.p_mass]) for rc in comps]

        # cells grouped by component for batched advection evaluation
        self._groups = {}
        for c in dict.fromkeys(cells):
            idx = np.array([m for m, cc in enumerate(cells) if cc == c])
            r = rom.components[c].dim_u
            gather = self.offsets[idx][:, None] + np.arange(r)[None]
            self._groups[c] = (idx, gather)
        self.assembly_time = time.perf_counter() - t0

    @property
    def n_dofs(self):
        return self.n

    def rhs(self, u_in):
        return self.F_g @ np.asarray(u_in, dtype=float)

    def linear_apply(self, x):
        y = np.empty(self.n)
        lam = x[-1]
        o = self.offsets
        for m in range(len(self.cells)):
            a, b = o[m], o[m + 1]
            ym = self.diag_static[m] @ x[a:b] + self.border[m] * lam
            for n in self.solver.neighbors(m):
                if n < len(self.cells):
                    ym += self.off[(m, n)] @ x[o[n]:o[n + 1]]
            y[a:b] = ym
        y[-1] = sum(self.border[m] @ x[o[m]:o[m + 1]] for m in range(len(self.cells)))
        return y

    def _advection(self, c, U):
        rc = self.rom.components[c]
        if self.mode == "tensor":
            return eval_advection_tensor(rc.tensor, U)
        return eval_advection_eqp(rc.eqp, U)

    def _advection_jacobian(self, c, U):
        rc = self.rom.components[c]
        if self.mode == "tensor":
            return tensor_jacobian(rc.tensor, U, self.rom.swapped_tensor(c))
        return eqp_jacobian(rc.eqp, U)

    def advection(self, x):
        out = np.zeros(self.n)
        for c, (idx, gather) in self._groups.items():
            out[gather] = self._advection(c, x[gather])
        return out

    def jacobian_blocks(self, x):
        diag = [D.copy() for D in self.diag_static]
        for c, (idx, gather) in self._groups.items():
            J = self._advection_jacobian(c, x[gather])
            r = gather.shape[1]
            for k, m in enumerate(idx):
                diag[m][:r, :r] += J[k]
        return diag

    def factorize(self, diag):
        return BlockGridSolver.factor(self.solver, diag, self.off, self.border)

    def solve(self, u_in, config=None, initial=None):
        config = config or NewtonConfig()
        g = np.asarray(u_in, dtype=float)
        times = {"assembly": 0.0, "factorization": 0.0, "stokes": 0.0}
        t_start = time.perf_counter()
        F = self.rhs(g)
        scale = np.linalg.norm(F)
        if initial is None:
            t0 = time.perf_counter()
            z0 = self.factorize(self.diag_static).solve(F) if scale > 0 else np.zeros(self.n)
            times["stokes"] = time.perf_counter() - t0
        else:
            z0 = np.asarray(initial, dtype=float)

        def residual(z):
            return self.linear_apply(z) + self.advection(z) - F

        z, history, it = newton_solve(residual, self.jacobian_blocks, z0, max(scale, np.finfo(float).tiny),
                                      config, times, factorize=self.factorize)
        times["total"] = time.perf_counter() - t_start
        report = SolveReport("converged", it, history, times, self.n,
                             {"setup": self.assembly_time, "mode": self.mode})
        return self.split(z, g), report

    def split(self, z, u_in):
        u, p = [], []
        o = self.offsets
        for m in range(len(self.cells)):
            a = o[m]
            u.append(z[a:a + self.ru[m]].copy())
            p.append(z[a + self.ru[m]:o[m + 1]].copy())
        return GlobalSolution(self.topology, u, p, np.asarray(u_in, dtype=float), float(z[-1]), "reduced")

    def pack(self, sol):
        z = np.zeros(self.n)
        o = self.offsets
        for m in range(len(self.cells)):
            a = o[m]
            z[a:a + self.ru[m]] = sol.u[m]
            z[a + self.ru[m]:o[m + 1]] = sol.p[m]
        z[-1] = sol.gauge
        return z

    def residual_norm(self, sol):
        z = self.pack(sol)
        F = self.rhs(sol.u_in)
        r = self.linear_apply(z) + self.advection(z) - F
        return float(np.linalg.norm(r) / max(np.linalg.norm(F), np.finfo(float).tiny))


def solve_rom(topology, rom, u_in, config=None, mode="tensor"):
    system = RomSystem(topology, rom, mode=mode)
    return system.solve(u_in, config)


def reconstruct(sol, rom):
    """Full-order fields ``u = Phi_u u_hat``, ``p = Phi_p p_hat`` with zero global pressure mean."""
    if sol.kind != "reduced":
        raise DimensionMismatch("solution is already full order")
    u, p = [], []
    total = area = 0.0
    for c, uh, ph in zip(sol.topology.cells, sol.u, sol.p):
        rc = rom.components[c]
        if len(uh) != rc.dim_u or len(ph) != rc.dim_p:
            raise DimensionMismatch(f"reduced block sizes do not match component {c}")
        u.append(rc.basis.Phi_u @ uh)
        pm = rc.basis.Phi_p @ ph
        p.append(pm)
        total += rc.p_mass_full @ pm
        area += rc.p_mass_full.sum()
    mean = total / area if area > 0 else 0.0
    p = [q - mean for q in p]
    return GlobalSolution(sol.topology, u, p, sol.u_in, sol.gauge, "full")


def save_solution(directory, sol, nu=None, report=None, extra=None):
    """Write per-cell ``CROM-MAT v1`` blocks and a JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for m, (u, p) in enumerate(zip(sol.u, sol.p)):
        write_matrix(d / f"u_{m}.mat", u)
        write_matrix(d / f"p_{m}.mat", p)
    manifest = {
        "format": "CROM-SOLUTION v1",
        "grid": [list(r) for r in sol.topology.grid],
        "u_in": [float(v) for v in sol.u_in],
        "gauge": sol.gauge,
        "kind": sol.kind,
        "nu": nu,
        "report": report.as_dict() if report is not None else None,
    }
    if extra:
        manifest.update(extra)
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    os.replace(tmp, d / "manifest.json")
    return d


def load_solution(directory):
    d = Path(directory)
    path = d / "manifest.json"
    if not path.exists():
        raise MissingArtifact(f"no solution manifest in {d}")
    manifest = json.loads(path.read_text())
    topo = build_topology(manifest["grid"])
    u = [read_matrix(d / f"u_{m}.mat").ravel() for m in range(topo.n_cells)]
    p = [read_matrix(d / f"p_{m}.mat").ravel() for m in range(topo.n_cells)]
    sol = GlobalSolution(topo, u, p, np.asarray(manifest["u_in"]), manifest["gauge"], manifest["kind"])
    return sol, manifest
