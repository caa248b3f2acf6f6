"""Training configurations, snapshot collection, POD and supremizer enrichment."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import AllSolvesFailed, CromError, DimensionMismatch
from .geometry import KINDS
from .numkit import mgs_orthonormalize, read_matrix, svd_thin, write_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    """A small random array with a random inflow velocity."""

    layout: tuple
    u_in: tuple
    rng_seed: int
    index: int = 0

    def __post_init__(self):
        if any(abs(v) > 1.0 for v in self.u_in):
            raise ValueError("inflow entries must lie in [-1, 1]")


def generate_training_configs(seed, count, names=KINDS, shape=(2, 2)):
    """Reproducible random layouts with inflow drawn from ``U[-1, 1]^2``.

    Each config gets its own child seed, so config ``k`` does not depend on
    how many configs are requested.
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    names = list(names)
    children = np.random.SeedSequence(seed).spawn(count)
    out = []
    for k, child in enumerate(children):
        child_seed = int(child.generate_state(1)[0])
        rng = np.random.default_rng(child_seed)
        layout = rng.choice(len(names), size=shape)
        u_in = rng.uniform(-1.0, 1.0, size=2)
        grid = tuple(tuple(names[i] for i in row) for row in layout)
        out.append(TrainingConfig(grid, tuple(float(v) for v in u_in), child_seed, k))
    return out


@dataclass
class SnapshotSet:
    """Per-component snapshot matrices; columns are cell restrictions of FOM solutions."""

    velocity: dict
    pressure: dict
    provenance: dict   # component -> list of (config index, cell index)
    failed: list = field(default_factory=list)

    def count(self, comp):
        return self.velocity[comp].shape[1] if comp in self.velocity else 0


def collect_snapshots(configs, library, solve=None, names=None, strip_boundary=False):
    """Solve every config with the full-order model and gather cell snapshots.

    ``solve(topology, u_in)`` returns ``(GlobalSolution, report)``; by default
    the weak-boundary FOM is used.  Configs that fail to converge are skipped
    with a warning.  ``strip_boundary`` zeroes the outer-face velocity dofs of
    each snapshot before it is stored.
    """
    from .solvers import build_topology, solve_fom

    names = list(names) if names is not None else list(library.names)
    if solve is None:
        def solve(topo, u_in):
            return solve_fom(topo, library, u_in)
    cols_u = {c: [] for c in names}
    cols_p = {c: [] for c in names}
    prov = {c: [] for c in names}
    failed = []
    for cfg in configs:
        topo = build_topology(cfg.layout, names=library.spaces)
        try:
            sol, _ = solve(topo, np.asarray(cfg.u_in))
        except CromError as exc:
            log.warning("config %d skipped: %s", cfg.index, exc)
            failed.append(cfg.index)
            continue
        for m, c in enumerate(topo.cells):
            u = sol.u[m].copy()
            if strip_boundary:
                space = library.spaces[c]
                for f in ("north", "south", "east", "west"):
                    u[space.face_dofs(f)] = 0.0
            cols_u.setdefault(c, []).append(u)
            cols_p.setdefault(c, []).append(sol.p[m].copy())
            prov.setdefault(c, []).append((cfg.index, m))
    if not any(cols_u.values()):
        raise AllSolvesFailed("no snapshot could be collected")
    vel, pres = {}, {}
    for c in cols_u:
        space = library.spaces[c]
        if not cols_u[c]:
            log.warning("component %s does not occur in any converged config", c)
            vel[c] = np.zeros((space.n_u, 0))
            pres[c] = np.zeros((space.n_p, 0))
        else:
            vel[c] = np.column_stack(cols_u[c])
            pres[c] = np.column_stack(cols_p[c])
    return SnapshotSet(vel, pres, prov, failed)


def energy_criterion(values, R):
    """``1 - sum(values[:R]) / sum(values)`` for a nonincreasing sequence."""
    v = np.asarray(values, dtype=float)
    total = v.sum()
    if total <= 0:
        return 0.0
    return float(1.0 - v[:R].sum() / total)


def energy_rank(values, eps):
    """Smallest ``R`` with ``energy_criterion(values, R) <= eps``."""
    v = np.asarray(values, dtype=float)
    total = v.sum()
    if total <= 0:
        return 1
    crit = 1.0 - np.cumsum(v) / total
    # guard against round-off in the cumulative sum
    hits = np.flatnonzero(crit <= eps + 1e-14)
    return int(hits[0]) + 1 if len(hits) else len(v)


@dataclass
class PodResult:
    modes: np.ndarray
    sigma: np.ndarray       # all singular values of the snapshot matrix
    rank: int

    @property
    def energies(self):
        return self.sigma ** 2

    def criterion(self, R=None):
        """Energy criterion evaluated on POD energies ``sigma**2``.

        This equals the relative squared Frobenius error of projecting the
        snapshots onto the leading ``R`` modes.
        """
        return energy_criterion(self.energies, self.rank if R is None else R)


def pod(snapshots, count=None, eps=None, method="lapack", weight=None):
    """Proper orthogonal decomposition of a snapshot matrix.

    Exactly one of ``count`` (number of modes) or ``eps`` (energy criterion
    bound, evaluated on squared singular values) selects the rank.  With a
    symmetric positive definite ``weight`` the modes are orthonormal in that
    inner product instead of the Euclidean one.
    """
    S = np.asarray(snapshots, dtype=float)
    if S.ndim != 2 or S.shape[1] < 1:
        raise ValueError("pod needs at least one snapshot column")
    if (count is None) == (eps is None):
        raise ValueError("give exactly one of count or eps")
    if weight is not None:
        L = np.linalg.cholesky(weight.toarray() if sp.issparse(weight) else np.asarray(weight))
        S = L.T @ S
    U, s, _ = svd_thin(S, method=method)
    if eps is not None:
        R = energy_rank(s ** 2, eps)
    else:
        R = int(count)
    R = min(R, int(np.sum(s > 1e-14 * max(s[0], np.finfo(float).tiny))) or 1, U.shape[1])
    modes = U[:, :R]
    if weight is not None:
        modes = np.linalg.solve(L.T, modes)
    return PodResult(modes, s, R)


def supremizer_images(ops, Phi_p, constrained=None):
    """Velocity fields ``M_u^{-1} B^T q`` for pressure modes ``q``.

    Rows listed in ``constrained`` (obstacle dofs by default) are held at
    zero, so the images satisfy the no-slip condition built into the bases.
    """
    constrained = ops.space.obstacle_dofs if constrained is None else np.asarray(constrained)
    n_u = ops.space.n_u
    free = np.setdiff1d(np.arange(n_u), constrained)
    rhs = (ops.B.T @ Phi_p)[free]
    M = sp.csc_matrix(ops.M_u[free][:, free])
    lu = spla.splu(M)
    out = np.zeros((n_u, Phi_p.shape[1]))
    if Phi_p.shape[1]:
        out[free] = lu.solve(np.asarray(rhs))
    return out


def supremize(Phi_u_pod, Phi_p_pod, ops, Z_p=None, constrained=None, drop_tol=1e-10):
    """Append supremizers of the first ``Z_p`` pressure modes and orthonormalize.

    Returns ``(Phi_u, n_dropped)`` with at most ``R_u + Z_p`` columns, the POD
    columns first.
    """
    Z_p = Phi_p_pod.shape[1] if Z_p is None else int(Z_p)
    if Z_p > Phi_p_pod.shape[1]:
        raise DimensionMismatch(f"{Z_p} supremizers requested from {Phi_p_pod.shape[1]} pressure modes")
    if Phi_u_pod.shape[0] != ops.space.n_u:
        raise DimensionMismatch("velocity basis does not match the component space")
    if Z_p == 0:
        return np.array(Phi_u_pod, copy=True), 0
    Q = Phi_p_pod[:, :Z_p]
    sup = supremizer_images(ops, Q, constrained)
    # modes with numerically no gradient (e.g. constants under fixed boundary
    # velocities) give round-off images that would otherwise survive MGS
    constrained = ops.space.obstacle_dofs if constrained is None else np.asarray(constrained)
    free = np.setdiff1d(np.arange(ops.space.n_u), constrained)
    load = np.linalg.norm((ops.B.T @ Q)[free], axis=0)
    scale = spla.norm(ops.B, 1) * np.linalg.norm(Q, axis=0)
    sup[:, load <= drop_tol * np.maximum(scale, np.finfo(float).tiny)] = 0.0
    return mgs_orthonormalize(np.hstack([Phi_u_pod, sup]), drop_tol=drop_tol)


@dataclass
class ReducedBasis:
    """Velocity and pressure bases of one reference component."""

    component: str
    Phi_u: np.ndarray
    Phi_p: np.ndarray
    R_u: int
    R_p: int
    Z_p: int
    sigma_u: np.ndarray
    sigma_p: np.ndarray
    n_dropped: int = 0

    @property
    def dim_u(self):
        return self.Phi_u.shape[1]

    @property
    def dim_p(self):
        return self.Phi_p.shape[1]


@dataclass
class ComponentPod:
    """Untruncated POD data of one component, from which bases of any size are cut."""

    component: str
    modes_u: np.ndarray
    modes_p: np.ndarray
    sigma_u: np.ndarray
    sigma_p: np.ndarray

    def basis(self, ops, R_u, R_p, Z_p):
        if R_u > self.modes_u.shape[1] or R_p > self.modes_p.shape[1]:
            raise DimensionMismatch(
                f"{self.component}: requested ({R_u}, {R_p}) modes, have "
                f"({self.modes_u.shape[1]}, {self.modes_p.shape[1]})"
            )
        Phi_u, dropped = supremize(self.modes_u[:, :R_u], self.modes_p, ops, Z_p)
        return ReducedBasis(self.component, Phi_u, self.modes_p[:, :R_p].copy(), R_u, R_p, Z_p,
                            self.sigma_u, self.sigma_p, dropped)


def component_pods(snapshots, max_modes, method="lapack"):
    """POD of every component with at least one snapshot, keeping ``max_modes`` modes."""
    out = {}
    for c, U in snapshots.velocity.items():
        if U.shape[1] == 0:
            continue
        pu = pod(U, count=max_modes, method=method)
        pp = pod(snapshots.pressure[c], count=max_modes, method=method)
        out[c] = ComponentPod(c, pu.modes, pp.modes, pu.sigma, pp.sigma)
    return out


def identity_basis(ops):
    """Basis spanning the whole space minus obstacle dofs; reproduces the FOM."""
    n_u, n_p = ops.space.n_u, ops.space.n_p
    free = np.setdiff1d(np.arange(n_u), ops.space.obstacle_dofs)
    Phi_u = np.eye(n_u)[:, free]
    return ReducedBasis(ops.space.mesh.name, Phi_u, np.eye(n_p),
                        len(free), n_p, 0, np.ones(len(free)), np.ones(n_p))


def save_snapshots(directory, snapshots, seed=None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "CROM-SNAPSHOTS v1", "seed": seed, "failed": snapshots.failed, "components": {}}
    for c in snapshots.velocity:
        write_matrix(d / f"{c}_velocity.mat", snapshots.velocity[c])
        write_matrix(d / f"{c}_pressure.mat", snapshots.pressure[c])
        manifest["components"][c] = {
            "count": snapshots.count(c),
            "provenance": [list(map(int, p)) for p in snapshots.provenance.get(c, [])],
        }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_snapshots(directory):
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    vel, pres, prov = {}, {}, {}
    for c, info in manifest["components"].items():
        vel[c] = read_matrix(d / f"{c}_velocity.mat")
        pres[c] = read_matrix(d / f"{c}_pressure.mat")
        if info["count"] == 0:
            vel[c] = vel[c][:, :0]
            pres[c] = pres[c][:, :0]
        prov[c] = [tuple(p) for p in info["provenance"]]
    return SnapshotSet(vel, pres, prov, manifest.get("failed", []))
