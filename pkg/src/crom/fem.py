"""Taylor-Hood P2/P1 operators for one reference component.

Velocity coefficients are stored component-major: ``u = [u_x(nodes), u_y(nodes)]``
where the P2 nodes are the mesh vertices followed by the edge midpoints.
Pressure is continuous P1 on the vertices.

Inside a component the discretization is continuous Galerkin.  Components
are coupled through symmetric interior-penalty (SIPG) face terms with an
averaged pressure flux, and the exterior boundary of an array is handled by
the same face terms against the prescribed velocity (Nitsche).  No-slip on
obstacles is imposed strongly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import TraceMismatch
from .geometry import FACES, NORMALS, OPPOSITE, SHIFTS, interface_trace, traces_coincide

DEFAULT_PENALTY = 10.0 * 2**2


def triangle_rule_degree5():
    """7-point symmetric rule on the unit triangle; weights sum to one."""
    s15 = np.sqrt(15.0)
    a1, a2 = (6.0 - s15) / 21.0, (6.0 + s15) / 21.0
    w1, w2 = (155.0 - s15) / 1200.0, (155.0 + s15) / 1200.0
    bary = [[1 / 3, 1 / 3, 1 / 3]]
    weights = [0.225]
    for a, w in ((a1, w1), (a2, w2)):
        b = 1.0 - 2.0 * a
        bary += [[b, a, a], [a, b, a], [a, a, b]]
        weights += [w, w, w]
    return np.array(bary), np.array(weights)


def gauss_legendre_unit(n=4):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


def p2_values(bary):
    """P2 shape functions (vertices, then edges 01, 12, 20) at barycentric points."""
    l0, l1, l2 = bary[..., 0], bary[..., 1], bary[..., 2]
    return np.stack(
        [l0 * (2 * l0 - 1), l1 * (2 * l1 - 1), l2 * (2 * l2 - 1), 4 * l0 * l1, 4 * l1 * l2, 4 * l2 * l0],
        axis=-1,
    )


def p2_bary_derivatives(bary):
    """d(phi_a)/d(lambda_k), shape ``(..., 6, 3)``."""
    l0, l1, l2 = bary[..., 0], bary[..., 1], bary[..., 2]
    z = np.zeros_like(l0)
    rows = [
        [4 * l0 - 1, z, z],
        [z, 4 * l1 - 1, z],
        [z, z, 4 * l2 - 1],
        [4 * l1, 4 * l0, z],
        [z, 4 * l2, 4 * l1],
        [4 * l2, z, 4 * l0],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def barycentric_gradients(p):
    """Gradients of the barycentric coordinates for triangles ``p`` of shape (T, 3, 2)."""
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)  # columns
    Jinv = np.linalg.inv(J)
    g1, g2 = Jinv[:, 0, :], Jinv[:, 1, :]
    return np.stack([-g1 - g2, g1, g2], axis=1), np.abs(np.linalg.det(J)) / 2.0


def to_barycentric(p, x):
    """Barycentric coordinates of points ``x`` (T, G, 2) in triangles ``p`` (T, 3, 2)."""
    J = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=-1)
    rel = x - p[:, None, 0, :]
    l12 = np.einsum("tij,tgj->tgi", np.linalg.inv(J), rel)
    return np.concatenate([1.0 - l12.sum(-1, keepdims=True), l12], axis=-1)


@dataclass(eq=False)
class FaceTrace:
    """Quadrature data on one outer face of a component."""

    face: str
    facets: np.ndarray      # (k, 2) vertex ids sorted along the face
    triangles: np.ndarray   # (k,) adjacent triangle
    lengths: np.ndarray     # (k,)
    points: np.ndarray      # (k, G, 2)
    weights: np.ndarray     # (k, G) physical weights
    phi: np.ndarray         # (k, G, 6)
    dphi: np.ndarray        # (k, G, 6, 2)
    psi: np.ndarray         # (k, G, 3)
    nodes: np.ndarray       # (k, 6) P2 node ids of the adjacent triangle
    vertices: np.ndarray    # (k, 3) P1 ids
    normal: np.ndarray


@dataclass(eq=False)
class FemSpace:
    mesh: object
    nodes: np.ndarray        # (n_nodes, 2) P2 node coordinates
    edges: np.ndarray        # (E, 2)
    cell_nodes: np.ndarray   # (T, 6)
    qbary: np.ndarray        # (Q, 3)
    qw: np.ndarray           # (T, Q) physical weights
    qpoints: np.ndarray      # (T, Q, 2)
    phi: np.ndarray          # (Q, 6)
    dphi: np.ndarray         # (T, Q, 6, 2)
    psi: np.ndarray          # (Q, 3)
    dpsi: np.ndarray         # (T, 3, 2)
    areas: np.ndarray
    obstacle_nodes: np.ndarray
    face_nodes: dict
    _traces: dict = field(default_factory=dict, repr=False)

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_u(self):
        return 2 * len(self.nodes)

    @property
    def n_p(self):
        return len(self.mesh.vertices)

    @property
    def obstacle_dofs(self):
        n = self.n_nodes
        return np.concatenate([self.obstacle_nodes, self.obstacle_nodes + n])

    def face_dofs(self, face):
        n = self.n_nodes
        return np.concatenate([self.face_nodes[face], self.face_nodes[face] + n])

    def velocity_dofs(self, t):
        """Global velocity dof ids of triangle(s) ``t``: shape (..., 2, 6)."""
        nodes = self.cell_nodes[t]
        return np.stack([nodes, nodes + self.n_nodes], axis=-2)

    def interpolate(self, fn):
        """Nodal P2 interpolant of a vector field ``fn(x, y) -> (fx, fy)``."""
        fx, fy = fn(self.nodes[:, 0], self.nodes[:, 1])
        n = self.n_nodes
        return np.concatenate([np.broadcast_to(fx, n), np.broadcast_to(fy, n)]).astype(float)

    def interpolate_pressure(self, fn):
        v = self.mesh.vertices
        return np.broadcast_to(fn(v[:, 0], v[:, 1]), (self.n_p,)).astype(float)

    def trace(self, face):
        if face not in self._traces:
            self._traces[face] = _face_trace(self, face)
        return self._traces[face]

    def eval_velocity(self, u):
        """Velocity values and gradients at every quadrature point.

        ``u`` may be one coefficient vector or a stack ``(n_cells, n_u)``.
        Returns ``(values (..., T, Q, 2), grads (..., T, Q, 2, 2))`` with
        ``grads[..., c, d] = d u_c / d x_d``.
        """
        U = _gather(self, u)
        vals = np.einsum("qa,...tac->...tqc", self.phi, U)
        grads = np.einsum("tqad,...tac->...tqcd", self.dphi, U)
        return vals, grads


def _gather(space, u):
    u = np.asarray(u)
    n = space.n_nodes
    ux = u[..., :n][..., space.cell_nodes]
    uy = u[..., n:][..., space.cell_nodes]
    return np.stack([ux, uy], axis=-1)  # (..., T, 6, 2)


def build_space(mesh):
    """Taylor-Hood P2/P1 space on a component mesh."""
    verts = mesh.vertices
    tris = mesh.triangles
    nv = len(verts)
    local = np.array([[0, 1], [1, 2], [2, 0]])
    all_edges = np.sort(tris[:, local].reshape(-1, 2), axis=1)
    edges, inv = np.unique(all_edges, axis=0, return_inverse=True)
    inv = inv.ravel().reshape(-1, 3)
    cell_nodes = np.concatenate([tris, nv + inv], axis=1)
    nodes = np.concatenate([verts, 0.5 * (verts[edges[:, 0]] + verts[edges[:, 1]])])

    p = verts[tris]
    gl, areas = barycentric_gradients(p)
    qbary, qref = triangle_rule_degree5()
    qw = areas[:, None] * qref[None]
    qpoints = np.einsum("qk,tkd->tqd", qbary, p)
    phi = p2_values(qbary)
    dphi = np.einsum("qak,tkd->tqad", p2_bary_derivatives(qbary), gl)

    edge_id = {tuple(e): nv + i for i, e in enumerate(edges.tolist())}

    def nodes_on(facets):
        if len(facets) == 0:
            return np.zeros(0, dtype=np.int64)
        mids = [edge_id[tuple(sorted(f))] for f in facets.tolist()]
        return np.unique(np.concatenate([facets.ravel(), mids]))

    obstacle_nodes = nodes_on(mesh.facets("obstacle"))
    face_nodes = {f: nodes_on(mesh.facets(f)) for f in FACES}
    return FemSpace(
        mesh=mesh, nodes=nodes, edges=edges, cell_nodes=cell_nodes, qbary=qbary, qw=qw,
        qpoints=qpoints, phi=phi, dphi=dphi, psi=qbary.copy(), dpsi=gl, areas=areas,
        obstacle_nodes=obstacle_nodes, face_nodes=face_nodes,
    )


def _face_trace(space, face, n_gauss=4):
    mesh = space.mesh
    facets = interface_trace(mesh, face)
    tris = mesh.triangles
    tri_of = {}
    for t, (a, b, c) in enumerate(tris.tolist()):
        for e in ((a, b), (b, c), (c, a)):
            tri_of.setdefault(tuple(sorted(e)), t)
    adj = np.array([tri_of[tuple(sorted(f))] for f in facets.tolist()])
    s, w = gauss_legendre_unit(n_gauss)
    a = mesh.vertices[facets[:, 0]]
    b = mesh.vertices[facets[:, 1]]
    lengths = np.linalg.norm(b - a, axis=1)
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    p = mesh.vertices[tris[adj]]
    bary = to_barycentric(p, pts)
    gl, _ = barycentric_gradients(p)
    phi = p2_values(bary)
    dphi = np.einsum("kgaj,kjd->kgad", p2_bary_derivatives(bary), gl)
    return FaceTrace(
        face=face, facets=facets, triangles=adj, lengths=lengths, points=pts,
        weights=lengths[:, None] * w[None], phi=phi, dphi=dphi, psi=bary,
        nodes=space.cell_nodes[adj], vertices=tris[adj], normal=NORMALS[face].copy(),
    )


def _scalar_p2_matrix(space, local):
    """Assemble a scalar (n_nodes x n_nodes) matrix from local (T, 6, 6) blocks."""
    cn = space.cell_nodes
    rows = np.repeat(cn, 6, axis=1).ravel()
    cols = np.tile(cn, (1, 6)).ravel()
    n = space.n_nodes
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_viscous(space, nu):
    """``nu`` times the vector Laplacian stiffness, block diagonal in components."""
    if nu <= 0:
        raise ValueError("viscosity must be positive")
    local = np.einsum("tq,tqad,tqbd->tab", space.qw, space.dphi, space.dphi)
    S = _scalar_p2_matrix(space, local)
    return (nu * sp.block_diag([S, S])).tocsr()


def assemble_divergence(space):
    """``(B u)_q = int q div(u)`` for P1 test functions ``q`` (no integration by parts)."""
    tris = space.mesh.triangles
    cn = space.cell_nodes
    n = space.n_nodes
    blocks = []
    for d in range(2):
        local = np.einsum("tq,qi,tqa->tia", space.qw, space.psi, space.dphi[..., d])
        rows = np.repeat(tris, 6, axis=1).ravel()
        cols = np.tile(cn, (1, 3)).ravel() + d * n
        blocks.append((local.ravel(), rows, cols))
    data = np.concatenate([b[0] for b in blocks])
    rows = np.concatenate([b[1] for b in blocks])
    cols = np.concatenate([b[2] for b in blocks])
    return sp.coo_matrix((data, (rows, cols)), shape=(space.n_p, space.n_u)).tocsr()


def assemble_mass(space):
    """Velocity (vector P2) and pressure (P1) mass matrices."""
    local = np.einsum("tq,qa,qb->tab", space.qw, space.phi, space.phi)
    M2 = _scalar_p2_matrix(space, local)
    tris = space.mesh.triangles
    lp = np.einsum("tq,qi,qj->tij", space.qw, space.psi, space.psi)
    rows = np.repeat(tris, 3, axis=1).ravel()
    cols = np.tile(tris, (1, 3)).ravel()
    Mp = sp.coo_matrix((lp.ravel(), (rows, cols)), shape=(space.n_p, space.n_p)).tocsr()
    return sp.block_diag([M2, M2]).tocsr(), Mp


def load_vector(space, fn):
    """``int f . phi`` for a vector field ``fn(x, y) -> (fx, fy)``."""
    x, y = space.qpoints[..., 0], space.qpoints[..., 1]
    fx, fy = fn(x, y)
    out = np.zeros(space.n_u)
    n = space.n_nodes
    for d, f in enumerate((fx, fy)):
        local = np.einsum("tq,qa,tq->ta", space.qw, space.phi, np.broadcast_to(f, x.shape))
        np.add.at(out, space.cell_nodes.ravel() + d * n, local.ravel())
    return out


def pressure_load(space, fn=None):
    """``int g q`` for P1 test functions; ``g = 1`` when ``fn`` is omitted."""
    x, y = space.qpoints[..., 0], space.qpoints[..., 1]
    g = np.ones_like(x) if fn is None else np.broadcast_to(fn(x, y), x.shape)
    local = np.einsum("tq,qi,tq->ti", space.qw, space.psi, g)
    out = np.zeros(space.n_p)
    np.add.at(out, space.mesh.triangles.ravel(), local.ravel())
    return out


def eval_advection(space, u):
    """Convective term ``int phi_i . (u . grad) u``; ``u`` may be stacked per cell."""
    vals, grads = space.eval_velocity(u)
    conv = np.einsum("...tqd,...tqcd->...tqc", vals, grads)
    local = np.einsum("tq,qa,...tqc->...tca", space.qw, space.phi, conv)
    dofs = space.velocity_dofs(np.arange(len(space.cell_nodes)))  # (T, 2, 6)
    return _scatter(local, dofs.ravel(), space.n_u)


def _scatter(local, dofs, n):
    lead = local.shape[:-3]
    flat = local.reshape(-1, dofs.size)
    m = flat.shape[0]
    idx = (np.arange(m)[:, None] * n + dofs[None, :]).ravel()
    out = np.bincount(idx, weights=flat.ravel(), minlength=m * n)
    return out.reshape(lead + (n,))


def advection_pattern(space):
    """(rows, cols) of the local Jacobian entries, ordered as ``advection_jacobian_local``."""
    dofs = space.velocity_dofs(np.arange(len(space.cell_nodes))).reshape(-1, 12)  # (T, 12)
    rows = np.repeat(dofs, 12, axis=1).ravel()
    cols = np.tile(dofs, (1, 12)).ravel()
    return rows, cols


def advection_jacobian_local(space, u):
    """Element Jacobians of the convective term, shape ``(..., T, 12, 12)``.

    Row/column entries follow ``velocity_dofs`` ordering (component, node).
    """
    vals, grads = space.eval_velocity(u)
    wphi = space.qw[:, :, None] * space.phi[None]  # (T, Q, 6)
    # (phi_e d_d u_c) part
    t1 = np.einsum("tqa,qe,...tqcd->...tcade", wphi, space.phi, grads)
    # (u . grad phi_e) delta_cd part
    adv = np.einsum("...tqb,tqeb->...tqe", vals, space.dphi)
    t2 = np.einsum("tqa,...tqe->...tae", wphi, adv)
    t1[..., 0, :, 0, :] += t2
    t1[..., 1, :, 1, :] += t2
    shape = t1.shape[:-5] + (t1.shape[-5], 12, 12)
    return t1.reshape(shape)


def advection_jacobian(space, u):
    """Exact derivative of ``eval_advection`` at ``u`` as a sparse matrix."""
    rows, cols = advection_pattern(space)
    local = advection_jacobian_local(space, u)
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(space.n_u, space.n_u)).tocsr()


@dataclass(eq=False)
class InterfaceBlocks:
    """Face coupling between side ``m`` and side ``n`` of one interface.

    ``K_xy`` couple velocity test functions on side x with velocity trial
    functions on side y; ``G_xy`` couple velocity tests on x with pressure
    trials on y.  Continuity rows use the transposes.
    """

    K_mm: sp.csr_matrix
    K_mn: sp.csr_matrix
    K_nm: sp.csr_matrix
    K_nn: sp.csr_matrix
    G_mm: sp.csr_matrix
    G_mn: sp.csr_matrix
    G_nm: sp.csr_matrix
    G_nn: sp.csr_matrix


def _pair_viscous(tx, ty, sx, sy, nu, sigma, normal):
    """Scalar SIPG block, test from side x, trial from side y: (k, 6, 6)."""
    w = tx.weights
    h = tx.lengths[:, None]
    dny = np.einsum("kgad,d->kga", ty.dphi, normal)
    dnx = np.einsum("kgad,d->kga", tx.dphi, normal)
    cons = -0.5 * nu * sx * np.einsum("kg,kga,kge->kae", w, tx.phi, dny)
    cons -= 0.5 * nu * sy * np.einsum("kg,kga,kge->kae", w, dnx, ty.phi)
    pen = sigma * nu * sx * sy * np.einsum("kg,kga,kge->kae", w / h, tx.phi, ty.phi)
    return cons + pen


def _vector_block(local, tx, ty, nx_u, ny_u):
    """Expand a scalar (k, 6, 6) block to both velocity components."""
    blocks = []
    for c in range(2):
        rows = np.repeat(tx.nodes + c * (nx_u // 2), 6, axis=1).ravel()
        cols = np.tile(ty.nodes + c * (ny_u // 2), (1, 6)).ravel()
        blocks.append((local.ravel(), rows, cols))
    data = np.concatenate([b[0] for b in blocks])
    rows = np.concatenate([b[1] for b in blocks])
    cols = np.concatenate([b[2] for b in blocks])
    return sp.coo_matrix((data, (rows, cols)), shape=(nx_u, ny_u)).tocsr()


def _pair_pressure(tx, ty, sx, normal, nx_u, ny_p):
    """``int {p} [[v]] . n`` block, velocity test on x, pressure trial on y."""
    local = 0.5 * sx * np.einsum("kg,kga,kge->kae", tx.weights, tx.phi, ty.psi)
    blocks = []
    for c in range(2):
        if normal[c] == 0:
            continue
        rows = np.repeat(tx.nodes + c * (nx_u // 2), 3, axis=1).ravel()
        cols = np.tile(ty.vertices, (1, 6)).ravel()
        blocks.append((normal[c] * local.ravel(), rows, cols))
    data = np.concatenate([b[0] for b in blocks])
    rows = np.concatenate([b[1] for b in blocks])
    cols = np.concatenate([b[2] for b in blocks])
    return sp.coo_matrix((data, (rows, cols)), shape=(nx_u, ny_p)).tocsr()


def _matched_trace(space_n, face_n, tr_m):
    """Neighbor trace evaluated at the (translated) quadrature points of ``tr_m``."""
    tr = space_n.trace(face_n)
    pts = tr_m.points + SHIFTS[tr_m.face]
    p = space_n.mesh.vertices[space_n.mesh.triangles[tr.triangles]]
    bary = to_barycentric(p, pts)
    gl, _ = barycentric_gradients(p)
    phi = p2_values(bary)
    dphi = np.einsum("kgaj,kjd->kgad", p2_bary_derivatives(bary), gl)
    return FaceTrace(
        face=face_n, facets=tr.facets, triangles=tr.triangles, lengths=tr.lengths, points=pts,
        weights=tr_m.weights, phi=phi, dphi=dphi, psi=bary, nodes=tr.nodes,
        vertices=tr.vertices, normal=tr.normal,
    )


def assemble_interface_blocks(space_m, face_m, space_n, face_n, nu, sigma=DEFAULT_PENALTY):
    """SIPG viscous and averaged-pressure coupling across one interface.

    Uses ``[[q]] = q_m - q_n`` and the outward normal of side ``m``; the
    penalty is ``sigma * nu / h`` with ``h`` the facet length.
    """
    if not traces_coincide(space_m.mesh, face_m, space_n.mesh, face_n):
        raise TraceMismatch(f"{face_m}/{face_n} traces are not coincident")
    tm = space_m.trace(face_m)
    tn = _matched_trace(space_n, face_n, tm)
    normal = tm.normal
    um, un = space_m.n_u, space_n.n_u
    pm, pn = space_m.n_p, space_n.n_p
    sides = {"m": (tm, +1.0, um, pm), "n": (tn, -1.0, un, pn)}
    out = {}
    for x in "mn":
        tx, sx, ux, _ = sides[x]
        for y in "mn":
            ty, sy, uy, py = sides[y]
            out[f"K_{x}{y}"] = _vector_block(_pair_viscous(tx, ty, sx, sy, nu, sigma, normal), tx, ty, ux, uy)
            out[f"G_{x}{y}"] = _pair_pressure(tx, ty, sx, normal, ux, py)
    return InterfaceBlocks(**out)


@dataclass(eq=False)
class ExteriorBlocks:
    """Nitsche terms of one exterior face; the right-hand side is linear in ``u_in``.

    ``L_mom[:, c]`` and ``L_cont[:, c]`` are the momentum and continuity loads
    for a unit prescribed velocity in direction ``c``.
    """

    K: sp.csr_matrix
    G: sp.csr_matrix
    L_mom: np.ndarray
    L_cont: np.ndarray


def assemble_exterior_blocks(space, face, nu, sigma=DEFAULT_PENALTY):
    tr = space.trace(face)
    n = tr.normal
    w = tr.weights
    h = tr.lengths[:, None]
    dn = np.einsum("kgad,d->kga", tr.dphi, n)
    local = -nu * np.einsum("kg,kga,kge->kae", w, tr.phi, dn)
    local = local + np.swapaxes(local, 1, 2)
    local += sigma * nu * np.einsum("kg,kga,kge->kae", w / h, tr.phi, tr.phi)
    K = _vector_block(local, tr, tr, space.n_u, space.n_u)
    G = 2.0 * _pair_pressure(tr, tr, 1.0, n, space.n_u, space.n_p)
    lm = np.einsum("kg,kga->ka", w, -nu * dn + sigma * nu * tr.phi / h[..., None])
    L_mom = np.zeros((space.n_u, 2))
    for c in range(2):
        np.add.at(L_mom[:, c], tr.nodes.ravel() + c * space.n_nodes, lm.ravel())
    lc = np.einsum("kg,kge->ke", w, tr.psi)
    L_cont = np.zeros((space.n_p, 2))
    for c in range(2):
        np.add.at(L_cont[:, c], tr.vertices.ravel(), n[c] * lc.ravel())
    return ExteriorBlocks(K, G, L_mom, L_cont)


@dataclass(eq=False)
class ComponentOperators:
    """Full-order operators of one reference component."""

    space: FemSpace
    nu: float
    sigma: float
    K: sp.csr_matrix
    B: sp.csr_matrix
    M_u: sp.csr_matrix
    M_p: sp.csr_matrix
    p_mass: np.ndarray
    exterior: dict
    self_faces: dict  # face -> (K_mm, G_mm) interface blocks that depend on this side only


def build_component_operators(space, nu, sigma=DEFAULT_PENALTY):
    K = assemble_viscous(space, nu)
    B = assemble_divergence(space)
    M_u, M_p = assemble_mass(space)
    exterior = {f: assemble_exterior_blocks(space, f, nu, sigma) for f in FACES}
    self_faces = {}
    for f in FACES:
        blk = assemble_interface_blocks(space, f, space, OPPOSITE[f], nu, sigma)
        self_faces[f] = (blk.K_mm, blk.G_mm)
    return ComponentOperators(
        space=space, nu=nu, sigma=sigma, K=K, B=B, M_u=M_u, M_p=M_p,
        p_mass=pressure_load(space), exterior=exterior, self_faces=self_faces,
    )


@dataclass(eq=False)
class ConstrainedSystem:
    """Linear saddle-point system of a single component on free unknowns.

    Unknown ordering is ``[u (free velocity dofs), p, gauge multiplier]``.
    """

    matrix: sp.csr_matrix
    rhs: np.ndarray
    free_u: np.ndarray
    fixed_u: np.ndarray
    fixed_values: np.ndarray

    def expand(self, x, n_u):
        u = np.zeros(n_u)
        u[self.free_u] = x[: len(self.free_u)]
        u[self.fixed_u] = self.fixed_values
        p = x[len(self.free_u): -1]
        return u, p, x[-1]


def apply_boundary_conditions(ops, u_in, mode="weak", forcing=None):
    """Stokes system of one component with all four faces exterior.

    ``mode='weak'`` adds the Nitsche face terms with data ``u_in``;
    ``mode='strong'`` fixes the outer-face velocity dofs to ``u_in`` and folds
    the eliminated columns into the right-hand side.  No-slip on obstacle
    dofs is always strong.  The pressure is gauged to zero mean by one scalar
    multiplier.
    """
    space = ops.space
    g = np.asarray(u_in, dtype=float)
    A_uu = ops.K.copy()
    A_up = -ops.B.T.tocsr()
    f_u = np.zeros(space.n_u) if forcing is None else load_vector(space, forcing)
    f_p = np.zeros(space.n_p)
    fixed = [space.obstacle_dofs]
    values = [np.zeros(len(space.obstacle_dofs))]
    if mode == "weak":
        for face in FACES:
            ext = ops.exterior[face]
            A_uu = A_uu + ext.K
            A_up = A_up + ext.G
            f_u += ext.L_mom @ g
            f_p += ext.L_cont @ g
    elif mode == "strong":
        for face in FACES:
            d = space.face_dofs(face)
            fixed.append(d)
            values.append(np.repeat(g, len(d) // 2))
    else:
        raise ValueError(f"unknown boundary mode {mode!r}")
    fixed_u, first = np.unique(np.concatenate(fixed), return_index=True)
    fixed_values = np.concatenate(values)[first]
    free_u = np.setdiff1d(np.arange(space.n_u), fixed_u)
    ub = np.zeros(space.n_u)
    ub[fixed_u] = fixed_values
    A_pu = A_up.T.tocsr()
    f_u -= A_uu @ ub
    f_p -= A_pu @ ub
    gauge = sp.csr_matrix(ops.p_mass[None, :])
    mat = sp.bmat(
        [
            [A_uu[free_u][:, free_u], A_up[free_u], None],
            [A_pu[:, free_u], None, gauge.T],
            [None, gauge, None],
        ],
        format="csr",
    )
    rhs = np.concatenate([f_u[free_u], f_p, [0.0]])
    return ConstrainedSystem(mat, rhs, free_u, fixed_u, fixed_values)


def write_coo(matrix, path):
    """Write a sparse matrix as text: header, dims, nnz, then row-major ``row col value``."""
    m = sp.coo_matrix(matrix)
    m.sum_duplicates()
    order = np.lexsort((m.col, m.row))
    lines = ["CROM-COO v1", f"{m.shape[0]} {m.shape[1]}", str(m.nnz)]
    lines += [f"{r} {c} {v!r}" for r, c, v in zip(m.row[order].tolist(), m.col[order].tolist(), m.data[order].tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_coo(path):
    lines = Path(path).read_text().splitlines()
    if lines[0].strip() != "CROM-COO v1":
        raise ValueError(f"{path}: not a CROM-COO v1 file")
    rows, cols = (int(v) for v in lines[1].split())
    nnz = int(lines[2])
    r = np.empty(nnz, dtype=np.int64)
    c = np.empty(nnz, dtype=np.int64)
    v = np.empty(nnz)
    for k, ln in enumerate(lines[3:3 + nnz]):
        a, b, x = ln.split()
        r[k], c[k], v[k] = int(a), int(b), float(x)
    return sp.coo_matrix((v, (r, c)), shape=(rows, cols)).tocsr()


class ComponentLibrary:
    """Meshes, spaces and full-order operators of all reference components.

    Cross-interface blocks are built on first use and cached by
    ``(component_m, component_n, face_m)``.
    """

    def __init__(self, meshes, nu, sigma=DEFAULT_PENALTY):
        self.meshes = dict(meshes)
        self.nu = float(nu)
        self.sigma = float(sigma)
        self.spaces = {k: build_space(m) for k, m in self.meshes.items()}
        self.ops = {k: build_component_operators(s, nu, sigma) for k, s in self.spaces.items()}
        self._cross = {}

    @classmethod
    def default(cls, n_edge=8, nu=0.04, sigma=DEFAULT_PENALTY, library=None):
        from .geometry import build_library_meshes

        return cls(build_library_meshes(n_edge, library), nu, sigma)

    @property
    def names(self):
        return list(self.meshes)

    def interface(self, comp_m, comp_n, face_m):
        key = (comp_m, comp_n, face_m)
        if key not in self._cross:
            self._cross[key] = assemble_interface_blocks(
                self.spaces[comp_m], face_m, self.spaces[comp_n], OPPOSITE[face_m], self.nu, self.sigma
            )
        return self._cross[key]
