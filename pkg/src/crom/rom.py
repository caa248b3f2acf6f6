"""Projected component operators, the advection tensor and empirical quadrature."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, InfeasibleTolerance, MissingArtifact
from .fem import InterfaceBlocks
from .geometry import FACES
from .numkit import nnls, read_matrix, write_matrix
from .pod import ReducedBasis

log = logging.getLogger(__name__)

ORTHO_TOL = 1e-10


@dataclass(eq=False)
class RomComponent:
    """Reduced operators of one reference component.

    ``exterior[face]`` holds ``(K, G, L_mom, L_cont)`` of the weak outer
    boundary terms; the inflow enters only through ``L_mom`` and ``L_cont``,
    which are linear in ``u_in``.
    """

    name: str
    basis: ReducedBasis
    K: np.ndarray
    B: np.ndarray
    p_mass: np.ndarray
    exterior: dict
    p_mass_full: np.ndarray
    tensor: np.ndarray | None = None
    eqp: "EqpRule | None" = None

    @property
    def dim_u(self):
        return self.K.shape[0]

    @property
    def dim_p(self):
        return self.B.shape[0]


def check_orthonormal(Phi, tol=ORTHO_TOL):
    G = Phi.T @ Phi
    err = np.abs(G - np.eye(G.shape[0])).max() if G.size else 0.0
    if err > tol:
        raise DimensionMismatch(f"basis is not orthonormal (max deviation {err:.2e})")
    return err


def project_operators(ops, basis, check=True):
    """Galerkin projection of the single-component operators onto ``basis``."""
    Vu, Vp = basis.Phi_u, basis.Phi_p
    if Vu.shape[0] != ops.space.n_u or Vp.shape[0] != ops.space.n_p:
        raise DimensionMismatch(
            f"basis rows ({Vu.shape[0]}, {Vp.shape[0]}) do not match the space "
            f"({ops.space.n_u}, {ops.space.n_p})"
        )
    if check:
        check_orthonormal(Vu)
        check_orthonormal(Vp)
    K = Vu.T @ (ops.K @ Vu)
    B = Vp.T @ (ops.B @ Vu)
    exterior = {}
    for f, ext in ops.exterior.items():
        exterior[f] = (
            Vu.T @ (ext.K @ Vu),
            Vu.T @ (ext.G @ Vp),
            Vu.T @ ext.L_mom,
            Vp.T @ ext.L_cont,
        )
    return RomComponent(basis.component, basis, K, B, Vp.T @ ops.p_mass, exterior, ops.p_mass.copy())


def project_interface(blk, basis_m, basis_n):
    """Reduced counterpart of a two-domain interface block set."""
    Um, Pm, Un, Pn = basis_m.Phi_u, basis_m.Phi_p, basis_n.Phi_u, basis_n.Phi_p
    return InterfaceBlocks(
        Um.T @ (blk.K_mm @ Um), Um.T @ (blk.K_mn @ Un),
        Un.T @ (blk.K_nm @ Um), Un.T @ (blk.K_nn @ Un),
        Um.T @ (blk.G_mm @ Pm), Um.T @ (blk.G_mn @ Pn),
        Un.T @ (blk.G_nm @ Pm), Un.T @ (blk.G_nn @ Pn),
    )


def basis_at_quadrature(space, Phi_u):
    """Basis values ``(T*Q, 2, R)`` and gradients ``(T*Q, 2, 2, R)`` at all quadrature points.

    ``grads[q, a, d, i] = d (phi_i)_a / d x_d``.
    """
    vals, grads = space.eval_velocity(np.asarray(Phi_u).T)
    R = Phi_u.shape[1]
    V = np.moveaxis(vals.reshape(R, -1, 2), 0, -1)
    D = np.moveaxis(grads.reshape(R, -1, 2, 2), 0, -1)
    return np.ascontiguousarray(V), np.ascontiguousarray(D)


def build_advection_tensor(space, Phi_u, chunk=32):
    """Third-order tensor ``C[i, j, k] = <phi_i, (phi_j . grad) phi_k>``."""
    V, D = basis_at_quadrature(space, Phi_u)
    w = space.qw.ravel()
    R = V.shape[-1]
    C = np.zeros((R, R, R))
    for a in range(2):
        WV = w[:, None] * V[:, a, :]
        for d in range(2):
            Vd, Dad = V[:, d, :], D[:, a, d, :]
            for i0 in range(0, R, chunk):
                i1 = min(R, i0 + chunk)
                P = (WV[:, i0:i1, None] * Vd[:, None, :]).reshape(len(w), -1)
                C[i0:i1] += (P.T @ Dad).reshape(i1 - i0, R, R)
    return C


def eval_advection_tensor(C, u):
    """``sum_jk C[i, j, k] u_j u_k``; ``u`` may be a stack ``(n, R)``."""
    u = np.asarray(u, dtype=float)
    R = C.shape[0]
    if u.shape[-1] != R:
        raise DimensionMismatch(f"state of size {u.shape[-1]} for tensor of size {R}")
    lead = u.shape[:-1]
    U = u.reshape(-1, R)
    outer = (U[:, :, None] * U[:, None, :]).reshape(len(U), R * R)
    return (outer @ C.reshape(R, R * R).T).reshape(lead + (R,))


def tensor_jacobian(C, u, C_swapped=None):
    """``J[i, l] = sum_k C[i, l, k] u_k + sum_j C[i, j, l] u_j`` (stacked like ``u``)."""
    u = np.asarray(u, dtype=float)
    R = C.shape[0]
    if u.shape[-1] != R:
        raise DimensionMismatch(f"state of size {u.shape[-1]} for tensor of size {R}")
    if C_swapped is None:
        C_swapped = np.ascontiguousarray(C.transpose(0, 2, 1))
    lead = u.shape[:-1]
    U = u.reshape(-1, R).T
    J = (C.reshape(R * R, R) @ U) + (C_swapped.reshape(R * R, R) @ U)
    return np.moveaxis(J.reshape(R, R, -1), -1, 0).reshape(lead + (R, R))


@dataclass(eq=False)
class EqpRule:
    """Sampled quadrature points and nonnegative weights for the reduced advection."""

    points: np.ndarray      # (N_q,) flat quadrature point ids (triangle * Q + local)
    coords: np.ndarray      # (N_q, 2)
    weights: np.ndarray     # (N_q,)
    V: np.ndarray           # (N_q, 2, R)
    D: np.ndarray           # (N_q, 2, 2, R)
    residual: float = 0.0
    target: float = 0.0
    n_candidates: int = 0
    status: str = "full"
    info: dict = field(default_factory=dict)

    @property
    def n_points(self):
        return len(self.weights)

    @property
    def triangles(self):
        return self.points // self.info.get("n_local", 7)

    @classmethod
    def full(cls, space, Phi_u):
        """All quadrature points of the mesh with their natural weights."""
        V, D = basis_at_quadrature(space, Phi_u)
        w = space.qw.ravel().copy()
        pts = np.arange(len(w))
        return cls(pts, space.qpoints.reshape(-1, 2).copy(), w, V, D, 0.0, 0.0, len(w), "full",
                   {"n_local": space.qw.shape[1]})


def eqp_system(space, Phi_u, states, V=None, D=None):
    """Rows ``G[(s, i), q] = phi_i(x_q) . (u_s . grad u_s)(x_q)`` and ``b = G w_full``."""
    if V is None:
        V, D = basis_at_quadrature(space, Phi_u)
    S = np.atleast_2d(np.asarray(states, dtype=float))
    u = np.einsum("qai,si->sqa", V, S)
    g = np.einsum("qadi,si->sqad", D, S)
    conv = np.einsum("sqd,sqad->sqa", u, g)
    G = np.einsum("qai,sqa->siq", V, conv).reshape(-1, V.shape[0])
    w_full = space.qw.ravel()
    return G, G @ w_full, V, D


def train_eqp(space, Phi_u, states, delta=0.01, measure_row=True, max_iter=None):
    """Sparse nonnegative quadrature reproducing the projected advection on ``states``.

    Solves ``min ||G w - b||`` with ``w >= 0`` until ``||G w - b|| <= delta *
    ||b_adv||``, where ``b_adv`` are the advection rows (the optional measure
    row keeps ``sum w`` equal to the component area).
    """
    if not 0.0 <= delta < 1.0:
        raise ValueError("delta must lie in [0, 1)")
    G, b, V, D = eqp_system(space, Phi_u, states)
    w_full = space.qw.ravel()
    b_norm = np.linalg.norm(b)
    if measure_row:
        area = w_full.sum()
        alpha = (b_norm / (area * np.sqrt(len(b)))) if b_norm > 0 else 1.0
        G = np.vstack([G, alpha * np.ones((1, G.shape[1]))])
        b = np.concatenate([b, [alpha * area]])
    target = delta * b_norm
    res = nnls(G, b, target=target, max_iter=max_iter)
    if res.residual_norm > target * (1 + 1e-12) + 1e-14 * max(b_norm, 1.0):
        full_res = np.linalg.norm(G @ w_full - b)
        if full_res > target:
            raise InfeasibleTolerance(f"full rule residual {full_res:.2e} exceeds target {target:.2e}")
        if delta > 0:
            log.warning("EQP training stopped at residual %.3e above target %.3e", res.residual_norm, target)
    keep = res.weights > 0
    pts = np.flatnonzero(keep)
    main_res = np.linalg.norm(G[: len(G) - int(measure_row)] @ res.weights - b[: len(b) - int(measure_row)])
    rel = main_res / b_norm if b_norm > 0 else 0.0
    return EqpRule(
        pts, space.qpoints.reshape(-1, 2)[pts].copy(), res.weights[keep].copy(),
        V[pts].copy(), D[pts].copy(), float(rel), float(delta), G.shape[1], res.status,
        {"n_local": space.qw.shape[1], "iterations": res.iterations, "rows": int(G.shape[0]),
         "weight_sum": float(res.weights.sum())},
    )


def _eqp_fields(rule, U):
    n, R = rule.n_points, rule.V.shape[-1]
    val = (U @ rule.V.reshape(n * 2, R).T).reshape(-1, n, 2)
    grad = (U @ rule.D.reshape(n * 4, R).T).reshape(-1, n, 2, 2)
    return val, grad


def _weighted_basis(rule):
    n, R = rule.n_points, rule.V.shape[-1]
    return (rule.V * rule.weights[:, None, None]).reshape(n * 2, R)


def eval_advection_eqp(rule, u):
    """Reduced advection evaluated with the sampled rule; ``u`` may be stacked."""
    u = np.asarray(u, dtype=float)
    R = rule.V.shape[-1]
    if u.shape[-1] != R:
        raise DimensionMismatch(f"state of size {u.shape[-1]} for rule of size {R}")
    lead = u.shape[:-1]
    U = u.reshape(-1, R)
    val, grad = _eqp_fields(rule, U)
    conv = grad[..., 0] * val[:, :, None, 0] + grad[..., 1] * val[:, :, None, 1]
    out = conv.reshape(len(U), -1) @ _weighted_basis(rule)
    return out.reshape(lead + (R,))


def eqp_jacobian(rule, u):
    """Jacobian of ``eval_advection_eqp`` by the product rule at the sampled points."""
    u = np.asarray(u, dtype=float)
    R = rule.V.shape[-1]
    if u.shape[-1] != R:
        raise DimensionMismatch(f"state of size {u.shape[-1]} for rule of size {R}")
    lead = u.shape[:-1]
    U = u.reshape(-1, R)
    val, grad = _eqp_fields(rule, U)
    V, D = rule.V, rule.D
    # d conv_a / d u_l = sum_d du_a/dx_d V[q, d, l] + u_d dV[q, a, d, l]
    T = np.matmul(grad, V)
    T += np.matmul(val[:, :, None, None, :], D)[:, :, :, 0, :]
    J = np.matmul(_weighted_basis(rule).T[None], T.reshape(len(U), -1, R))
    return J.reshape(lead + (R, R))


class RomLibrary:
    """Reduced components and all projected interface blocks of a library.

    ``interfaces[(comp_m, comp_n, face_m)]`` covers every ordered component
    pair and every face, so a global reduced system of any layout is
    assembled by lookup.
    """

    def __init__(self, components, interfaces, nu, sigma, info=None):
        self.components = dict(components)
        self.interfaces = dict(interfaces)
        self.nu = float(nu)
        self.sigma = float(sigma)
        self.info = dict(info or {})
        self._swapped = {}

    @property
    def names(self):
        return list(self.components)

    def interface(self, comp_m, comp_n, face_m):
        return self.interfaces[(comp_m, comp_n, face_m)]

    def swapped_tensor(self, name):
        if name not in self._swapped:
            self._swapped[name] = np.ascontiguousarray(self.components[name].tensor.transpose(0, 2, 1))
        return self._swapped[name]

    @classmethod
    def build(cls, library, bases, tensor=True, eqp_states=None, delta=0.01, measure_row=True):
        """Project ``library`` onto ``bases`` (one ``ReducedBasis`` per component).

        ``eqp_states[c]`` are reduced training states (rows) used to train the
        empirical quadrature of component ``c``; without them no rule is built.
        """
        comps = {}
        for c in library.names:
            if c not in bases:
                raise DimensionMismatch(f"no basis for component {c}")
            rc = project_operators(library.ops[c], bases[c])
            space = library.spaces[c]
            if tensor:
                rc.tensor = build_advection_tensor(space, bases[c].Phi_u)
            if eqp_states is not None:
                rc.eqp = train_eqp(space, bases[c].Phi_u, eqp_states[c], delta, measure_row)
            comps[c] = rc
        inter = {}
        for cm in library.names:
            for cn in library.names:
                for f in FACES:
                    blk = library.interface(cm, cn, f)
                    inter[(cm, cn, f)] = project_interface(blk, bases[cm], bases[cn])
        info = {"delta": delta, "measure_row": measure_row}
        return cls(comps, inter, library.nu, library.sigma, info)

    # -- bundle I/O -----------------------------------------------------
    def save(self, directory, extra=None):
        """Write the bundle: one ``CROM-MAT v1`` file per array plus ``manifest.json``."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        files = {}

        def put(rel, arr):
            path = d / rel
            path.parent.mkdir(parents=True, exist_ok=True)
            write_matrix(path, arr)
            files[rel] = hashlib.sha256(path.read_bytes()).hexdigest()

        comps = {}
        for c, rc in self.components.items():
            b = rc.basis
            put(f"{c}/Phi_u.mat", b.Phi_u)
            put(f"{c}/Phi_p.mat", b.Phi_p)
            put(f"{c}/K.mat", rc.K)
            put(f"{c}/B.mat", rc.B)
            put(f"{c}/p_mass.mat", rc.p_mass)
            put(f"{c}/p_mass_full.mat", rc.p_mass_full)
            put(f"{c}/sigma_u.mat", b.sigma_u)
            put(f"{c}/sigma_p.mat", b.sigma_p)
            for f, (K, G, Lm, Lc) in rc.exterior.items():
                put(f"{c}/exterior_{f}_K.mat", K)
                put(f"{c}/exterior_{f}_G.mat", G)
                put(f"{c}/exterior_{f}_Lmom.mat", Lm)
                put(f"{c}/exterior_{f}_Lcont.mat", Lc)
            entry = {
                "R_u": b.R_u, "R_p": b.R_p, "Z_p": b.Z_p, "dim_u": rc.dim_u, "dim_p": rc.dim_p,
                "n_dropped": b.n_dropped, "tensor": rc.tensor is not None, "eqp": None,
            }
            if rc.tensor is not None:
                R = rc.dim_u
                put(f"{c}/tensor.mat", rc.tensor.reshape(R, R * R))
            if rc.eqp is not None:
                e = rc.eqp
                table = np.column_stack([e.points, e.coords, e.weights])
                put(f"{c}/eqp_points.mat", table)
                put(f"{c}/eqp_V.mat", e.V.reshape(e.n_points, -1))
                put(f"{c}/eqp_D.mat", e.D.reshape(e.n_points, -1))
                entry["eqp"] = {
                    "n_points": e.n_points, "residual": e.residual, "delta": e.target,
                    "n_candidates": e.n_candidates, "status": e.status,
                    "info": {k: v for k, v in e.info.items()},
                }
            comps[c] = entry
        for (cm, cn, f), blk in self.interfaces.items():
            for name in ("K_mm", "K_mn", "K_nm", "K_nn", "G_mm", "G_mn", "G_nm", "G_nn"):
                put(f"interfaces/{cm}__{cn}__{f}/{name}.mat", getattr(blk, name))
        manifest = {
            "format": "CROM-BUNDLE v1",
            "nu": self.nu,
            "sigma": self.sigma,
            "components": comps,
            "info": self.info,
            "files": dict(sorted(files.items())),
        }
        if extra:
            manifest.update(extra)
        (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        return d

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        mpath = d / "manifest.json"
        if not mpath.exists():
            raise MissingArtifact(f"no bundle manifest in {d}")
        manifest = json.loads(mpath.read_text())

        def get(rel):
            path = d / rel
            if not path.exists():
                raise MissingArtifact(str(path))
            return read_matrix(path)

        comps = {}
        for c, entry in manifest["components"].items():
            basis = ReducedBasis(c, get(f"{c}/Phi_u.mat"), get(f"{c}/Phi_p.mat"), entry["R_u"], entry["R_p"],
                                 entry["Z_p"], get(f"{c}/sigma_u.mat").ravel(), get(f"{c}/sigma_p.mat").ravel(),
                                 entry["n_dropped"])
            exterior = {}
            for f in FACES:
                exterior[f] = (get(f"{c}/exterior_{f}_K.mat"), get(f"{c}/exterior_{f}_G.mat"),
                               get(f"{c}/exterior_{f}_Lmom.mat"), get(f"{c}/exterior_{f}_Lcont.mat"))
            rc = RomComponent(c, basis, get(f"{c}/K.mat"), get(f"{c}/B.mat"), get(f"{c}/p_mass.mat").ravel(),
                              exterior, get(f"{c}/p_mass_full.mat").ravel())
            R = rc.dim_u
            if entry["tensor"]:
                rc.tensor = get(f"{c}/tensor.mat").reshape(R, R, R)
            if entry["eqp"] is not None:
                e = entry["eqp"]
                table = get(f"{c}/eqp_points.mat")
                n = table.shape[0]
                rc.eqp = EqpRule(table[:, 0].astype(np.int64), table[:, 1:3].copy(), table[:, 3].copy(),
                                 get(f"{c}/eqp_V.mat").reshape(n, 2, R), get(f"{c}/eqp_D.mat").reshape(n, 2, 2, R),
                                 e["residual"], e["delta"], e["n_candidates"], e["status"], e["info"])
            comps[c] = rc
        inter = {}
        for cm in comps:
            for cn in comps:
                for f in FACES:
                    base = f"interfaces/{cm}__{cn}__{f}"
                    inter[(cm, cn, f)] = InterfaceBlocks(*(get(f"{base}/{n}.mat") for n in (
                        "K_mm", "K_mn", "K_nm", "K_nn", "G_mm", "G_mn", "G_nm", "G_nn")))
        lib = cls(comps, inter, manifest["nu"], manifest["sigma"], manifest.get("info"))
        lib.manifest = manifest
        return lib
