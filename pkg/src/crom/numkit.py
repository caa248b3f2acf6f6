"""Dense and sparse numerical kernels used by the reduction pipeline."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg as sla
from scipy.linalg import blas, lapack
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceFailure, NonConvergence, SingularSystem

log = logging.getLogger(__name__)


def svd_thin(A, method="lapack", rel_cutoff=1e-8):
    """Thin SVD ``A = U diag(s) Vt`` with nonincreasing singular values.

    ``method='gram'`` diagonalizes ``A.T @ A`` instead of calling LAPACK's
    SVD; modes with ``s < rel_cutoff * s_max`` are discarded there because
    the squared spectrum cannot resolve them.
    """
    A = np.asarray(A, dtype=float)
    if not np.isfinite(A).all():
        raise ValueError("svd_thin needs finite input")
    if method == "lapack":
        try:
            U, s, Vt = np.linalg.svd(A, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise ConvergenceFailure(str(exc)) from exc
        return U, s, Vt
    if method != "gram":
        raise ValueError(f"unknown svd method {method!r}")
    lam, V = np.linalg.eigh(A.T @ A)
    order = np.argsort(lam)[::-1]
    lam, V = lam[order], V[:, order]
    s = np.sqrt(np.clip(lam, 0.0, None))
    keep = s > rel_cutoff * (s[0] if len(s) else 0.0)
    s, V = s[keep], V[:, keep]
    U = A @ V / s
    return U, s, V.T


@dataclass
class NnlsResult:
    weights: np.ndarray
    active: np.ndarray
    residual_norm: float
    iterations: int
    status: str = "converged"  # converged | target_met | stalled

    @property
    def stalled(self):
        return self.status == "stalled"


class _QR:
    """Economic QR of the columns of ``G`` indexed by a growing/shrinking set."""

    def __init__(self, G):
        self.G = G
        self.cols = []
        self.Q = np.zeros((G.shape[0], 0))
        self.R = np.zeros((0, 0))

    def add(self, j):
        """Append column ``j``; returns False (and leaves the set unchanged) if it is dependent."""
        k = len(self.cols)
        if k >= self.G.shape[0]:
            return False
        if k == 0:
            Q, R = np.linalg.qr(self.G[:, [j]])
        else:
            try:
                Q, R = sla.qr_insert(self.Q, self.R, self.G[:, j], k, which="col", rcond=1e-12)
            except sla.LinAlgError:
                return False
        if abs(R[k, k]) <= 1e-12 * max(np.linalg.norm(self.G[:, j]), np.finfo(float).tiny):
            return False
        self.Q, self.R = Q, R
        self.cols.append(j)
        return True

    def remove(self, j):
        k = self.cols.index(j)
        self.cols.pop(k)
        if not self.cols:
            self.Q = np.zeros((self.G.shape[0], 0))
            self.R = np.zeros((0, 0))
            return
        Q, R = sla.qr_delete(self.Q, self.R, k, 1, which="col")
        # a square Q is taken as a full decomposition; keep the economic part
        n = len(self.cols)
        self.Q, self.R = Q[:, :n], R[:n, :n]

    def lstsq(self, b):
        return sla.solve_triangular(self.R, self.Q.T @ b)


def nnls(G, b, target=0.0, max_iter=None, kkt_tol=None):
    """Lawson-Hanson active-set NNLS with an optional accuracy target.

    The iteration stops as soon as ``||G w - b|| <= target``; with
    ``target=0`` it runs until the KKT conditions hold.  Least-squares
    subproblems are solved with an incrementally updated QR factorization.
    """
    G = np.asarray(G, dtype=float)
    b = np.asarray(b, dtype=float)
    m, n = G.shape
    if target < 0:
        raise ValueError("target must be nonnegative")
    max_iter = 3 * n if max_iter is None else max_iter
    if kkt_tol is None:
        kkt_tol = 1e-12 * max(np.linalg.norm(G.T @ b), np.finfo(float).tiny)
    w = np.zeros(n)
    r = b.copy()
    rnorm = np.linalg.norm(r)
    if rnorm <= target:
        return NnlsResult(w, np.zeros(0, dtype=int), rnorm, 0, "target_met")
    qr = _QR(G)
    passive = np.zeros(n, dtype=bool)
    best = (rnorm, w.copy())
    tried = set()
    dependent = set()
    it = 0
    status = "converged"
    while it < max_iter:
        dual = G.T @ r
        dual[passive] = -np.inf
        dual[list(dependent)] = -np.inf
        j = int(np.argmax(dual))
        if dual[j] <= kkt_tol:
            break
        key = (j, frozenset(qr.cols))
        if key in tried:
            status = "stalled"
            break
        tried.add(key)
        if not qr.add(j):
            # column lies in the span of the passive set: skip it until that set shrinks
            dependent.add(j)
            continue
        passive[j] = True
        while True:
            it += 1
            z = np.zeros(n)
            z[qr.cols] = qr.lstsq(b)
            cols = np.array(qr.cols)
            if (z[cols] > 0).all():
                w = z
                break
            neg = cols[z[cols] <= 0]
            ratio = w[neg] / (w[neg] - z[neg])
            alpha = ratio.min()
            w = w + alpha * (z - w)
            w[neg[np.argmin(ratio)]] = 0.0
            drop = cols[w[cols] <= 1e-15 * max(1.0, np.abs(w).max())]
            for d in drop:
                passive[d] = False
                w[d] = 0.0
                qr.remove(int(d))
            if len(drop):
                dependent.clear()
            if not qr.cols or it >= max_iter:
                break
        r = b - G @ w
        rnorm = np.linalg.norm(r)
        if rnorm < best[0]:
            best = (rnorm, w.copy())
        if rnorm <= target:
            status = "target_met"
            break
    else:
        status = "stalled"
    if status == "stalled":
        log.warning("nnls stalled after %d iterations; returning best iterate", it)
        rnorm, w = best
    active = np.flatnonzero(w > 0)
    return NnlsResult(w, active, float(rnorm), it, status)


def mgs_orthonormalize(columns, drop_tol=1e-10):
    """Modified Gram-Schmidt with one reorthogonalization pass.

    Columns whose remaining norm falls below ``drop_tol`` times their original
    norm are dropped.  Returns ``(Q, n_dropped)``.
    """
    A = np.array(columns, dtype=float, copy=True)
    if A.ndim == 1:
        A = A[:, None]
    kept = []
    dropped = 0
    for j in range(A.shape[1]):
        v = A[:, j].copy()
        norm0 = np.linalg.norm(v)
        if norm0 == 0.0:
            dropped += 1
            continue
        for _ in range(2):
            for q in kept:
                v -= (q @ v) * q
        nv = np.linalg.norm(v)
        if nv < drop_tol * norm0:
            dropped += 1
            continue
        kept.append(v / nv)
    Q = np.column_stack(kept) if kept else np.zeros((A.shape[0], 0))
    return Q, dropped


class Factorization:
    """Sparse LU factorization with a residual-checked ``solve``."""

    def __init__(self, A, permc_spec="COLAMD", diag_pivot_thresh=None):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError("system must be square")
        self.A = A
        kw = {"permc_spec": permc_spec}
        if diag_pivot_thresh is not None:
            kw["diag_pivot_thresh"] = diag_pivot_thresh
            kw["options"] = {"SymmetricMode": diag_pivot_thresh < 1.0}
        try:
            self.lu = spla.splu(A, **kw)
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from exc

    def solve(self, b, rtol=1e-10, refine=3, check=True):
        b = np.asarray(b, dtype=float)
        x = self.lu.solve(b)
        if not np.isfinite(x).all():
            raise SingularSystem("factorization produced non-finite values")
        if not check:
            return x
        bn = np.linalg.norm(b)
        if bn == 0.0:
            return x
        for _ in range(refine + 1):
            r = b - self.A @ x
            if np.linalg.norm(r) <= rtol * bn:
                return x
            x = x + self.lu.solve(r)
        r = b - self.A @ x
        if np.linalg.norm(r) <= rtol * bn:
            return x
        x2, info = spla.gmres(self.A, b, x0=x, rtol=rtol, maxiter=200, M=spla.LinearOperator(self.A.shape, self.lu.solve))
        if info != 0 or np.linalg.norm(b - self.A @ x2) > rtol * bn:
            raise NonConvergence(f"relative residual {np.linalg.norm(b - self.A @ x2) / bn:.2e} above {rtol:.0e}")
        return x2


def solve_linear(A, b, rtol=1e-10):
    """Solve a square sparse system to relative residual ``rtol``."""
    return Factorization(A).solve(b, rtol=rtol)


_MAT_MAGIC = b"CROM-MAT v1\n"


def write_matrix(path, A):
    """Binary dense matrix: magic line, ``rows cols`` line, little-endian float64 row-major."""
    A = np.asarray(A, dtype=float)
    if A.ndim == 1:
        A = A[:, None]
    if A.ndim != 2:
        raise ValueError("only 2-D arrays can be written")
    with open(path, "wb") as fh:
        fh.write(_MAT_MAGIC)
        fh.write(f"{A.shape[0]} {A.shape[1]}\n".encode())
        fh.write(np.ascontiguousarray(A, dtype="<f8").tobytes())


def read_matrix(path):
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAT_MAGIC):
        raise ValueError(f"{path}: not a CROM-MAT v1 file")
    rest = raw[len(_MAT_MAGIC):]
    nl = rest.index(b"\n")
    rows, cols = (int(v) for v in rest[:nl].split())
    data = np.frombuffer(rest[nl + 1:], dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"{path}: expected {rows * cols} values, found {data.size}")
    return data.reshape(rows, cols).astype(float)


class BlockGridSolver:
    """Direct solver for block systems on an ``M x N`` grid of cells.

    The matrix consists of dense diagonal blocks, dense blocks between grid
    neighbors and one bordering unknown (a gauge multiplier, stored last)
    coupled to every cell.  Cells are ordered by nested dissection along grid
    rows and columns and every front is factored densely with LAPACK.  The
    symbolic structure is computed once; ``factor`` may be called repeatedly
    with new block values.
    """

    def __init__(self, shape, block_sizes, leaf_cells=2):
        self.shape = tuple(shape)
        M, N = self.shape
        sizes = np.asarray(block_sizes, dtype=np.int64)
        if len(sizes) != M * N:
            raise ValueError("one block size per cell is required")
        self.n_cells = M * N
        self.border_id = M * N
        self.sizes = np.concatenate([sizes, [1]])
        self.offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.n = int(self.offsets[-1])
        self.nodes = []
        top = self._dissect([(i, j) for i in range(M) for j in range(N)], leaf_cells)
        self.root = len(self.nodes)
        self.nodes.append({"own": [self.border_id], "children": [top]})
        self._boundaries(self.root)
        self.order = []
        self._postorder(self.root)
        self._symbolic()

    def _dissect(self, cells, leaf):
        if len(cells) <= leaf:
            self.nodes.append({"own": [i * self.shape[1] + j for i, j in cells], "children": []})
            return len(self.nodes) - 1
        rows = sorted({c[0] for c in cells})
        cols = sorted({c[1] for c in cells})
        key, vals = (1, cols) if len(cols) >= len(rows) else (0, rows)
        mid = vals[len(vals) // 2]
        parts = ([c for c in cells if c[key] < mid], [c for c in cells if c[key] > mid])
        children = [self._dissect(part, leaf) for part in parts if part]
        sep = [i * self.shape[1] + j for i, j in cells if (i, j)[key] == mid]
        self.nodes.append({"own": sep, "children": children})
        return len(self.nodes) - 1

    def neighbors(self, m):
        """Grid neighbors of cell ``m`` (the border unknown touches every cell)."""
        if m == self.border_id:
            return list(range(self.n_cells))
        M, N = self.shape
        i, j = divmod(m, N)
        out = [ii * N + jj for ii, jj in ((i - 1, j), (i, j - 1), (i, j + 1), (i + 1, j))
               if 0 <= ii < M and 0 <= jj < N]
        return out + [self.border_id]

    def _boundaries(self, t):
        node = self.nodes[t]
        sub = set(node["own"])
        for ch in node["children"]:
            sub |= self._boundaries(ch)
        adj = set()
        for m in sub:
            if m != self.border_id:
                adj.update(self.neighbors(m))
        node["bnd"] = sorted(adj - sub)
        return sub

    def _postorder(self, t):
        for ch in self.nodes[t]["children"]:
            self._postorder(ch)
        self.order.append(t)

    def _symbolic(self):
        sz = self.sizes
        for t in self.order:
            node = self.nodes[t]
            cells = node["own"] + node["bnd"]
            pos, k = {}, 0
            for m in cells:
                pos[m] = k
                k += int(sz[m])
            node["pos"] = pos
            node["n_own"] = sum(int(sz[m]) for m in node["own"])
            node["dim"] = k
            node["own_idx"] = np.concatenate([np.arange(self.offsets[m], self.offsets[m + 1]) for m in node["own"]])
            bnd = node["bnd"]
            node["bnd_idx"] = (np.concatenate([np.arange(self.offsets[m], self.offsets[m + 1]) for m in bnd])
                               if bnd else np.zeros(0, dtype=np.int64))
            pairs = []
            for m in node["own"]:
                pairs.append((m, m))
                for n in self.neighbors(m):
                    if n in pos and n != m:
                        pairs.append((m, n))
                        if n not in node["own"]:
                            pairs.append((n, m))
            node["pairs"] = pairs
        for t in self.order:
            node = self.nodes[t]
            for ch in node["children"]:
                child = self.nodes[ch]
                runs = []
                c0 = 0
                for m in child["bnd"]:
                    p0, ln = node["pos"][m], int(sz[m])
                    if runs and runs[-1][0] + runs[-1][2] == c0 and runs[-1][1] + runs[-1][2] == p0:
                        runs[-1][2] += ln
                    else:
                        runs.append([c0, p0, ln])
                    c0 += ln
                child["runs"] = runs

    def _block(self, m, n):
        if m == n:
            return np.zeros((1, 1)) if m == self.border_id else self.diag[m]
        if n == self.border_id:
            return self.border[m][:, None]
        if m == self.border_id:
            return self.border[n][None, :]
        return self.off[(m, n)]

    def factor(self, diag, off, border):
        """Factor the system.

        ``diag[m]`` is the dense diagonal block of cell ``m``, ``off[(m, n)]``
        the block coupling rows of ``m`` to columns of neighbor ``n`` and
        ``border[m]`` the column coupling cell ``m`` to the bordering unknown;
        the border row is taken as its transpose.
        """
        self.diag, self.off, self.border = diag, off, border
        sz = self.sizes
        updates = {}
        self.fronts = {}
        for t in self.order:
            node = self.nodes[t]
            pos, no = node["pos"], node["n_own"]
            F = np.zeros((node["dim"], node["dim"]), order="F")
            for m, n in node["pairs"]:
                a, b = pos[m], pos[n]
                F[a:a + sz[m], b:b + sz[n]] += self._block(m, n)
            for ch in node["children"]:
                U = updates.pop(ch)
                for ci, pi, li in self.nodes[ch]["runs"]:
                    for cj, pj, lj in self.nodes[ch]["runs"]:
                        F[pi:pi + li, pj:pj + lj] += U[ci:ci + li, cj:cj + lj]
            lu, piv, info = lapack.dgetrf(F[:no, :no])
            if info != 0 or not np.isfinite(lu).all():
                raise SingularSystem(f"singular front in block factorization (info={info})")
            if no < node["dim"]:
                W, info = lapack.dgetrs(lu, piv, F[:no, no:])
                U = blas.dgemm(-1.0, F[no:, :no], W, 1.0, F[no:, no:])
                updates[t] = U
                self.fronts[t] = (lu, piv, W, np.array(F[no:, :no]))
            else:
                self.fronts[t] = (lu, piv, None, None)
        return self

    def solve(self, b):
        x = np.array(b, dtype=float, copy=True)
        ys = {}
        for t in self.order:
            node = self.nodes[t]
            lu, piv, W, F_bo = self.fronts[t]
            y, _ = lapack.dgetrs(lu, piv, x[node["own_idx"]])
            if W is not None:
                x[node["bnd_idx"]] -= F_bo @ y
            ys[t] = y
        for t in reversed(self.order):
            node = self.nodes[t]
            lu, piv, W, F_bo = self.fronts[t]
            y = ys[t]
            x[node["own_idx"]] = y - W @ x[node["bnd_idx"]] if W is not None else y
        return x

    def matvec(self, x):
        y = np.zeros(self.n)
        for m in range(self.n_cells + 1):
            a, b = self.offsets[m], self.offsets[m + 1]
            y[a:b] += self._block(m, m) @ x[a:b]
            for n in self.neighbors(m):
                y[a:b] += self._block(m, n) @ x[self.offsets[n]:self.offsets[n + 1]]
        return y
