"""Single-scale finite element kernel for plane linear elasticity on Q4/Q9 meshes.

Element dof order is node-major: ``[u1_x, u1_y, u2_x, u2_y, ...]``; global dof of
node ``n`` and component ``c`` is ``2*n + c``.  Strains are Voigt vectors
``(e11, e22, gamma12)`` with engineering shear.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import StructuredQuadMesh

log = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10


class GeometryError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    pass


class RankDeficientConstraintError(SingularSystemError):
    def __init__(self, msg, rows):
        super().__init__(msg)
        self.rows = list(rows)


# ---------------------------------------------------------------- quadrature

@dataclass(frozen=True)
class QuadratureRule:
    points: np.ndarray  # (nq, 2)
    weights: np.ndarray  # (nq,)
    degree: int  # exact for tensor-product polynomials up to this degree per variable

    @property
    def n_points(self) -> int:
        return len(self.weights)


@lru_cache(maxsize=None)
def gauss_rule(n: int) -> QuadratureRule:
    """Tensor Gauss-Legendre rule with ``n`` points per direction (xi fastest)."""
    x, w = np.polynomial.legendre.leggauss(n)
    X, Y = np.meshgrid(x, x, indexing="xy")
    W = np.outer(w, w)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    pts.setflags(write=False)
    W = W.ravel()
    W.setflags(write=False)
    return QuadratureRule(pts, W, 2 * n - 1)


def default_rule(order: int) -> QuadratureRule:
    """Full integration: 2x2 for Q4, 3x3 for Q9."""
    return gauss_rule(order + 1)


# ------------------------------------------------------------ shape functions

_Q9_NODES = np.array([(-1, -1), (1, -1), (1, 1), (-1, 1), (0, -1), (1, 0), (0, 1), (-1, 0), (0, 0)])
_Q4_NODES = _Q9_NODES[:4]


def reference_nodes(order: int) -> np.ndarray:
    return (_Q4_NODES if order == 1 else _Q9_NODES).astype(float)


def _lagrange1d(order, t, k):
    """Value and derivative of the 1D Lagrange polynomial attached to node k in {-1, 0, 1}."""
    if order == 1:
        return 0.5 * (1 + k * t), 0.5 * k * np.ones_like(t)
    if k == -1:
        return 0.5 * t * (t - 1), t - 0.5
    if k == 1:
        return 0.5 * t * (t + 1), t + 0.5
    return 1 - t * t, -2 * t


def shape_functions(order: int, xi) -> tuple[np.ndarray, np.ndarray]:
    """Values ``(..., nen)`` and reference gradients ``(..., nen, 2)`` at ``xi`` of shape ``(..., 2)``."""
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    xi = np.asarray(xi, dtype=float)
    s, t = xi[..., 0], xi[..., 1]
    N, dN = [], []
    for a, b in reference_nodes(order):
        ls, dls = _lagrange1d(order, s, a)
        lt, dlt = _lagrange1d(order, t, b)
        N.append(ls * lt)
        dN.append(np.stack([dls * lt, ls * dlt], axis=-1))
    return np.stack(N, axis=-1), np.stack(dN, axis=-2)


def strain_operator(dNdx: np.ndarray) -> np.ndarray:
    """B matrices ``(..., 3, 2*nen)`` from physical gradients ``(..., nen, 2)``."""
    shape = dNdx.shape[:-2]
    nen = dNdx.shape[-2]
    B = np.zeros(shape + (3, 2 * nen))
    B[..., 0, 0::2] = dNdx[..., 0]
    B[..., 1, 1::2] = dNdx[..., 1]
    B[..., 2, 0::2] = dNdx[..., 1]
    B[..., 2, 1::2] = dNdx[..., 0]
    return B


# ------------------------------------------------------------------ geometry

@dataclass(frozen=True)
class ElementGeometry:
    """Per-element quadrature data of a mesh."""

    x: np.ndarray  # (ne, nq, 2) physical quadrature points
    detJ: np.ndarray  # (ne, nq)
    w: np.ndarray  # (ne, nq) weight * detJ
    N: np.ndarray  # (nq, nen)
    dNdx: np.ndarray  # (ne, nq, nen, 2)
    rule: QuadratureRule

    @property
    def B(self) -> np.ndarray:
        return strain_operator(self.dNdx)


def _geometry(coords: np.ndarray, order: int, rule: QuadratureRule) -> ElementGeometry:
    N, dN = shape_functions(order, rule.points)  # (nq, nen), (nq, nen, 2)
    x = np.einsum("qa,ead->eqd", N, coords)
    J = np.einsum("qak,ead->eqdk", dN, coords)  # dx_d / dxi_k
    detJ = J[..., 0, 0] * J[..., 1, 1] - J[..., 0, 1] * J[..., 1, 0]
    if np.any(detJ <= 0):
        bad = np.unique(np.nonzero(detJ <= 0)[0])
        raise GeometryError(f"non-positive Jacobian in element(s) {bad[:10].tolist()}")
    inv = np.empty_like(J)
    inv[..., 0, 0] = J[..., 1, 1]
    inv[..., 1, 1] = J[..., 0, 0]
    inv[..., 0, 1] = -J[..., 0, 1]
    inv[..., 1, 0] = -J[..., 1, 0]
    inv /= detJ[..., None, None]
    dNdx = np.einsum("qak,eqkd->eqad", dN, inv)
    return ElementGeometry(x, detJ, detJ * rule.weights, N, dNdx, rule)


def element_geometry(mesh: StructuredQuadMesh, rule: QuadratureRule | None = None,
                     elements=None) -> ElementGeometry:
    rule = rule or default_rule(mesh.order)
    conn = mesh.elements if elements is None else mesh.elements[np.atleast_1d(elements)]
    return _geometry(mesh.nodes[conn], mesh.order, rule)


def element_dofs(conn: np.ndarray) -> np.ndarray:
    conn = np.asarray(conn)
    return np.stack([2 * conn, 2 * conn + 1], axis=-1).reshape(conn.shape[:-1] + (-1,))


def material_at(material, x: np.ndarray) -> np.ndarray:
    """Evaluate a material description at points ``x``: constant (3,3) array, callable, or field."""
    if hasattr(material, "tensor"):
        return material.tensor(x)
    if callable(material):
        return np.asarray(material(x), dtype=float)
    A = np.asarray(material, dtype=float)
    if A.shape == (3, 3):
        return np.broadcast_to(A, x.shape[:-1] + (3, 3))
    return A


# ----------------------------------------------------------------- stiffness

def stiffness_from_geometry(geom: ElementGeometry, A_qp: np.ndarray) -> np.ndarray:
    B = geom.B
    return np.einsum("eq,eqip,eqij,eqjr->epr", geom.w, B, A_qp, B, optimize=True)


def element_stiffness(coords, material, rule: QuadratureRule | None = None) -> np.ndarray:
    """Dense stiffness of one element with node coordinates ``coords`` (4 or 9 rows)."""
    coords = np.asarray(coords, dtype=float)
    order = 1 if coords.shape[0] == 4 else 2
    rule = rule or default_rule(order)
    geom = _geometry(coords[None], order, rule)
    A = material_at(material, geom.x)
    k = stiffness_from_geometry(geom, A)[0]
    return 0.5 * (k + k.T)


def element_stiffnesses(mesh: StructuredQuadMesh, material, rule: QuadratureRule | None = None,
                        geom: ElementGeometry | None = None) -> np.ndarray:
    geom = geom or element_geometry(mesh, rule)
    A = material_at(material, geom.x)
    k = stiffness_from_geometry(geom, A)
    return 0.5 * (k + np.swapaxes(k, 1, 2))


def assemble(mesh: StructuredQuadMesh, ke: np.ndarray) -> sp.csr_matrix:
    """Scatter-add element matrices ``(ne, nd, nd)`` into a CSR matrix.

    Contributions to each entry are summed in a canonical order (sorted by value),
    so the result does not depend on element ordering.
    """
    ke = np.asarray(ke)
    if ke.ndim == 2:
        ke = np.broadcast_to(ke, (mesh.n_elements,) + ke.shape)
    edofs = element_dofs(mesh.elements)
    nd = edofs.shape[1]
    rows = np.repeat(edofs, nd, axis=1).ravel()
    cols = np.tile(edofs, (1, nd)).ravel()
    vals = ke.reshape(-1)
    n = mesh.n_dofs
    key = rows.astype(np.int64) * n + cols
    order = np.lexsort((vals, key))
    key = key[order]
    vals = vals[order]
    start = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
    summed = np.add.reduceat(vals, start)
    ukey = key[start]
    K = sp.csr_matrix((summed, (ukey // n, ukey % n)), shape=(n, n))
    K.sort_indices()
    return K


def assemble_stiffness(mesh: StructuredQuadMesh, material, rule: QuadratureRule | None = None) -> sp.csr_matrix:
    return assemble(mesh, element_stiffnesses(mesh, material, rule))


def load_vector(mesh: StructuredQuadMesh, body_force, rule: QuadratureRule | None = None) -> np.ndarray:
    """Consistent nodal forces of a body force (constant 2-vector or callable of x)."""
    geom = element_geometry(mesh, rule)
    if callable(body_force):
        f = np.asarray(body_force(geom.x), dtype=float)
    else:
        f = np.broadcast_to(np.asarray(body_force, dtype=float), geom.x.shape)
    fe = np.einsum("eq,qa,eqd->ead", geom.w, geom.N, f).reshape(mesh.n_elements, -1)
    F = np.zeros(mesh.n_dofs)
    np.add.at(F, element_dofs(mesh.elements), fe)
    return F


def edge_load_vector(mesh: StructuredQuadMesh, edge: str, traction) -> np.ndarray:
    """Consistent nodal forces of a traction (force per length) on one boundary side."""
    els, enodes = mesh.edge_elements(edge)
    order = mesh.order
    x1, w1 = np.polynomial.legendre.leggauss(order + 2)
    if order == 1:
        N = np.column_stack([(1 - x1) / 2, (1 + x1) / 2])
        dN = np.column_stack([-0.5 * np.ones_like(x1), 0.5 * np.ones_like(x1)])
    else:
        N = np.column_stack([x1 * (x1 - 1) / 2, 1 - x1 ** 2, x1 * (x1 + 1) / 2])
        dN = np.column_stack([x1 - 0.5, -2 * x1, x1 + 0.5])
    X = mesh.nodes[enodes]  # (ne, nloc, 2)
    xq = np.einsum("qa,ead->eqd", N, X)
    tq = np.einsum("qa,ead->eqd", dN, X)
    jac = np.linalg.norm(tq, axis=-1)
    if callable(traction):
        t = np.asarray(traction(xq), dtype=float)
    else:
        t = np.broadcast_to(np.asarray(traction, dtype=float), xq.shape)
    fe = np.einsum("q,eq,qa,eqd->ead", w1, jac, N, t)
    F = np.zeros(mesh.n_dofs)
    np.add.at(F, np.stack([2 * enodes, 2 * enodes + 1], axis=-1), fe)
    return F


# ------------------------------------------------------------------- solvers

class Factorization:
    """Sparse LU handle with a residual check and one step of iterative refinement.

    ``perm`` is an optional symmetric ordering computed by the caller (e.g. nested
    dissection of a structured mesh); SuperLU then keeps it as given.
    """

    # above this size the pivot scan (which copies U) is skipped; the residual checks remain
    PIVOT_SCAN_MAX = 200_000

    def __init__(self, A: sp.spmatrix, pivot_thresh: float = 0.0, permc_spec: str = "MMD_AT_PLUS_A",
                 perm: np.ndarray | None = None):
        # pivot_thresh 0 keeps the symmetric ordering (SPD); saddle systems need threshold pivoting
        self.A = sp.csc_matrix(A)
        self.perm = None if perm is None else np.asarray(perm)
        if self.A.shape[0] == 0:
            # nothing left to solve for, e.g. a one-element RVE with every node prescribed
            self.lu = None
            return
        Af = self.A
        if self.perm is not None:
            Af = self.A[self.perm][:, self.perm].tocsc()
            permc_spec = "NATURAL"
        try:
            self.lu = spla.splu(Af, permc_spec=permc_spec, diag_pivot_thresh=pivot_thresh,
                                options={"SymmetricMode": pivot_thresh == 0.0})
        except RuntimeError as exc:
            raise SingularSystemError(f"factorization failed ({self.A.shape[0]} unknowns): {exc}") from exc
        del Af
        if self.A.shape[0] <= self.PIVOT_SCAN_MAX:
            self._check_pivots()

    def _check_pivots(self):
        d = np.abs(self.lu.U.diagonal())
        scale = d.max() if d.size else 1.0
        bad = np.flatnonzero(d <= 1e-13 * scale)
        if bad.size:
            raise SingularSystemError(
                f"matrix of size {self.A.shape[0]} is numerically singular: {bad.size} negligible pivot(s)"
            )

    @property
    def shape(self):
        return self.A.shape

    def _lu_solve(self, b):
        if self.perm is None:
            return self.lu.solve(b)
        x = np.empty_like(b)
        x[self.perm] = self.lu.solve(np.ascontiguousarray(b[self.perm]))
        return x

    def solve(self, b: np.ndarray, refine: bool = True) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        if self.lu is None:
            return b.copy()
        x = self._lu_solve(b)
        if refine:
            r = b - self.A @ x
            x = x + self._lu_solve(r)
        return x

    def residual(self, x, b) -> float:
        r = np.asarray(b) - self.A @ x
        denom = max(np.linalg.norm(b), np.linalg.norm(self.A @ x), 1e-300)
        return float(np.linalg.norm(r) / denom)


def nested_dissection(mesh: StructuredQuadMesh, leaf: int = 64) -> np.ndarray:
    """Node ordering by recursive bisection of the structured node grid.

    Separators run along element boundaries (every ``order``-th grid line), so each
    one decouples its two halves; it is numbered after both.
    """
    gx, gy, step = mesh.gx, mesh.gy, mesh.order
    out = []
    stack = [(0, gx, 0, gy, False)]
    # iterative post-order: children first, then the separator
    while stack:
        i0, i1, j0, j1, emit = stack.pop()
        if emit:
            out.append(np.asarray(i0))
            continue
        w, h = i1 - i0, j1 - j0
        if w * h <= leaf:
            J, I = np.mgrid[j0:j1, i0:i1]
            out.append((J * gx + I).ravel())
            continue
        if w >= h:
            m = ((i0 + w // 2) // step) * step
            if not i0 < m < i1 - 1:
                J, I = np.mgrid[j0:j1, i0:i1]
                out.append((J * gx + I).ravel())
                continue
            sep = np.arange(j0, j1) * gx + m
            parts = [(i0, m, j0, j1), (m + 1, i1, j0, j1)]
        else:
            m = ((j0 + h // 2) // step) * step
            if not j0 < m < j1 - 1:
                J, I = np.mgrid[j0:j1, i0:i1]
                out.append((J * gx + I).ravel())
                continue
            sep = m * gx + np.arange(i0, i1)
            parts = [(i0, i1, j0, m), (i0, i1, m + 1, j1)]
        stack.append((sep, None, None, None, True))
        for p in reversed(parts):
            stack.append(p + (False,))
    return np.concatenate(out)


def dof_ordering(mesh: StructuredQuadMesh, keep: np.ndarray | None = None) -> np.ndarray:
    """Nested-dissection ordering of the dofs in ``keep`` (all dofs if None), as positions into ``keep``."""
    nodes = nested_dissection(mesh)
    dofs = np.stack([2 * nodes, 2 * nodes + 1], axis=-1).ravel()
    if keep is None:
        return dofs
    pos = np.full(mesh.n_dofs, -1)
    pos[keep] = np.arange(len(keep))
    p = pos[dofs]
    return p[p >= 0]


def factorize_spd(K: sp.spmatrix) -> Factorization:
    return Factorization(K)


def solve_spd(K: sp.spmatrix, F: np.ndarray, fixed_dofs=(), fixed_values=0.0,
              return_factorization: bool = False, mesh: StructuredQuadMesh | None = None):
    """Solve ``K d = F`` with prescribed values on ``fixed_dofs``.

    Passing the ``mesh`` switches to a nested-dissection ordering, which needs less fill
    than minimum degree on large structured meshes.
    """
    K = sp.csr_matrix(K)
    n = K.shape[0]
    F = np.asarray(F, dtype=float)
    fixed = np.asarray(fixed_dofs, dtype=int).ravel()
    d = np.zeros(n)
    d[fixed] = fixed_values
    free = np.setdiff1d(np.arange(n), fixed)
    Kff = K[free][:, free]
    rhs = F[free] - K[free][:, fixed] @ d[fixed]
    try:
        perm = None if mesh is None else dof_ordering(mesh, free)
        fac = Factorization(Kff, perm=perm)
    except SingularSystemError as exc:
        raise SingularSystemError(
            f"{exc}; {free.size} free of {n} dofs, {fixed.size} fixed. "
            "Prescribed dofs probably do not remove all rigid modes."
        ) from exc
    d[free] = fac.solve(rhs)
    res = np.linalg.norm(Kff @ d[free] - rhs)
    scale = max(np.linalg.norm(rhs), spla.norm(Kff, np.inf) * np.linalg.norm(d[free]))
    if res > RESIDUAL_TOL * scale:
        raise SingularSystemError(f"SPD solve residual {res:.3e} exceeds tolerance")
    if return_factorization:
        return d, fac
    return d


@dataclass
class ConstrainedSystem:
    K: sp.spmatrix
    G: sp.spmatrix
    rhs_primal: np.ndarray | None = None
    rhs_constraint: np.ndarray | None = None


def check_constraint_rank(G: sp.spmatrix, rtol: float = 1e-10) -> None:
    """Raise ``RankDeficientConstraintError`` if the rows of ``G`` are dependent."""
    G = sp.csr_matrix(G)
    m = G.shape[0]
    if m == 0:
        return
    rn = np.sqrt(np.asarray(G.multiply(G).sum(axis=1)).ravel())
    if np.any(rn <= 0):
        rows = np.flatnonzero(rn <= 0)
        raise RankDeficientConstraintError(f"constraint rows {rows[:20].tolist()} are empty", rows)
    Gn = sp.diags(1.0 / rn) @ G
    gram = (Gn @ Gn.T).tocsr()
    diag = gram.diagonal()
    off = gram - sp.diags(diag)
    if off.nnz == 0 or np.all(off.data == 0):
        return
    # only rows coupled to others need the dense check
    coupled = np.unique(off.nonzero()[0])
    sub = gram[coupled][:, coupled].toarray()
    _, R, piv = sla.qr(sub, pivoting=True)
    r = np.abs(np.diag(R))
    rank = int(np.sum(r > rtol * r[0]))
    if rank < len(coupled):
        rows = np.sort(coupled[piv[rank:]])
        raise RankDeficientConstraintError(
            f"constraint matrix is rank deficient by {len(coupled) - rank}; dependent rows {rows[:20].tolist()}",
            rows,
        )


class SaddleSolver:
    """Factorizes ``[[K, G^T], [G, 0]]`` once; solves for any number of right-hand sides.

    Few constraint rows: Schur complement on ``K + rho R^T R`` (R = the sparse rows among G,
    an augmented-Lagrangian shift that leaves the solution unchanged), which keeps the
    SPD ordering free of the dense rows.  Otherwise LU of the full matrix.
    """

    SCHUR_MAX_ROWS = 16

    def __init__(self, K: sp.spmatrix, G: sp.spmatrix, check_rank: bool = True):
        K = sp.csr_matrix(K)
        G = sp.csr_matrix(G)
        if G.shape[1] != K.shape[0]:
            raise ValueError(f"constraint matrix has {G.shape[1]} columns, stiffness has {K.shape[0]}")
        if check_rank:
            check_constraint_rank(G)
        self.K, self.G = K, G
        self.n, self.m = K.shape[0], G.shape[0]
        self.mode = "lu"
        if 0 < self.m <= self.SCHUR_MAX_ROWS:
            try:
                self._setup_schur()
                self.mode = "schur"
            except SingularSystemError:
                pass
        if self.mode == "lu":
            self.matrix = sp.bmat([[K, G.T], [G, None]], format="csc")
            self.fac = Factorization(self.matrix, pivot_thresh=0.1, permc_spec="COLAMD")

    def _setup_schur(self):
        G = self.G
        sparse_rows = np.flatnonzero(np.diff(G.indptr) <= 4)
        R = G[sparse_rows]
        rho = float(np.mean(np.abs(self.K.diagonal()))) or 1.0
        self.rho, self.R = rho, R
        self.fac = Factorization(self.K + rho * (R.T @ R))
        self.KiGt = self.fac.solve(G.T.toarray())
        S = G @ self.KiGt
        self.S = 0.5 * (S + S.T)
        if np.linalg.cond(self.S) > 1e14:
            raise SingularSystemError("Schur complement of the constraints is singular")
        self.matrix = None

    def _solve_schur(self, f, g):
        # (K + rho R^T R) d + G^T lam = f + rho R^T g_R,  G d = g
        rows = np.flatnonzero(np.diff(self.G.indptr) <= 4)
        f2 = f + self.rho * (self.R.T @ g[rows])
        y = self.fac.solve(f2)
        lam = np.linalg.solve(self.S, self.G @ y - g)
        d = y - self.KiGt @ lam
        return d, lam

    @property
    def dimension(self) -> int:
        return self.n + self.m

    def solve(self, rhs_primal=None, rhs_constraint=None, check: bool = True):
        """Returns ``(d, lam)``; right-hand sides may be vectors or column blocks."""
        if rhs_primal is None and rhs_constraint is None:
            raise ValueError("need at least one right-hand side")
        ref = rhs_constraint if rhs_primal is None else rhs_primal
        ref = np.asarray(ref, dtype=float)
        ncol = () if ref.ndim == 1 else (ref.shape[1],)
        f = np.zeros((self.n,) + ncol) if rhs_primal is None else np.asarray(rhs_primal, dtype=float)
        g = np.zeros((self.m,) + ncol) if rhs_constraint is None else np.asarray(rhs_constraint, dtype=float)
        if self.mode == "schur":
            d, lam = self._solve_schur(f, g)
            # one refinement step on the original saddle equations
            r1 = f - self.K @ d - self.G.T @ lam
            r2 = g - self.G @ d
            dd, dl = self._solve_schur(r1, r2)
            d, lam = d + dd, lam + dl
        else:
            x = self.fac.solve(np.concatenate([f, g], axis=0))
            d, lam = x[: self.n], x[self.n:]
        if check:
            self.check_residual(d, lam, f, g)
        return d, lam

    @property
    def norms(self):
        if not hasattr(self, "_norms"):
            self._norms = (spla.norm(self.K, np.inf), spla.norm(self.G, np.inf) if self.m else 0.0)
        return self._norms

    def check_residual(self, d, lam, f, g, tol: float = RESIDUAL_TOL):
        """Normwise backward error of each block, scaled by ``|K| |d|`` and the data."""
        nK, nG = self.norms
        Kd = self.K @ d
        Gl = self.G.T @ lam
        Gd = self.G @ d
        nd = np.linalg.norm(d, axis=0)
        s1 = np.maximum.reduce([np.linalg.norm(f, axis=0), nK * nd, np.linalg.norm(Gl, axis=0)])
        s2 = np.maximum(np.linalg.norm(g, axis=0), nG * nd)
        e1 = np.linalg.norm(Kd + Gl - f, axis=0) / np.maximum(s1, 1e-300)
        e2 = np.linalg.norm(Gd - g, axis=0) / np.maximum(s2, 1e-300)
        worst = max(float(np.max(np.where(s1 > 0, e1, 0.0))), float(np.max(np.where(s2 > 0, e2, 0.0))))
        if worst > tol:
            raise SingularSystemError(f"saddle-point residual {worst:.3e} exceeds {tol:g} (indefinite breakdown?)")
        return worst


def solve_saddle(system: ConstrainedSystem):
    solver = SaddleSolver(system.K, system.G)
    return solver.solve(system.rhs_primal, system.rhs_constraint)


# --------------------------------------------------------------------- norms

@dataclass(frozen=True)
class QPField:
    """Values, gradients and weights of a nodal field at quadrature points."""

    x: np.ndarray  # (ne, nq, 2)
    u: np.ndarray  # (ne, nq, 2)
    grad: np.ndarray  # (ne, nq, 2, 2), grad[..., i, j] = du_i/dx_j
    w: np.ndarray  # (ne, nq)

    @property
    def strain(self) -> np.ndarray:
        g = self.grad
        return np.stack([g[..., 0, 0], g[..., 1, 1], g[..., 0, 1] + g[..., 1, 0]], axis=-1)


def evaluate_at_qp(mesh: StructuredQuadMesh, d: np.ndarray, rule: QuadratureRule | None = None,
                   geom: ElementGeometry | None = None) -> QPField:
    geom = geom or element_geometry(mesh, rule)
    ue = np.asarray(d, dtype=float).reshape(-1, 2)[mesh.elements]  # (ne, nen, 2)
    u = np.einsum("qa,eai->eqi", geom.N, ue)
    grad = np.einsum("eqaj,eai->eqij", geom.dNdx, ue)
    return QPField(geom.x, u, grad, geom.w)


def _l2sq(f: QPField) -> float:
    return float(np.sum(f.w * np.sum(f.u ** 2, axis=-1)))


def _gradsq(f: QPField) -> float:
    return float(np.sum(f.w * np.sum(f.grad ** 2, axis=(-1, -2))))


def norm_L2(mesh: StructuredQuadMesh, d, rule: QuadratureRule | None = None) -> float:
    return float(np.sqrt(_l2sq(evaluate_at_qp(mesh, d, rule))))


def norm_H1(mesh: StructuredQuadMesh, d, rule: QuadratureRule | None = None) -> float:
    f = evaluate_at_qp(mesh, d, rule)
    return float(np.sqrt(_l2sq(f) + _gradsq(f)))


def norm_energy(mesh: StructuredQuadMesh, d, material, rule: QuadratureRule | None = None) -> float:
    f = evaluate_at_qp(mesh, d, rule)
    eps = f.strain
    A = material_at(material, f.x)
    return float(np.sqrt(np.sum(f.w * np.einsum("eqi,eqij,eqj->eq", eps, A, eps))))
