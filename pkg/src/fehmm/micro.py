"""RVE problems, coupling conditions and the micro-to-macro transformation matrix.

An RVE occupies ``[0, delta]^2`` in local coordinates and is attached to a macro
quadrature point ``x_K``.  Macro fields are linearized at ``x_K``; on the RVE
the linearization reads ``u_lin(y) = u(x_K) + grad u(x_K) (y - c)`` with ``c``
the RVE centre.

Every macro unit state produces a linear field on the RVE, and the coupled micro
problem is linear in that field.  We therefore solve six driving states once
(two translations and the four displacement-gradient components) and obtain
the transformation matrix of any macro element and quadrature point as ``T = D M``,
where ``D`` holds the six micro solutions and ``M`` maps element nodal
displacements to the linearization coefficients.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg  # noqa: F401

from . import fem
from .fem import SaddleSolver, SingularSystemError
from .material import MicrostructureField
from .mesh import StructuredQuadMesh, build_rect_mesh, periodic_pairs

log = logging.getLogger(__name__)

COUPLING_KINDS = (
    "dirichlet_lagrange",
    "dirichlet_direct",
    "periodic_lagrange",
    "periodic_direct",
    "neumann_semi_dirichlet",
    "neumann_perturbation",
)

# diag(2, 2, 1): the strain rows of the traction coupling return (2 e11, 2 e22, gamma12)
STRAIN_ROW_SCALE = np.array([2.0, 2.0, 1.0])

_NODE_ROLES = {"lower_left": 0, "lower_right": 1, "upper_right": 2, "upper_left": 3}


class NewtonError(RuntimeError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = list(history)


class UnsupportedError(ValueError):
    pass


@dataclass(frozen=True)
class CouplingSpec:
    """Boundary coupling of the RVE problem.

    ``perturbation_kappa`` / ``kappa_random`` / ``seed`` apply to the perturbation
    technique only; ``semi_dirichlet_nodes`` / ``newton_mode`` to semi-Dirichlet only.
    Leaving them ``None`` selects the defaults of the applicable kind.
    """

    kind: str
    perturbation_kappa: float | None = None
    kappa_random: bool | None = None
    seed: int | None = None
    semi_dirichlet_nodes: tuple | None = None
    newton_mode: str | None = None
    newton_tol: float = 1e-10
    max_newton: int = 10

    def __post_init__(self):
        if self.kind not in COUPLING_KINDS:
            raise ValueError(f"unknown coupling {self.kind!r}; expected one of {COUPLING_KINDS}")
        pert = (self.perturbation_kappa, self.kappa_random, self.seed)
        semi = (self.semi_dirichlet_nodes, self.newton_mode)
        if self.kind == "neumann_perturbation":
            if any(v is not None for v in semi):
                raise ValueError("semi-Dirichlet parameters given for the perturbation technique")
            defaults = {"perturbation_kappa": 1e-5, "kappa_random": True, "seed": 0}
            for k, v in defaults.items():
                if getattr(self, k) is None:
                    object.__setattr__(self, k, v)
            if not self.perturbation_kappa > 0:
                raise ValueError("perturbation_kappa must be positive")
        elif any(v is not None for v in pert):
            raise ValueError(f"perturbation parameters given for coupling {self.kind!r}")
        if self.kind == "neumann_semi_dirichlet":
            if self.semi_dirichlet_nodes is None:
                object.__setattr__(self, "semi_dirichlet_nodes", ("lower_left", "lower_right"))
            if self.newton_mode is None:
                object.__setattr__(self, "newton_mode", "constrained")
            if self.newton_mode not in ("constrained", "traction"):
                raise ValueError(f"unknown newton_mode {self.newton_mode!r}")
            if len(self.semi_dirichlet_nodes) != 2:
                raise ValueError("semi_dirichlet_nodes needs nodes (A, B)")
        elif any(v is not None for v in semi):
            raise ValueError(f"semi-Dirichlet parameters given for coupling {self.kind!r}")

    @property
    def family(self) -> str:
        return self.kind.split("_")[0]

    @property
    def uses_multipliers(self) -> bool:
        return self.kind not in ("dirichlet_direct", "periodic_direct")

    @property
    def rigid_embedded(self) -> bool:
        return self.kind != "neumann_perturbation"

    @classmethod
    def make(cls, kind: str, **kw) -> "CouplingSpec":
        return cls(kind, **{k: v for k, v in kw.items() if v is not None})


@dataclass(frozen=True)
class MicroProblem:
    """RVE of size ``delta`` discretized by ``n x n`` elements of order ``order``."""

    field: MicrostructureField
    delta: float
    n: int
    order: int = 1

    def __post_init__(self):
        if self.delta < self.field.epsilon * (1 - 1e-12):
            raise ValueError(f"sampling domain delta={self.delta} smaller than the period {self.field.epsilon}")
        if self.n < 1 or self.order not in (1, 2):
            raise ValueError("invalid RVE discretization")

    @property
    def epsilon(self) -> float:
        return self.field.epsilon

    @property
    def area(self) -> float:
        return self.delta ** 2

    @property
    def center(self) -> np.ndarray:
        return np.array([0.5 * self.delta, 0.5 * self.delta])

    @property
    def h(self) -> float:
        return self.delta / self.n

    @cached_property
    def rve_mesh(self) -> StructuredQuadMesh:
        return build_rect_mesh(self.n, self.n, self.delta, self.delta, self.order)

    @cached_property
    def geometry(self) -> fem.ElementGeometry:
        return fem.element_geometry(self.rve_mesh)

    @property
    def sample_offset(self) -> float:
        """Shift from RVE coordinates to field coordinates.

        The sampling window is centred on a unit-cell centre, so for ``delta = epsilon`` it is
        exactly one cell and for larger ``delta`` the surplus is split evenly on both sides.
        """
        return 0.5 * (self.field.epsilon - self.delta)

    def tensor(self, x) -> np.ndarray:
        """Material tensor at RVE coordinates ``x``."""
        return self.field.tensor(np.asarray(x, dtype=float) + self.sample_offset)

    @cached_property
    def material_qp(self) -> np.ndarray:
        return self.tensor(self.geometry.x)

    @cached_property
    def K(self) -> sp.csr_matrix:
        ke = fem.stiffness_from_geometry(self.geometry, self.material_qp)
        ke = 0.5 * (ke + np.swapaxes(ke, 1, 2))
        return fem.assemble(self.rve_mesh, ke)

    def strain_energy(self, d: np.ndarray) -> np.ndarray:
        """Energy products ``int eps(d_i) . A eps(d_j)`` of the columns of ``d`` by quadrature.

        Free of the translation roundoff that ``d^T K d`` picks up.
        """
        d = np.asarray(d, dtype=float)
        mesh = self.rve_mesh
        ue = d[fem.element_dofs(mesh.elements)]  # (ne, 2 nen, k)
        eps = np.einsum("eqip,epk->eqik", self.geometry.B, ue)
        sig = np.einsum("eqij,eqjk->eqik", self.material_qp, eps)
        E = np.einsum("eq,eqik,eqil->kl", self.geometry.w, eps, sig)
        return 0.5 * (E + E.T)

    @cached_property
    def boundary_normals(self) -> np.ndarray:
        return consistent_normals(self.rve_mesh)

    @property
    def n_dofs(self) -> int:
        return self.rve_mesh.n_dofs

    def linear_field(self, translation=(0.0, 0.0), grad=np.zeros((2, 2))) -> np.ndarray:
        """Nodal values of ``translation + grad (y - c)``."""
        y = self.rve_mesh.nodes - self.center
        u = np.asarray(translation, dtype=float) + y @ np.asarray(grad, dtype=float).T
        return u.ravel()

    @cached_property
    def driving_fields(self) -> np.ndarray:
        """Six linear fields: translations e1, e2, then grad components (i, k) -> 2 + 2 i + k."""
        cols = [self.linear_field((1, 0)), self.linear_field((0, 1))]
        for i in range(2):
            for k in range(2):
                g = np.zeros((2, 2))
                g[i, k] = 1.0
                cols.append(self.linear_field(grad=g))
        return np.column_stack(cols)

    def strain_field(self, strain) -> np.ndarray:
        """Linear field with zero translation/rotation and Voigt strain ``strain``."""
        e = np.asarray(strain, dtype=float)
        g = np.array([[e[0], 0.5 * e[2]], [0.5 * e[2], e[1]]])
        return self.linear_field(grad=g)


# ---------------------------------------------------------------- helpers

def consistent_normals(mesh: StructuredQuadMesh) -> np.ndarray:
    """Nodal vectors ``int_{dK} N_q n ds`` (zero at interior nodes).

    For Q4 these equal the discrete normals ``1/2 (x_{q+1} - x_{q-1}) x e3``
    of the boundary loop; for Q9 they carry the Simpson weights of the quadratic edges.
    """
    out = np.zeros((mesh.n_nodes, 2))
    w = np.array([0.5, 0.5]) if mesh.order == 1 else np.array([1.0, 4.0, 1.0]) / 6.0
    for edge in ("bottom", "right", "top", "left"):
        _, enodes = mesh.edge_elements(edge)
        x = mesh.nodes[enodes]
        t = x[:, -1] - x[:, 0]
        n = np.column_stack([t[:, 1], -t[:, 0]])  # |n| = edge length
        np.add.at(out, enodes, w[None, :, None] * n[:, None, :])
    return out


def boundary_nodes(mesh: StructuredQuadMesh) -> np.ndarray:
    from .mesh import boundary_loop

    return boundary_loop(mesh)


def strain_constraint_rows(problem: MicroProblem) -> sp.csr_matrix:
    """Three rows ``G = sum_q G_q`` with ``G_q = 1/|K| [[2n1, 0], [0, 2n2], [n2, n1]]``."""
    nvec = problem.boundary_normals
    q = np.flatnonzero(np.any(nvec != 0, axis=1))
    n1, n2 = nvec[q, 0], nvec[q, 1]
    rows = np.concatenate([np.zeros_like(q), np.ones_like(q), 2 * np.ones_like(q), 2 * np.ones_like(q)])
    cols = np.concatenate([2 * q, 2 * q + 1, 2 * q, 2 * q + 1])
    vals = np.concatenate([2 * n1, 2 * n2, n2, n1]) / problem.area
    return sp.csr_matrix((vals, (rows, cols)), shape=(3, problem.n_dofs))


def average_rotation(problem: MicroProblem, d: np.ndarray) -> np.ndarray:
    """Volume average of ``1/2 (du2/dx1 - du1/dx2)`` evaluated through the boundary."""
    nvec = problem.boundary_normals
    U = np.asarray(d).reshape((problem.rve_mesh.n_nodes, 2) + np.shape(d)[1:])
    return 0.5 * (np.tensordot(nvec[:, 0], U[:, 1], axes=(0, 0)) - np.tensordot(nvec[:, 1], U[:, 0], axes=(0, 0))) / problem.area


def average_strain(problem: MicroProblem, d: np.ndarray) -> np.ndarray:
    """Volume-averaged Voigt strain (engineering shear) of micro field(s) ``d``."""
    g = problem.geometry
    B = g.B
    de = np.asarray(d)[fem.element_dofs(problem.rve_mesh.elements)]  # (ne, nd, ...)
    return np.einsum("eq,eqip,ep...->i...", g.w, B, de) / problem.area


def average_stress(problem: MicroProblem, d: np.ndarray) -> np.ndarray:
    g = problem.geometry
    B = g.B
    de = np.asarray(d)[fem.element_dofs(problem.rve_mesh.elements)]
    return np.einsum("eq,eqij,eqjp,ep...->i...", g.w, problem.material_qp, B, de) / problem.area


def stress_from_multipliers(problem: MicroProblem, lam_strain: np.ndarray) -> np.ndarray:
    """Macro stress carried by the multipliers of the three strain rows."""
    lam = np.asarray(lam_strain)
    scale = STRAIN_ROW_SCALE.reshape((3,) + (1,) * (lam.ndim - 1))
    return -scale * lam / problem.area


def resolve_node(problem: MicroProblem, node) -> int:
    if isinstance(node, str):
        try:
            return int(problem.rve_mesh.corner_nodes[_NODE_ROLES[node]])
        except KeyError:
            raise ValueError(f"unknown node role {node!r}") from None
    node = int(node)
    if not 0 <= node < problem.rve_mesh.n_nodes:
        raise ValueError(f"node {node} outside RVE mesh")
    return node


def draw_kappa(problem: MicroProblem, coupling: CouplingSpec) -> np.ndarray:
    """Diagonal perturbation: uniform in (0, kappa_max] (seeded) or the constant kappa_max."""
    kmax = coupling.perturbation_kappa
    n = problem.n_dofs
    if not coupling.kappa_random:
        return np.full(n, kmax)
    rng = np.random.default_rng(coupling.seed)
    return kmax * (1.0 - rng.random(n))


# ----------------------------------------------------------- constraints

def build_constraints_dirichlet(problem_or_mesh) -> tuple[sp.csr_matrix, np.ndarray]:
    """Unit rows on all boundary dofs; returns ``(G, dofs)``; rhs is ``d_lin[dofs]``."""
    mesh = problem_or_mesh.rve_mesh if isinstance(problem_or_mesh, MicroProblem) else problem_or_mesh
    nodes = boundary_nodes(mesh)
    dofs = np.column_stack([2 * nodes, 2 * nodes + 1]).ravel()
    G = sp.csr_matrix((np.ones(dofs.size), (np.arange(dofs.size), dofs)), shape=(dofs.size, mesh.n_dofs))
    return G, dofs


def node_integrals(mesh: StructuredQuadMesh) -> np.ndarray:
    """``b_m = int N_m dV`` for every node."""
    g = fem.element_geometry(mesh)
    be = np.einsum("eq,qa->ea", g.w, g.N)
    b = np.zeros(mesh.n_nodes)
    np.add.at(b, mesh.elements, be)
    return b


def build_constraints_periodic(problem_or_mesh, pairs=None) -> sp.csr_matrix:
    """Two normalization rows (``sum_m b_m w_m = 0`` per component) followed by +1/-1 pair rows."""
    mesh = problem_or_mesh.rve_mesh if isinstance(problem_or_mesh, MicroProblem) else problem_or_mesh
    pairs = periodic_pairs(mesh) if pairs is None else pairs
    P = np.asarray(pairs.pairs)
    b = node_integrals(mesh)
    nn = mesh.n_nodes
    rows, cols, vals = [], [], []
    for c in range(2):
        rows.append(np.full(nn, c))
        cols.append(2 * np.arange(nn) + c)
        vals.append(b)
    m = len(P)
    r = 2 + 2 * np.arange(m)
    for c in range(2):
        rows += [r + c, r + c]
        cols += [2 * P[:, 0] + c, 2 * P[:, 1] + c]
        vals += [np.ones(m), -np.ones(m)]
    G = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(2 + 2 * m, mesh.n_dofs))
    return G


def build_constraints_neumann(problem: MicroProblem, coupling: CouplingSpec | None = None) -> sp.csr_matrix:
    """Strain rows, plus the three point rows (A: x1, x2; B: x2) for semi-Dirichlet coupling."""
    G = strain_constraint_rows(problem)
    if coupling is None or coupling.kind != "neumann_semi_dirichlet":
        return G
    a, b = (resolve_node(problem, v) for v in coupling.semi_dirichlet_nodes)
    pts = _point_rows(problem, a, b)
    return sp.vstack([G, pts], format="csr")


def _point_rows(problem, a, b):
    if a == b or np.isclose(problem.rve_mesh.nodes[a, 0], problem.rve_mesh.nodes[b, 0]):
        raise ValueError("semi-Dirichlet nodes A and B must have different x1 coordinates")
    cols = [2 * a, 2 * a + 1, 2 * b + 1]
    return sp.csr_matrix((np.ones(3), ([0, 1, 2], cols)), shape=(3, problem.n_dofs))


# --------------------------------------------------------------- DOF table

@dataclass(frozen=True)
class SystemSize:
    """Dimensions of a constructed RVE system.

    primal: displacement unknowns; coupling: multiplier rows enforcing the coupling;
    gauge: unknowns added (normalization rows) or removed (fixed node) only to
    suppress rigid translations.
    """

    primal: int
    coupling: int
    gauge: int
    solved: int

    @property
    def table_count(self) -> int:
        return self.primal + self.coupling


def dof_count(kind: str, method: str, N: int) -> int:
    """Closed-form system size with ``N`` nodes per RVE edge (rigid-translation gauge excluded)."""
    if N < 2:
        raise ValueError("N must be at least 2 nodes per edge")
    kind = kind.lower()
    if kind not in ("dirichlet", "periodic") or method not in ("direct", "lagrange"):
        raise UnsupportedError(f"no closed-form count for coupling {kind!r} with method {method!r}")
    if kind == "dirichlet":
        return 2 * (N - 2) ** 2 if method == "direct" else 2 * (N * N + 4 * (N - 1))
    if method == "direct":
        return 2 * ((N - 2) ** 2 + (N - 1) + (N - 2))
    return 2 * (N * N + N + (N - 1))


# ------------------------------------------------------------- solutions

@dataclass(frozen=True, eq=False)
class CoupledSolution:
    d: np.ndarray  # (ndof, m)
    multipliers: np.ndarray | None  # (rows, m)
    G: sp.csr_matrix | None
    solver: object
    system: SystemSize
    info: dict = field(default_factory=dict)


def _dirichlet_lagrange(problem, d_lin):
    G, dofs = build_constraints_dirichlet(problem)
    solver = SaddleSolver(problem.K, G)
    d, lam = solver.solve(None, d_lin[dofs])
    size = SystemSize(problem.n_dofs, G.shape[0], 0, solver.dimension)
    return CoupledSolution(d, lam, G, solver, size)


def _dirichlet_direct(problem, d_lin):
    G, dofs = build_constraints_dirichlet(problem)
    free = np.setdiff1d(np.arange(problem.n_dofs), dofs)
    K = problem.K
    Kff = K[free][:, free]
    fac = fem.Factorization(Kff)
    d = d_lin.copy()
    rhs = -(K[free][:, dofs] @ d_lin[dofs])
    d[free] = fac.solve(rhs)
    _check_res(Kff, d[free], rhs)
    reactions = -(K @ d)[dofs]
    size = SystemSize(free.size, 0, 0, free.size)
    return CoupledSolution(d, reactions, G, fac, size, {"free": free})


def _check_res(A, x, b, tol=fem.RESIDUAL_TOL):
    if A.shape[0] == 0:
        return
    Ax = A @ x
    r = np.linalg.norm(Ax - b, axis=0)
    s = np.maximum(np.linalg.norm(b, axis=0), sp.linalg.norm(A, np.inf) * np.linalg.norm(x, axis=0))
    bad = (s > 0) & (r > tol * np.where(s > 0, s, 1.0))
    if np.any(bad):
        raise SingularSystemError(f"reduced solve residual {np.max(r / np.where(s > 0, s, 1)):.3e} exceeds {tol:g}")


def _periodic_lagrange(problem, d_lin):
    G = build_constraints_periodic(problem)
    solver = SaddleSolver(problem.K, G)
    d, lam = solver.solve(None, G @ d_lin)
    size = SystemSize(problem.n_dofs, G.shape[0] - 2, 2, solver.dimension)
    return CoupledSolution(d, lam, G, solver, size)


def periodic_master_map(mesh: StructuredQuadMesh) -> np.ndarray:
    """For every node, the node whose fluctuation it copies (itself for independent nodes)."""
    master = np.arange(mesh.n_nodes)
    P = periodic_pairs(mesh).pairs
    master[P[:, 0]] = P[:, 1]
    for _ in range(3):
        master = master[master]
    return master


def _periodic_direct(problem, d_lin):
    mesh = problem.rve_mesh
    master = periodic_master_map(mesh)
    indep = np.unique(master)
    col = np.full(mesh.n_nodes, -1)
    col[indep] = np.arange(indep.size)
    # periodic identification matrix, then drop the fixed node (lower-left corner) in both directions
    fixed = int(mesh.corner_nodes[0])
    keep = np.flatnonzero(indep != fixed)
    rows = np.concatenate([2 * np.arange(mesh.n_nodes), 2 * np.arange(mesh.n_nodes) + 1])
    cols = np.concatenate([2 * col[master], 2 * col[master] + 1])
    P = sp.csr_matrix((np.ones(rows.size), (rows, cols)), shape=(mesh.n_dofs, 2 * indep.size))
    kdofs = np.column_stack([2 * keep, 2 * keep + 1]).ravel()
    P = P[:, kdofs]
    K = problem.K
    Kr = (P.T @ K @ P).tocsc()
    fac = fem.Factorization(Kr)
    rhs = -(P.T @ (K @ d_lin))
    w = fac.solve(rhs)
    _check_res(Kr, w, rhs)
    d = d_lin + P @ w
    size = SystemSize(2 * indep.size, 0, -2, kdofs.size)
    return CoupledSolution(d, None, None, fac, size, {"P": P, "fixed_node": fixed})


def _perturbation(problem, coupling, d_lin):
    Gs = strain_constraint_rows(problem)
    kappa = draw_kappa(problem, coupling)
    Kp = problem.K + sp.diags(kappa)
    solver = SaddleSolver(Kp, Gs)
    d, lam = solver.solve(None, Gs @ d_lin)
    size = SystemSize(problem.n_dofs, 3, 0, solver.dimension)
    return CoupledSolution(d, lam, Gs, solver, size, {"kappa": kappa})


def _column_scale(problem, d_lin):
    eps = average_strain(problem, d_lin)
    rot = average_rotation(problem, d_lin)
    s = np.maximum.reduce([np.max(np.abs(eps), axis=0), np.abs(rot), np.max(np.abs(d_lin), axis=0) / problem.delta])
    return np.where(s > 0, s, 1.0)


def _semi_dirichlet(problem, coupling, d_lin):
    """Strain rows by multipliers, point rows at A (x1, x2) and B (x2 = eta); Newton on eta.

    The reactions at A and B vanish for any eta (the strain multipliers balance
    the boundary), so eta is fixed by requiring the volume-averaged micro rotation
    to equal the rotation of the driving linear field.
    """
    if coupling.newton_mode == "traction":
        return _semi_dirichlet_traction(problem, coupling, d_lin)
    a, b = (resolve_node(problem, v) for v in coupling.semi_dirichlet_nodes)
    Gs = strain_constraint_rows(problem)
    G = sp.vstack([Gs, _point_rows(problem, a, b)], format="csr")
    solver = SaddleSolver(problem.K, G)
    m = d_lin.shape[1]
    g_s = Gs @ d_lin
    g_a = d_lin[[2 * a, 2 * a + 1]]
    rot_target = average_rotation(problem, d_lin)
    scale = _column_scale(problem, d_lin)
    xscale = max(problem.delta * float(np.max(np.abs(d_lin))), problem.delta)
    n_solves = 0

    def run(eta):
        nonlocal n_solves
        n_solves += 1
        d, lam = solver.solve(None, np.vstack([g_s, g_a, eta[None, :]]))
        r = (average_rotation(problem, d) - rot_target) / scale
        return d, lam, r

    eta = d_lin[2 * b + 1].copy()
    d, lam, r = run(eta)
    history = [float(np.max(np.abs(r)))]
    it = 0
    jac = None
    while history[-1] > coupling.newton_tol:
        if it >= coupling.max_newton:
            raise NewtonError(f"semi-Dirichlet iteration did not converge in {it} steps", history)
        if jac is None:
            step = 1e-6 * xscale
            _, _, r2 = run(eta + step)
            jac = (r2 - r) / step
            if np.any(jac == 0):
                raise NewtonError("semi-Dirichlet Jacobian is singular", history)
        eta = eta - r / jac
        d, lam, r = run(eta)
        it += 1
        history.append(float(np.max(np.abs(r))))
    zeta_a, zeta_b = lam[3:5], lam[5]
    size = SystemSize(problem.n_dofs, 3, 3, solver.dimension)
    info = {"eta": eta, "iterations": it, "history": history, "solves": n_solves,
            "zeta_A": zeta_a, "zeta_B": zeta_b, "nodes": (a, b)}
    return CoupledSolution(d, lam, G, solver, size, info)


def _semi_dirichlet_traction(problem, coupling, d_lin):
    """Alternative reading: unknowns (sigma, eta), boundary tractions from sigma, 4x4 Newton."""
    a, b = (resolve_node(problem, v) for v in coupling.semi_dirichlet_nodes)
    Gs = strain_constraint_rows(problem)
    C = _point_rows(problem, a, b)
    solver = SaddleSolver(problem.K, C)
    g_s = Gs @ d_lin
    g_a = d_lin[[2 * a, 2 * a + 1]]
    rot_target = average_rotation(problem, d_lin)
    scale = _column_scale(problem, d_lin)
    Aref = problem.field.reference_tensor()
    n_solves = 0

    def run(x):
        nonlocal n_solves
        n_solves += 1
        sigma, eta = x[:3], x[3]
        lam_s = -(problem.area / STRAIN_ROW_SCALE)[:, None] * sigma
        f = -(Gs.T @ lam_s)
        d, zeta = solver.solve(f, np.vstack([g_a, eta[None, :]]))
        r = np.vstack([(Gs @ d - g_s) / STRAIN_ROW_SCALE[:, None],
                       (average_rotation(problem, d) - rot_target)[None, :]]) / scale
        return d, zeta, r

    eps = average_strain(problem, d_lin)
    x = np.vstack([Aref @ eps, d_lin[2 * b + 1][None, :]])
    d, zeta, r = run(x)
    history = [float(np.max(np.abs(r)))]
    it = 0
    J = None
    sig_scale = max(float(np.max(np.abs(Aref))) * float(np.max(scale)), 1e-300)
    steps = np.array([sig_scale, sig_scale, sig_scale, problem.delta * float(np.max(scale))]) * 1e-6
    while history[-1] > coupling.newton_tol:
        if it >= coupling.max_newton:
            raise NewtonError(f"semi-Dirichlet (traction) iteration did not converge in {it} steps", history)
        if J is None:
            m = x.shape[1]
            J = np.zeros((m, 4, 4))
            for k in range(4):
                xp = x.copy()
                xp[k] += steps[k]
                _, _, rp = run(xp)
                J[:, :, k] = ((rp - r) / steps[k]).T
        dx = np.linalg.solve(J, -r.T[..., None])[..., 0].T
        x = x + dx
        d, zeta, r = run(x)
        it += 1
        history.append(float(np.max(np.abs(r))))
    lam_s = -(problem.area / STRAIN_ROW_SCALE)[:, None] * x[:3]
    lam = np.vstack([lam_s, zeta])
    size = SystemSize(problem.n_dofs, 3, 3, solver.dimension)
    info = {"eta": x[3], "sigma": x[:3], "iterations": it, "history": history, "solves": n_solves,
            "zeta_A": zeta[:2], "zeta_B": zeta[2], "nodes": (a, b)}
    G = sp.vstack([Gs, C], format="csr")
    return CoupledSolution(d, lam, G, solver, size, info)


def solve_coupled(problem: MicroProblem, coupling: CouplingSpec, d_lin: np.ndarray) -> CoupledSolution:
    """Solve the RVE problem driven by linear field(s) ``d_lin`` (columns)."""
    d_lin = np.asarray(d_lin, dtype=float)
    squeeze = d_lin.ndim == 1
    if squeeze:
        d_lin = d_lin[:, None]
    kind = coupling.kind
    if kind == "dirichlet_lagrange":
        sol = _dirichlet_lagrange(problem, d_lin)
    elif kind == "dirichlet_direct":
        sol = _dirichlet_direct(problem, d_lin)
    elif kind == "periodic_lagrange":
        sol = _periodic_lagrange(problem, d_lin)
    elif kind == "periodic_direct":
        sol = _periodic_direct(problem, d_lin)
    elif kind == "neumann_perturbation":
        sol = _perturbation(problem, coupling, d_lin)
    else:
        sol = _semi_dirichlet(problem, coupling, d_lin)
    if squeeze:
        d = sol.d[:, 0]
        lam = None if sol.multipliers is None else sol.multipliers[:, 0]
        sol = CoupledSolution(d, lam, sol.G, sol.solver, sol.system, sol.info)
    return sol


# ----------------------------------------------------------------- basis

@dataclass(frozen=True, eq=False)
class MicroBasis:
    """Micro responses to the six driving states of one (RVE, coupling) pair."""

    problem: MicroProblem
    coupling: CouplingSpec
    D: np.ndarray  # (ndof, 6)
    energy: np.ndarray  # strain energy products of D, (6, 6)
    multipliers: np.ndarray | None
    G: sp.csr_matrix | None
    solver: object
    system: SystemSize
    info: dict
    seconds: float

    @property
    def strain_selector(self) -> np.ndarray:
        """Maps Voigt strain (e11, e22, gamma12) to driving-state coefficients."""
        S = np.zeros((6, 3))
        S[2, 0] = 1.0
        S[5, 1] = 1.0
        S[3, 2] = S[4, 2] = 0.5
        return S

    @cached_property
    def A0(self) -> np.ndarray:
        """Homogenized tensor from the energy of the unit-strain responses."""
        S = self.strain_selector
        A = S.T @ self.energy @ S / self.problem.area
        return 0.5 * (A + A.T)

    @cached_property
    def A0_from_stress(self) -> np.ndarray:
        """Columns: volume-averaged stress under unit macro strains."""
        return average_stress(self.problem, self.D @ self.strain_selector)

    @cached_property
    def A0_from_multipliers(self) -> np.ndarray | None:
        if self.coupling.family != "neumann" or self.multipliers is None:
            return None
        S = self.strain_selector
        return stress_from_multipliers(self.problem, self.multipliers[:3] @ S)


def _build_basis(problem: MicroProblem, coupling: CouplingSpec) -> MicroBasis:
    t0 = time.perf_counter()
    _ = problem.K
    sol = solve_coupled(problem, coupling, problem.driving_fields)
    D = sol.d
    E = problem.strain_energy(D)
    return MicroBasis(problem, coupling, D, E, sol.multipliers, sol.G, sol.solver, sol.system, sol.info,
                      time.perf_counter() - t0)


@lru_cache(maxsize=4)
def micro_basis(problem: MicroProblem, coupling: CouplingSpec) -> MicroBasis:
    """Cached per (problem, coupling) identity; each entry keeps its factorization alive."""
    return _build_basis(problem, coupling)


def clear_basis_cache() -> None:
    micro_basis.cache_clear()


def homogenized_tensor(problem: MicroProblem, coupling: CouplingSpec) -> np.ndarray:
    return micro_basis(problem, coupling).A0


# -------------------------------------------------------------- operator

def linearization_matrix(coords: np.ndarray, xi, order: int | None = None) -> np.ndarray:
    """``M`` (6 x 2 nen): element nodal displacements -> (u(x_K), grad u(x_K)) coefficients."""
    coords = np.asarray(coords, dtype=float)
    order = order or (1 if coords.shape[0] == 4 else 2)
    N, dN = fem.shape_functions(order, np.asarray(xi, dtype=float))
    J = dN.T @ coords  # (2, 2): J[k, d] = dx_d / dxi_k
    dNdx = dN @ np.linalg.inv(J).T  # (nen, 2)
    if np.linalg.det(J) <= 0:
        raise fem.GeometryError("non-positive Jacobian at macro quadrature point")
    nen = coords.shape[0]
    M = np.zeros((6, 2 * nen))
    for i in range(2):
        M[i, i::2] = N
        for k in range(2):
            M[2 + 2 * i + k, i::2] = dNdx[:, k]
    return M


@dataclass(frozen=True, eq=False)
class MicroOperator:
    """Micro data attached to one macro quadrature point."""

    basis: MicroBasis
    M: np.ndarray

    @property
    def problem(self) -> MicroProblem:
        return self.basis.problem

    @property
    def coupling(self) -> CouplingSpec:
        return self.basis.coupling

    @property
    def T(self) -> np.ndarray:
        return self.basis.D @ self.M

    @property
    def K_mic(self) -> sp.csr_matrix:
        return self.problem.K

    @property
    def G(self):
        return self.basis.G

    @property
    def Lambda(self):
        if self.basis.multipliers is None:
            return None
        return self.basis.multipliers @ self.M

    @property
    def A0(self) -> np.ndarray:
        return self.basis.A0

    @property
    def factorization(self):
        return self.basis.solver

    @property
    def rigid_embedded(self) -> bool:
        return self.coupling.rigid_embedded

    def energy_density_matrix(self, explicit: bool = False) -> np.ndarray:
        """``T^T K T / |K|``; the explicit path forms T."""
        if explicit:
            T = self.T
            k = T.T @ (self.K_mic @ T)
        else:
            k = self.M.T @ self.basis.energy @ self.M
        return 0.5 * (k + k.T) / self.problem.area

    def micro_field(self, d_element: np.ndarray) -> np.ndarray:
        return self.T @ np.asarray(d_element, dtype=float)


def solve_micro_unit_states(problem: MicroProblem, coupling: CouplingSpec, element_coords, xi,
                            order: int | None = None) -> MicroOperator:
    M = linearization_matrix(element_coords, xi, order)
    return MicroOperator(micro_basis(problem, coupling), M)


def unit_state_fields(problem: MicroProblem, element_coords, xi, order: int | None = None) -> np.ndarray:
    """Linearized macro unit states (I, x_i) at micro nodes, one column each."""
    M = linearization_matrix(element_coords, xi, order)
    return problem.driving_fields @ M


def transformation_matrix_literal(problem: MicroProblem, coupling: CouplingSpec, element_coords, xi,
                                  order: int | None = None) -> np.ndarray:
    """T assembled column by column from one micro solve per macro unit state."""
    return solve_coupled(problem, coupling, unit_state_fields(problem, element_coords, xi, order)).d


# ------------------------------------------------------- Neumann helpers

@dataclass(frozen=True, eq=False)
class SemiDirichletState:
    d: np.ndarray
    sigma: np.ndarray
    eta: float
    zeta_A: np.ndarray
    zeta_B: float
    iterations: int
    history: list
    solves: int


def solve_semi_dirichlet(problem: MicroProblem, target_strain, coupling: CouplingSpec | None = None) -> SemiDirichletState:
    coupling = coupling or CouplingSpec("neumann_semi_dirichlet")
    if coupling.kind != "neumann_semi_dirichlet":
        raise ValueError("semi-Dirichlet solve needs a neumann_semi_dirichlet coupling")
    sol = solve_coupled(problem, coupling, problem.strain_field(target_strain))
    info = sol.info
    sigma = stress_from_multipliers(problem, sol.multipliers[:3])
    return SemiDirichletState(sol.d, sigma, float(np.ravel(info["eta"])[0]), np.ravel(info["zeta_A"]),
                              float(np.ravel(info["zeta_B"])[0]), info["iterations"], info["history"],
                              info["solves"])


def solve_perturbed(problem: MicroProblem, target_strain, coupling: CouplingSpec | None = None) -> np.ndarray:
    coupling = coupling or CouplingSpec("neumann_perturbation")
    if coupling.kind != "neumann_perturbation":
        raise ValueError("perturbed solve needs a neumann_perturbation coupling")
    return solve_coupled(problem, coupling, problem.strain_field(target_strain)).d


def enrich_rigid_body(problem: MicroProblem, d: np.ndarray, translation=(0.0, 0.0), rotation: float = 0.0) -> np.ndarray:
    """Add a translation and an infinitesimal rotation about the RVE centre."""
    w = np.array([[0.0, -rotation], [rotation, 0.0]])
    return np.asarray(d, dtype=float) + problem.linear_field(translation, w)


def rigid_alignment(problem: MicroProblem, d: np.ndarray, target: np.ndarray) -> np.ndarray:
    """``d`` plus the least-squares rigid motion that brings it closest to ``target``."""
    R = np.column_stack([problem.linear_field((1, 0)), problem.linear_field((0, 1)),
                         problem.linear_field(grad=np.array([[0.0, -1.0], [1.0, 0.0]]))])
    c, *_ = np.linalg.lstsq(R, np.asarray(target) - np.asarray(d), rcond=None)
    return d + R @ c


# --------------------------------------------------------- direct solves

def direct_dirichlet_solve(problem: MicroProblem, d_lin: np.ndarray) -> np.ndarray:
    return solve_coupled(problem, CouplingSpec("dirichlet_direct"), d_lin).d


def direct_periodic_solve(problem: MicroProblem, d_lin: np.ndarray) -> np.ndarray:
    return solve_coupled(problem, CouplingSpec("periodic_direct"), d_lin).d


def align_fluctuation_mean(problem: MicroProblem, d: np.ndarray, d_lin: np.ndarray) -> np.ndarray:
    """Shift the fluctuation ``d - d_lin`` to zero weighted mean."""
    b = node_integrals(problem.rve_mesh)
    w = (np.asarray(d) - np.asarray(d_lin)).reshape((-1, 2) + np.shape(d)[1:])
    mean = np.tensordot(b, w, axes=(0, 0)) / b.sum()
    return d - np.broadcast_to(mean, w.shape).reshape(np.shape(d))


def system_size(problem: MicroProblem, coupling: CouplingSpec) -> SystemSize:
    return micro_basis(problem, coupling).system
