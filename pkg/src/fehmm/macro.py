"""Macro problem: assembly from micro operators, single-scale reference solves, micro recovery."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from . import fem
from .mesh import StructuredQuadMesh, build_rect_mesh, build_tapered_mesh, tapered_cantilever_corners
from .micro import CouplingSpec, MicroBasis, MicroOperator, MicroProblem, micro_basis, solve_coupled

DEFAULT_VOLUME_LOAD = (0.0, -10.0)


def clamped_dofs(mesh: StructuredQuadMesh, edge: str = "left") -> np.ndarray:
    nodes = mesh.boundary_edges[edge]
    return np.sort(np.concatenate([2 * nodes, 2 * nodes + 1]))


@dataclass(frozen=True, eq=False)
class MacroProblem:
    mesh: StructuredQuadMesh
    micro: MicroProblem | None = None
    coupling: CouplingSpec | None = None
    volume_load: tuple = DEFAULT_VOLUME_LOAD
    line_load: tuple | None = None  # (edge, traction 2-vector)
    dirichlet_dofs: np.ndarray | None = None
    dirichlet_values: np.ndarray | float = 0.0

    def __post_init__(self):
        if self.dirichlet_dofs is None:
            object.__setattr__(self, "dirichlet_dofs", clamped_dofs(self.mesh, "left"))
        if (self.micro is None) != (self.coupling is None):
            raise ValueError("micro problem and coupling must be given together")

    def load(self) -> np.ndarray:
        F = fem.load_vector(self.mesh, self.volume_load)
        if self.line_load is not None:
            edge, t = self.line_load
            F = F + fem.edge_load_vector(self.mesh, edge, t)
        return F

    @cached_property
    def basis(self) -> MicroBasis:
        return micro_basis(self.micro, self.coupling)


def square_cantilever(n: int, order: int = 1, size: float = 1.0, **kw) -> MacroProblem:
    mesh = build_rect_mesh(n, n, size, size, order)
    return MacroProblem(mesh, **kw)


def tapered_cantilever(n: int, order: int = 1, corners=None, **kw) -> MacroProblem:
    corners = tapered_cantilever_corners() if corners is None else corners
    mesh = build_tapered_mesh(n, n, corners, order)
    return MacroProblem(mesh, **kw)


def linearization_matrices(geom: fem.ElementGeometry) -> np.ndarray:
    """``M`` for every element and quadrature point, shape (ne, nq, 6, 2 nen)."""
    ne, nq, nen, _ = geom.dNdx.shape
    M = np.zeros((ne, nq, 6, 2 * nen))
    for i in range(2):
        M[:, :, i, i::2] = geom.N[None]
        for k in range(2):
            M[:, :, 2 + 2 * i + k, i::2] = geom.dNdx[..., k]
    return M


def _uniform(mesh: StructuredQuadMesh) -> bool:
    return mesh.is_rectangular


def macro_element_stiffness(element_coords, micro_ops, weights, explicit: bool = False) -> np.ndarray:
    """``sum_l (w_l / |K_l|) T_l^T K_l T_l`` for one macro element.

    ``weights`` are the physical quadrature weights (rule weight times Jacobian).
    """
    nd = 2 * np.asarray(element_coords).shape[0]
    k = np.zeros((nd, nd))
    for op, w in zip(micro_ops, weights):
        if op.M.shape[1] != nd:
            raise ValueError(f"transformation matrix has {op.M.shape[1]} columns, element has {nd} dofs")
        k += w * op.energy_density_matrix(explicit=explicit)
    return 0.5 * (k + k.T)


def element_operators(problem: MacroProblem, element: int) -> list[MicroOperator]:
    geom = fem.element_geometry(problem.mesh, elements=element)
    M = linearization_matrices(geom)[0]
    return [MicroOperator(problem.basis, Ml) for Ml in M]


def _two_scale_element_matrices(problem: MacroProblem, geom: fem.ElementGeometry) -> np.ndarray:
    E = problem.basis.energy / problem.micro.area
    if _uniform(problem.mesh):
        M = linearization_matrices(_first(geom))
        ke = np.einsum("eq,eqap,ab,eqbr->epr", _first(geom).w, M, E, M)
        ke = np.broadcast_to(ke, (problem.mesh.n_elements,) + ke.shape[1:])
    else:
        M = linearization_matrices(geom)
        ke = np.einsum("eq,eqap,ab,eqbr->epr", geom.w, M, E, M, optimize=True)
    return 0.5 * (ke + np.swapaxes(ke, 1, 2))


def _first(geom: fem.ElementGeometry) -> fem.ElementGeometry:
    return fem.ElementGeometry(geom.x[:1], geom.detJ[:1], geom.w[:1], geom.N, geom.dNdx[:1], geom.rule)


@dataclass(frozen=True, eq=False)
class MacroSolution:
    problem: MacroProblem
    u: np.ndarray
    K: sp.csr_matrix
    A0: np.ndarray  # homogenized tensor used at every quadrature point
    geom: fem.ElementGeometry
    info: dict = field(default_factory=dict)

    @property
    def mesh(self) -> StructuredQuadMesh:
        return self.problem.mesh

    @cached_property
    def strain(self) -> np.ndarray:
        """Voigt strain (ne, nq, 3)."""
        ue = self.u[fem.element_dofs(self.mesh.elements)]
        return np.einsum("eqip,ep->eqi", self.geom.B, ue)

    @cached_property
    def stress(self) -> np.ndarray:
        return self.strain @ self.A0.T

    def element_displacements(self, element: int) -> np.ndarray:
        return self.u[fem.element_dofs(self.mesh.elements[element])]

    def micro_operator(self, element: int, qp: int) -> MicroOperator:
        if self.problem.micro is None:
            raise ValueError("single-scale solution has no micro operators")
        M = linearization_matrices(fem.element_geometry(self.mesh, self.geom.rule, elements=element))[0, qp]
        return MicroOperator(self.problem.basis, M)

    def energy(self) -> float:
        return float(self.u @ (self.K @ self.u))


def assemble_and_solve(problem: MacroProblem, rule: fem.QuadratureRule | None = None) -> MacroSolution:
    """Two-scale solve; with ``problem.micro`` unset, use ``problem`` as a single-scale problem (error)."""
    if problem.micro is None:
        raise ValueError("assemble_and_solve needs a micro problem; use single_scale_solve otherwise")
    geom = fem.element_geometry(problem.mesh, rule)
    ke = _two_scale_element_matrices(problem, geom)
    K = fem.assemble(problem.mesh, ke)
    u = _solve(problem, K)
    return MacroSolution(problem, u, K, problem.basis.A0, geom, {"micro_seconds": problem.basis.seconds})


def _solve(problem: MacroProblem, K) -> np.ndarray:
    return fem.solve_spd(K, problem.load(), problem.dirichlet_dofs, problem.dirichlet_values, mesh=problem.mesh)


def single_scale_solve(mesh: StructuredQuadMesh, A0, volume_load=DEFAULT_VOLUME_LOAD, dirichlet_dofs=None,
                       dirichlet_values=0.0, line_load=None) -> np.ndarray:
    prob = MacroProblem(mesh, volume_load=volume_load, line_load=line_load, dirichlet_dofs=dirichlet_dofs,
                        dirichlet_values=dirichlet_values)
    K = fem.assemble_stiffness(mesh, A0)
    return _solve(prob, K)


def single_scale_solution(problem: MacroProblem, A0, rule: fem.QuadratureRule | None = None) -> MacroSolution:
    """Single-scale solve of ``problem`` with constant tensor ``A0``, wrapped as a MacroSolution."""
    A0 = np.asarray(A0, dtype=float)
    geom = fem.element_geometry(problem.mesh, rule)
    K = fem.assemble(problem.mesh, fem.stiffness_from_geometry(geom, np.broadcast_to(A0, geom.x.shape[:2] + (3, 3))))
    K = 0.5 * (K + K.T)
    u = _solve(problem, K)
    return MacroSolution(problem, u, sp.csr_matrix(K), A0, geom)


def recover_micro(solution: MacroSolution, element: int, qp: int) -> np.ndarray:
    """Micro displacements ``T d^H_e`` at (element, qp).

    Fields of the perturbation technique carry no rigid-body part; see ``enrich_rigid_body``.
    """
    op = solution.micro_operator(element, qp)
    return op.micro_field(solution.element_displacements(element))


def recover_micro_resolve(solution: MacroSolution, element: int, qp: int) -> np.ndarray:
    """Same field from a fresh micro solve driven by the true macro displacements."""
    op = solution.micro_operator(element, qp)
    p = solution.problem
    d_lin = p.micro.driving_fields @ (op.M @ solution.element_displacements(element))
    return solve_coupled(p.micro, p.coupling, d_lin).d


def macro_state_at(solution: MacroSolution, element: int, qp: int) -> tuple[np.ndarray, np.ndarray]:
    """Macro displacement and gradient at a quadrature point."""
    op = solution.micro_operator(element, qp)
    c = op.M @ solution.element_displacements(element)
    return c[:2], c[2:].reshape(2, 2)


def micro_energy_sum(solution: MacroSolution) -> float:
    """``sum_l (w_l / |K_l|) int eps(d_l) . A eps(d_l)`` over all macro quadrature points.

    ``d_l = D c_l`` are the recovered micro fields; the energies come from micro quadrature,
    independent of the assembled macro stiffness.
    """
    p = solution.problem
    geom = solution.geom
    M = linearization_matrices(geom)
    ue = solution.u[fem.element_dofs(solution.mesh.elements)]
    C = np.einsum("eqap,ep->eqa", M, ue).reshape(-1, 6)
    D = p.basis.D
    w = geom.w.reshape(-1)
    total = 0.0
    chunk = 128
    for s in range(0, C.shape[0], chunk):
        d = D @ C[s:s + chunk].T
        total += float(w[s:s + chunk] @ np.diag(p.micro.strain_energy(d)))
    return total / p.micro.area


def nearest_qp(solution_or_mesh, x, rule: fem.QuadratureRule | None = None) -> tuple[int, int, np.ndarray]:
    mesh = solution_or_mesh.mesh if isinstance(solution_or_mesh, MacroSolution) else solution_or_mesh
    geom = fem.element_geometry(mesh, rule)
    dist = np.linalg.norm(geom.x - np.asarray(x, dtype=float), axis=-1)
    e, q = np.unravel_index(np.argmin(dist), dist.shape)
    return int(e), int(q), geom.x[e, q]


def write_fields(solution: MacroSolution, prefix, cell_data: dict | None = None) -> tuple[str, str]:
    """Export ``prefix.vtk`` (displacements, element-mean strain/stress) and ``prefix_qp.csv``."""
    from .mesh import write_vtk

    mesh = solution.mesh
    w = solution.geom.w
    mean = lambda f: np.einsum("eq,eqi->ei", w, f) / w.sum(axis=1)[:, None]
    cells = {"strain": mean(solution.strain), "stress": mean(solution.stress)}
    cells.update(cell_data or {})
    vtk_path, csv_path = f"{prefix}.vtk", f"{prefix}_qp.csv"
    write_vtk(vtk_path, mesh, {"displacement": solution.u.reshape(-1, 2)}, cells)
    ne, nq = w.shape
    e, q = np.divmod(np.arange(ne * nq), nq)
    table = np.column_stack([solution.geom.x.reshape(-1, 2), solution.strain.reshape(-1, 3),
                             solution.stress.reshape(-1, 3)])
    with open(csv_path, "w") as fh:
        fh.write("element,qp,x,y,e11,e22,g12,s11,s22,s12\n")
        for i in range(ne * nq):
            fh.write(f"{e[i]},{q[i]}," + ",".join(repr(float(v)) for v in table[i]) + "\n")
    return vtk_path, csv_path
