import csv

import numpy as np
import pytest

from fehmm import fem, macro, micro
from fehmm.material import homogeneous, matrix_inclusion, sine_wave, voigt_tensor
from fehmm.micro import CouplingSpec, MicroProblem


def _rel(a, b):
    return np.linalg.norm(np.asarray(a) - b) / np.linalg.norm(b)


def _two_scale(builder, n, order, kind, field=None, micro_n=8):
    field = field or matrix_inclusion(1.0)
    P = MicroProblem(field, field.epsilon, micro_n)
    prob = builder(n, order, micro=P, coupling=CouplingSpec(kind))
    return macro.assemble_and_solve(prob)


@pytest.mark.parametrize("builder", [macro.square_cantilever, macro.tapered_cantilever], ids=["square", "tapered"])
@pytest.mark.parametrize("order", [1, 2])
@pytest.mark.parametrize("kind", ["dirichlet_lagrange", "periodic_direct", "neumann_semi_dirichlet"])
def test_two_scale_equals_single_scale_with_A0(builder, order, kind):
    sol = _two_scale(builder, 4, order, kind)
    ref = macro.single_scale_solution(builder(4, order), sol.A0)
    assert _rel(sol.u, ref.u) < 1e-12


def test_homogeneous_micro_is_plain_fem():
    f = homogeneous(40000.0, 0.2, epsilon=0.1)
    sol = _two_scale(macro.tapered_cantilever, 4, 2, "periodic_lagrange", f, micro_n=2)
    mesh = sol.mesh
    u = macro.single_scale_solve(mesh, voigt_tensor(40000.0, 0.2))
    assert _rel(sol.u, u) < 1e-11


@pytest.mark.parametrize("kind", ["dirichlet_lagrange", "periodic_lagrange", "neumann_perturbation"])
def test_macro_energy_equals_micro_energy_sum(kind):
    sol = _two_scale(macro.tapered_cantilever, 3, 1, kind, sine_wave(1.0))
    assert macro.micro_energy_sum(sol) == pytest.approx(sol.energy(), rel=1e-10)


def test_element_stiffness_from_operators():
    sol = _two_scale(macro.tapered_cantilever, 3, 2, "dirichlet_lagrange", sine_wave(1.0), micro_n=4)
    geom = fem.element_geometry(sol.mesh, elements=4)
    ops = macro.element_operators(sol.problem, 4)
    coords = sol.mesh.nodes[sol.mesh.elements[4]]
    k_fast = macro.macro_element_stiffness(coords, ops, geom.w[0])
    k_slow = macro.macro_element_stiffness(coords, ops, geom.w[0], explicit=True)
    ke = fem.element_stiffness(coords, sol.A0)
    assert _rel(k_fast, ke) < 1e-12
    assert _rel(k_slow, ke) < 1e-8
    with pytest.raises(ValueError):
        macro.macro_element_stiffness(coords[:4], ops, geom.w[0])


@pytest.mark.parametrize("kind", ["dirichlet_lagrange", "dirichlet_direct", "neumann_semi_dirichlet"])
def test_recovered_micro_field_matches_resolve(kind):
    sol = _two_scale(macro.square_cantilever, 4, 1, kind, micro_n=6)
    e, q, _ = macro.nearest_qp(sol, [0.26, 0.26])
    a = macro.recover_micro(sol, e, q)
    b = macro.recover_micro_resolve(sol, e, q)
    assert _rel(a, b) < 1e-10


def test_macro_state_at_linear_field():
    sol = _two_scale(macro.tapered_cantilever, 2, 1, "dirichlet_lagrange", micro_n=2)
    G = np.array([[0.1, -0.3], [0.2, 0.05]])
    u = (sol.mesh.nodes @ G.T + [1.0, 2.0]).ravel()
    moved = macro.MacroSolution(sol.problem, u, sol.K, sol.A0, sol.geom)
    x = sol.geom.x[1, 2]
    val, grad = macro.macro_state_at(moved, 1, 2)
    np.testing.assert_allclose(val, G @ x + [1.0, 2.0], atol=1e-13)
    np.testing.assert_allclose(grad, G, atol=1e-13)


def test_clamped_edge_and_load():
    prob = macro.square_cantilever(4, 2)
    assert prob.dirichlet_dofs.size == 2 * 9
    assert prob.load()[1::2].sum() == pytest.approx(-10.0)


def test_problem_requires_coupling_with_micro():
    P = MicroProblem(sine_wave(1.0), 1.0, 2)
    with pytest.raises(ValueError):
        macro.square_cantilever(2, micro=P)
    with pytest.raises(ValueError):
        macro.assemble_and_solve(macro.square_cantilever(2))


def test_write_fields(tmp_path):
    sol = _two_scale(macro.square_cantilever, 3, 2, "periodic_direct", micro_n=4)
    vtk, table = macro.write_fields(sol, tmp_path / "out")
    assert open(vtk).read().startswith("# vtk DataFile")
    rows = list(csv.DictReader(open(table)))
    assert len(rows) == 9 * 9
    r = rows[10]
    np.testing.assert_allclose([float(r["x"]), float(r["y"])], sol.geom.x[1, 1])
    np.testing.assert_allclose(float(r["s11"]), sol.stress[1, 1, 0])
