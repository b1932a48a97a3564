import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given
from hypothesis import strategies as st

from fehmm import fem
from fehmm.material import voigt_tensor
from fehmm.mesh import build_rect_mesh, build_tapered_mesh, tapered_cantilever_corners

A_REF = voigt_tensor(40000.0, 0.2)


@pytest.mark.parametrize("n", [1, 2, 3, 4])
def test_gauss_exactness(n):
    r = fem.gauss_rule(n)
    assert r.weights.sum() == pytest.approx(4.0)
    for p in range(2 * n):
        for q in range(2 * n):
            exact = (1 - (-1) ** (p + 1)) / (p + 1) * (1 - (-1) ** (q + 1)) / (q + 1)
            got = np.sum(r.weights * r.points[:, 0] ** p * r.points[:, 1] ** q)
            assert got == pytest.approx(exact, abs=1e-13)


@pytest.mark.parametrize("order", [1, 2])
def test_shape_function_kronecker(order):
    nodes = fem.reference_nodes(order)
    N, _ = fem.shape_functions(order, nodes)
    np.testing.assert_allclose(N, np.eye(len(nodes)), atol=1e-15)


@pytest.mark.parametrize("order", [1, 2])
@given(st.floats(-1, 1), st.floats(-1, 1))
def test_shape_partition_of_unity(order, s, t):
    N, dN = fem.shape_functions(order, [s, t])
    assert N.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(dN.sum(axis=0), 0.0, atol=1e-13)
    # linear completeness: sum N_a x_a reproduces xi
    np.testing.assert_allclose(N @ fem.reference_nodes(order), [s, t], atol=1e-13)


def test_shape_bad_order():
    with pytest.raises(ValueError):
        fem.shape_functions(3, [0.0, 0.0])


def _meshes():
    c = tapered_cantilever_corners()
    return [build_rect_mesh(3, 2, 1.0, 0.7, 1), build_rect_mesh(2, 3, 1.0, 0.7, 2),
            build_tapered_mesh(3, 3, c, 1), build_tapered_mesh(2, 2, c, 2)]


@pytest.mark.parametrize("mesh", _meshes(), ids=["q4", "q9", "q4-taper", "q9-taper"])
def test_rigid_modes_and_symmetry(mesh):
    K = fem.assemble_stiffness(mesh, A_REF)
    assert abs(K - K.T).max() == 0.0
    x, y = mesh.nodes.T
    for u in (np.column_stack([np.ones_like(x), 0 * x]), np.column_stack([0 * x, np.ones_like(x)]),
              np.column_stack([-y, x])):
        assert np.abs(K @ u.ravel()).max() < 1e-9 * abs(K).max()


@pytest.mark.parametrize("mesh", _meshes(), ids=["q4", "q9", "q4-taper", "q9-taper"])
def test_patch_test_linear_field(mesh):
    G = np.array([[1e-3, -2e-3], [5e-4, 3e-3]])
    exact = (mesh.nodes @ G.T + [0.1, -0.2]).ravel()
    K = fem.assemble_stiffness(mesh, A_REF)
    loop = np.unique(np.concatenate([v for v in mesh.boundary_edges.values()]))
    fixed = np.stack([2 * loop, 2 * loop + 1], -1).ravel()
    d = fem.solve_spd(K, np.zeros(mesh.n_dofs), fixed, exact[fixed])
    np.testing.assert_allclose(d, exact, atol=1e-12)


@pytest.mark.parametrize("order", [1, 2])
def test_uniaxial_bar(order):
    # nu = 0: plane strain reduces to 1D, u_x = t x / E everywhere
    E, t, L = 7.0, 3.0, 2.0
    mesh = build_rect_mesh(4, 2, L, 1.0, order)
    K = fem.assemble_stiffness(mesh, voigt_tensor(E, 0.0))
    F = fem.edge_load_vector(mesh, "right", [t, 0.0])
    left = mesh.boundary_edges["left"]
    fixed = np.r_[2 * left, 2 * left + 1]
    d = fem.solve_spd(K, F, fixed)
    np.testing.assert_allclose(d[0::2], t * mesh.nodes[:, 0] / E, atol=1e-12)
    np.testing.assert_allclose(d[1::2], 0.0, atol=1e-12)


def test_load_vector_total():
    mesh = build_tapered_mesh(3, 3, tapered_cantilever_corners(), 2)
    F = fem.load_vector(mesh, [0.0, -10.0])
    assert F[1::2].sum() == pytest.approx(-10.0 * mesh.area)
    assert F[0::2].sum() == pytest.approx(0.0, abs=1e-12)


def test_assembly_order_independent():
    mesh = build_rect_mesh(3, 3, 1.0, 1.0, 1)
    ke = fem.element_stiffnesses(mesh, A_REF)
    K1 = fem.assemble(mesh, ke)
    perm = np.random.default_rng(3).permutation(mesh.n_elements)
    shuffled = type(mesh)(mesh.order, mesh.nx, mesh.ny, mesh.nodes, mesh.elements[perm], mesh.corners)
    K2 = fem.assemble(shuffled, ke[perm])
    assert (K1 != K2).nnz == 0


def test_singular_without_supports():
    mesh = build_rect_mesh(2, 2, 1.0, 1.0, 1)
    K = fem.assemble_stiffness(mesh, A_REF)
    with pytest.raises(fem.SingularSystemError, match="rigid"):
        fem.solve_spd(K, np.zeros(mesh.n_dofs))


def test_inverted_element_rejected():
    coords = np.array([[0, 0], [0, 1], [1, 1], [1, 0]], dtype=float)  # clockwise
    with pytest.raises(fem.GeometryError):
        fem.element_stiffness(coords, A_REF)


def _saddle_case(n=30, m=5, seed=0):
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((n, n))
    K = M @ M.T + n * np.eye(n)
    G = rng.standard_normal((m, n))
    return sp.csr_matrix(K), sp.csr_matrix(G), rng


def test_saddle_matches_dense():
    K, G, rng = _saddle_case()
    f, g = rng.standard_normal(30), rng.standard_normal(5)
    d, lam = fem.SaddleSolver(K, G).solve(f, g)
    full = np.block([[K.toarray(), G.T.toarray()], [G.toarray(), np.zeros((5, 5))]])
    x = np.linalg.solve(full, np.r_[f, g])
    np.testing.assert_allclose(np.r_[d, lam], x, rtol=1e-10, atol=1e-12)


def test_saddle_schur_and_lu_agree():
    K, G, rng = _saddle_case(60, 12, seed=1)
    F = rng.standard_normal((60, 3))
    s = fem.SaddleSolver(K, G)
    assert s.mode == "schur"
    lu = fem.SaddleSolver(K, G)
    lu.mode = "lu"
    lu.matrix = sp.bmat([[K, G.T], [G, None]], format="csc")
    lu.fac = fem.Factorization(lu.matrix, pivot_thresh=0.1, permc_spec="COLAMD")
    d1, l1 = s.solve(F)
    d2, l2 = lu.solve(F)
    np.testing.assert_allclose(d1, d2, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(l1, l2, rtol=1e-10, atol=1e-12)


def test_saddle_many_rows_uses_lu():
    K, G, rng = _saddle_case(60, 20, seed=2)
    s = fem.SaddleSolver(K, G)
    assert s.mode == "lu"
    d, _ = s.solve(rhs_constraint=rng.standard_normal(20))
    assert s.dimension == 80 and d.shape == (60,)


def test_rank_deficient_rows_reported():
    K, G, _ = _saddle_case()
    G2 = sp.vstack([G, G[1] * 2.0]).tocsr()
    with pytest.raises(fem.RankDeficientConstraintError) as err:
        fem.SaddleSolver(K, G2)
    assert len(err.value.rows) == 1 and err.value.rows[0] in (1, 5)


def test_empty_constraint_row():
    K, G, _ = _saddle_case()
    G2 = sp.vstack([G, sp.csr_matrix((1, 30))]).tocsr()
    with pytest.raises(fem.RankDeficientConstraintError):
        fem.check_constraint_rank(G2)


def test_norms_of_simple_fields():
    mesh = build_rect_mesh(4, 4, 1.0, 1.0, 2)
    x, y = mesh.nodes.T
    const = np.column_stack([np.ones_like(x), 0 * x]).ravel()
    lin = np.column_stack([x, 0 * x]).ravel()
    assert fem.norm_L2(mesh, const) == pytest.approx(1.0)
    assert fem.norm_H1(mesh, lin) == pytest.approx(np.sqrt(4 / 3))
    assert fem.norm_energy(mesh, lin, A_REF) == pytest.approx(np.sqrt(A_REF[0, 0]))
    quad = np.column_stack([x * y, 0 * x]).ravel()
    assert fem.norm_L2(mesh, quad) == pytest.approx(1 / 3)


@pytest.mark.parametrize("order", [1, 2])
@pytest.mark.parametrize("n", [1, 3, 8, 17])
def test_nested_dissection_is_permutation(order, n):
    mesh = build_rect_mesh(n, n + 2, 1.0, 1.0, order)
    p = fem.nested_dissection(mesh, leaf=4)
    assert np.array_equal(np.sort(p), np.arange(mesh.n_nodes))


@pytest.mark.parametrize("order", [1, 2])
def test_solve_with_mesh_ordering_matches(order):
    mesh = build_tapered_mesh(12, 12, tapered_cantilever_corners(), order)
    K = fem.assemble_stiffness(mesh, A_REF)
    F = fem.load_vector(mesh, [0.0, -10.0])
    left = mesh.boundary_edges["left"]
    fixed = np.r_[2 * left, 2 * left + 1]
    d1 = fem.solve_spd(K, F, fixed)
    d2 = fem.solve_spd(K, F, fixed, mesh=mesh)
    assert np.linalg.norm(d1 - d2) <= 1e-12 * np.linalg.norm(d1)


def test_separators_decouple_halves():
    # with the separator last, the leading block is block diagonal in the two halves
    mesh = build_rect_mesh(8, 8, 1.0, 1.0, 2)
    K = fem.assemble_stiffness(mesh, A_REF)
    p = fem.dof_ordering(mesh)
    gx = mesh.gx
    sep = np.arange(gx) * gx + 8  # middle vertical element line of the 17 x 17 node grid
    sep_dofs = set(np.r_[2 * sep, 2 * sep + 1].tolist())
    order = [d for d in p if d not in sep_dofs]
    half = len(order) // 2
    left, right = np.array(order[:half]), np.array(order[half:])
    assert abs(K[left][:, right]).max() == 0.0
