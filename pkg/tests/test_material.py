import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fehmm.material import (FIELD_KINDS, MicrostructureField, chessboard, homogeneous, matrix_inclusion,
                            sample_field, sine_wave, voigt_tensor)


def test_voigt_nu_zero():
    np.testing.assert_allclose(voigt_tensor(1.0, 0.0), np.diag([1.0, 1.0, 0.5]))


def test_voigt_reference_values():
    A = voigt_tensor(40000.0, 0.2)
    assert A[0, 0] == pytest.approx(40000 * 0.8 / (1.2 * 0.6))
    assert A[0, 0] == pytest.approx(44444.444444, rel=1e-10)
    assert A[0, 1] == pytest.approx(11111.111111, rel=1e-10)
    assert A[2, 2] == pytest.approx(16666.666667, rel=1e-10)
    np.testing.assert_array_equal(A, A.T)


@pytest.mark.parametrize("E, nu", [(1.0, 0.5), (-1.0, 0.2), (1.0, -1.0)])
def test_voigt_rejects(E, nu):
    with pytest.raises(ValueError):
        voigt_tensor(E, nu)


@given(st.floats(1e-3, 1e7), st.floats(-0.99, 0.49))
def test_voigt_positive_definite(E, nu):
    A = voigt_tensor(E, nu)
    assert np.all(np.linalg.eigvalsh(A) > 0)
    # engineering shear: A33 equals the shear modulus
    assert A[2, 2] == pytest.approx(E / (2 * (1 + nu)))


def test_inclusion_centre_and_corner():
    f = matrix_inclusion(0.005)
    np.testing.assert_allclose(sample_field(f, [0.0025, 0.0025]), voigt_tensor(200000.0, 0.2))
    np.testing.assert_allclose(sample_field(f, [0.0, 0.0]), voigt_tensor(40000.0, 0.2))


def test_inclusion_volume_fraction():
    f = matrix_inclusion(1.0)
    g = (np.arange(1024) + 0.5) / 1024
    X, Y = np.meshgrid(g, g)
    E = f.young(np.stack([X, Y], -1))
    assert abs(np.mean(E == f.e_inclusion) - 9 / 16) <= 1 / 1024


def test_chessboard_contrast_and_layout():
    f = chessboard(1.0)
    assert f.e_inclusion / f.e_matrix == pytest.approx(50.0)
    E = f.young(np.array([[0.1, 0.1], [0.6, 0.1], [0.1, 0.6], [0.6, 0.6]]))
    np.testing.assert_array_equal(E, [2e6, 4e4, 4e4, 2e6])
    # the heterogeneity reaches the cell boundary
    assert len(np.unique(f.young(np.array([[0.1, 0.0], [0.6, 0.0]])))) == 2


def test_half_open_interfaces():
    f = matrix_inclusion(1.0)
    assert f.young(np.array([0.125, 0.5])) == f.e_inclusion
    assert f.young(np.array([0.875, 0.5])) == f.e_matrix


@pytest.mark.parametrize("variant", ["shifted", "symmetric"])
def test_sine_wave_extremes_and_continuity(variant):
    f = sine_wave(1.0, cell_variant=variant)
    g = np.linspace(0, 1, 401)
    X, Y = np.meshgrid(g, g)
    E = f.young(np.stack([X, Y], -1))
    assert E.min() == pytest.approx(40000.0) and E.max() == pytest.approx(50000.0)
    x = np.random.default_rng(1).random((2000, 2))
    jump = np.abs(f.young(x + 1e-6) - f.young(x))
    assert jump.max() < 1e-3 * (f.e_max - f.e_min)


@given(st.sampled_from(FIELD_KINDS), st.floats(-3, 3), st.floats(-3, 3), st.sampled_from([0.005, 1.0, 1 / 64]))
def test_periodicity(kind, a, b, eps):
    f = MicrostructureField(kind, eps)
    x = np.array([a, b]) * eps
    base = f.tensor(x)
    assert np.all(np.linalg.eigvalsh(base) > 0)
    y = np.mod(x / eps, 1.0)
    near_interface = np.min(np.abs(np.subtract.outer(y, [0.0, 0.125, 0.5, 0.875, 1.0]))) < 1e-9
    for shift in ([eps, 0.0], [0.0, eps], [-eps, 2 * eps]):
        other = f.tensor(x + np.array(shift))
        if kind in ("matrix_inclusion", "chessboard") and near_interface:
            continue
        np.testing.assert_allclose(other, base, rtol=1e-9)


def test_homogeneous_constant():
    f = homogeneous(123.0, 0.3)
    E = f.young(np.random.default_rng(0).random((50, 2)) * 7)
    assert np.all(E == 123.0) and f.is_homogeneous


@pytest.mark.parametrize("kw", [dict(kind="foam"), dict(epsilon=0.0), dict(cell_variant="odd"),
                                dict(inclusion_ratio=1.0), dict(tiles=0), dict(e_min=5.0, e_max=1.0)])
def test_field_validation(kw):
    with pytest.raises(ValueError):
        MicrostructureField(**kw)


def test_field_serialisable():
    d = sine_wave(0.5, e_max=1e5).to_dict()
    assert MicrostructureField(**d) == sine_wave(0.5, e_max=1e5)
