"""Plane-strain isotropic elasticity and periodic two-dimensional microstructures."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

FIELD_KINDS = ("homogeneous", "matrix_inclusion", "chessboard", "sine_wave")


def _check_moduli(E, nu):
    if not np.all(np.asarray(E) > 0):
        raise ValueError(f"Young's modulus must be positive, got {E}")
    if not (-1.0 < nu < 0.5):
        raise ValueError(f"Poisson ratio must satisfy -1 < nu < 0.5, got {nu}")


def voigt_tensor(E: float, nu: float) -> np.ndarray:
    """Plane-strain stiffness in Voigt order (11, 22, 12), engineering shear."""
    _check_moduli(E, nu)
    c = E / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return np.array([
        [c * (1.0 - nu), c * nu, 0.0],
        [c * nu, c * (1.0 - nu), 0.0],
        [0.0, 0.0, E / (2.0 * (1.0 + nu))],
    ])


def voigt_tensors(E: np.ndarray, nu: float) -> np.ndarray:
    """Vectorised ``voigt_tensor`` for an array of moduli, shape ``E.shape + (3, 3)``."""
    E = np.asarray(E, dtype=float)
    _check_moduli(E, nu)
    return E[..., None, None] * voigt_tensor(1.0, nu)


@dataclass(frozen=True)
class MicrostructureField:
    """Periodic Young's modulus distribution with constant Poisson ratio.

    kinds
      homogeneous       E = e_matrix everywhere
      matrix_inclusion  centred square inclusion of side ``inclusion_ratio * epsilon``
      chessboard        ``tiles x tiles`` alternating phases, phase 1 (e_inclusion) at lower left
      sine_wave         smooth E between e_min and e_max; ``cell_variant`` shifted (sin sin) or symmetric (cos cos)

    Tiles are half-open ``[a, b)`` so points on interfaces get a deterministic phase.
    """

    kind: str = "homogeneous"
    epsilon: float = 1.0
    e_matrix: float = 40000.0
    e_inclusion: float = 200000.0
    nu: float = 0.2
    inclusion_ratio: float = 0.75
    tiles: int = 2
    e_min: float = 40000.0
    e_max: float = 50000.0
    cell_variant: str = "shifted"

    def __post_init__(self):
        if self.kind not in FIELD_KINDS:
            raise ValueError(f"unknown microstructure kind {self.kind!r}; expected one of {FIELD_KINDS}")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.cell_variant not in ("shifted", "symmetric"):
            raise ValueError(f"unknown sine-wave cell variant {self.cell_variant!r}")
        if not (0.0 < self.inclusion_ratio < 1.0):
            raise ValueError("inclusion_ratio must lie in (0, 1)")
        if self.tiles < 1:
            raise ValueError("tiles must be >= 1")
        _check_moduli(min(self.e_matrix, self.e_inclusion, self.e_min, self.e_max), self.nu)
        if self.e_max < self.e_min:
            raise ValueError("e_max must not be smaller than e_min")

    @property
    def is_homogeneous(self) -> bool:
        return self.kind == "homogeneous"

    def to_dict(self) -> dict:
        return asdict(self)

    def young(self, x) -> np.ndarray:
        """Young's modulus at points ``x`` (shape (..., 2))."""
        x = np.asarray(x, dtype=float)
        eps = self.epsilon
        # local cell coordinates in [0, 1)
        y = np.mod(x / eps, 1.0)
        y = np.where(y >= 1.0, 0.0, y)
        shape = x.shape[:-1]
        if self.kind == "homogeneous":
            return np.full(shape, self.e_matrix)
        if self.kind == "matrix_inclusion":
            lo = 0.5 * (1.0 - self.inclusion_ratio)
            hi = 1.0 - lo
            inside = np.all((y >= lo) & (y < hi), axis=-1)
            return np.where(inside, self.e_inclusion, self.e_matrix)
        if self.kind == "chessboard":
            t = np.floor(y * self.tiles).astype(int)
            t = np.minimum(t, self.tiles - 1)
            phase1 = (t[..., 0] + t[..., 1]) % 2 == 0
            return np.where(phase1, self.e_inclusion, self.e_matrix)
        s = 2.0 * math.pi * y
        if self.cell_variant == "shifted":
            w = np.sin(s[..., 0]) * np.sin(s[..., 1])
        else:
            w = np.cos(s[..., 0]) * np.cos(s[..., 1])
        return self.e_min + (self.e_max - self.e_min) * 0.5 * (1.0 + w)

    def tensor(self, x) -> np.ndarray:
        return voigt_tensors(self.young(x), self.nu)

    def reference_tensor(self) -> np.ndarray:
        """Tensor of the matrix (or minimum-stiffness) phase, used for scaling."""
        E = self.e_min if self.kind == "sine_wave" else self.e_matrix
        return voigt_tensor(E, self.nu)


def sample_field(field: MicrostructureField, x) -> np.ndarray:
    return field.tensor(x)


def homogeneous(E: float = 40000.0, nu: float = 0.2, epsilon: float = 1.0) -> MicrostructureField:
    return MicrostructureField("homogeneous", epsilon, e_matrix=E, nu=nu)


def matrix_inclusion(epsilon: float, e_matrix: float = 40000.0, e_inclusion: float = 200000.0,
                     nu: float = 0.2) -> MicrostructureField:
    return MicrostructureField("matrix_inclusion", epsilon, e_matrix=e_matrix, e_inclusion=e_inclusion, nu=nu)


def chessboard(epsilon: float, e1: float = 2000000.0, e2: float = 40000.0, nu: float = 0.2,
               tiles: int = 2) -> MicrostructureField:
    return MicrostructureField("chessboard", epsilon, e_matrix=e2, e_inclusion=e1, nu=nu, tiles=tiles)


def sine_wave(epsilon: float, e_min: float = 40000.0, e_max: float = 50000.0, nu: float = 0.2,
              cell_variant: str = "shifted") -> MicrostructureField:
    return MicrostructureField("sine_wave", epsilon, e_min=e_min, e_max=e_max, nu=nu, cell_variant=cell_variant)
