"""Structured quadrilateral meshes (Q4/Q9) on rectangles and tapered quadrilaterals.

Nodes live on a lexicographic grid of ``(order*nx + 1) x (order*ny + 1)`` points
(x index fastest).  The geometry is the bilinear map of the four domain corners,
so every element is the image of a parameter-space rectangle under that map.

Local node order of an element (matches VTK_QUAD / VTK_BIQUADRATIC_QUAD)::

    3---6---2
    |   |   |
    7---8---5
    |   |   |
    0---4---1
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# Regularity threshold for the clamped tapered cantilever (corner singularity vanishes above it).
TAPER_REGULARITY_DEG = 28.4

EDGE_NAMES = ("bottom", "right", "top", "left")


class MeshError(ValueError):
    pass


class OutOfDomainError(MeshError):
    pass


@dataclass(frozen=True, eq=False)
class StructuredQuadMesh:
    order: int
    nx: int
    ny: int
    nodes: np.ndarray
    elements: np.ndarray
    corners: np.ndarray  # domain corners, counterclockwise from lower left
    kind: str = "rect"
    metadata: dict = field(default_factory=dict)

    @property
    def gx(self) -> int:
        return self.order * self.nx + 1

    @property
    def gy(self) -> int:
        return self.order * self.ny + 1

    @property
    def n_nodes(self) -> int:
        return self.nodes.shape[0]

    @property
    def n_elements(self) -> int:
        return self.elements.shape[0]

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def nodes_per_element(self) -> int:
        return self.elements.shape[1]

    def node_index(self, a, b):
        return np.asarray(b) * self.gx + np.asarray(a)

    @property
    def is_rectangular(self) -> bool:
        return self.kind == "rect"

    @property
    def width(self) -> float:
        return float(self.corners[1, 0] - self.corners[0, 0])

    @property
    def height(self) -> float:
        return float(self.corners[3, 1] - self.corners[0, 1])

    @property
    def area(self) -> float:
        c = self.corners
        x, y = c[:, 0], c[:, 1]
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    @property
    def corner_nodes(self) -> np.ndarray:
        gx, gy = self.gx, self.gy
        return np.array([0, gx - 1, gx * gy - 1, (gy - 1) * gx])

    @property
    def boundary_edges(self) -> dict[str, np.ndarray]:
        """Node lists of the four sides, each traversed counterclockwise."""
        gx, gy = self.gx, self.gy
        a = np.arange(gx)
        b = np.arange(gy)
        return {
            "bottom": self.node_index(a, 0),
            "right": self.node_index(gx - 1, b),
            "top": self.node_index(a[::-1], gy - 1),
            "left": self.node_index(0, b[::-1]),
        }

    def edge_elements(self, edge: str) -> tuple[np.ndarray, np.ndarray]:
        """Elements along ``edge`` and their edge-node lists (ordered along the edge)."""
        nx, ny = self.nx, self.ny
        if edge == "bottom":
            els = np.arange(nx)
            loc = [0, 4, 1]
        elif edge == "right":
            els = np.arange(ny) * nx + nx - 1
            loc = [1, 5, 2]
        elif edge == "top":
            els = (ny - 1) * nx + np.arange(nx)[::-1]
            loc = [2, 6, 3]
        elif edge == "left":
            els = np.arange(ny)[::-1] * nx
            loc = [3, 7, 0]
        else:
            raise MeshError(f"unknown edge {edge!r}")
        if self.order == 1:
            loc = [loc[0], loc[2]]
        return els, self.elements[els][:, loc]

    def map_parametric(self, s, t) -> np.ndarray:
        """Bilinear domain map from the unit parameter square."""
        s = np.asarray(s, dtype=float)[..., None]
        t = np.asarray(t, dtype=float)[..., None]
        c = self.corners
        return (1 - s) * (1 - t) * c[0] + s * (1 - t) * c[1] + s * t * c[2] + (1 - s) * t * c[3]

    def map_local(self, element, xi) -> np.ndarray:
        """Physical point of local coordinates ``xi`` in ``element``."""
        element = np.asarray(element)
        xi = np.asarray(xi, dtype=float)
        i = element % self.nx
        j = element // self.nx
        s = (i + 0.5 * (xi[..., 0] + 1.0)) / self.nx
        t = (j + 0.5 * (xi[..., 1] + 1.0)) / self.ny
        return self.map_parametric(s, t)

    def element_centers(self) -> np.ndarray:
        return self.map_local(np.arange(self.n_elements), np.zeros((self.n_elements, 2)))


def _grid_connectivity(nx: int, ny: int, order: int) -> np.ndarray:
    gx = order * nx + 1
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    i = i.ravel()
    j = j.ravel()
    a0 = order * i
    b0 = order * j

    def idx(da, db):
        return (b0 + db) * gx + a0 + da

    if order == 1:
        return np.stack([idx(0, 0), idx(1, 0), idx(1, 1), idx(0, 1)], axis=1)
    return np.stack(
        [
            idx(0, 0), idx(2, 0), idx(2, 2), idx(0, 2),
            idx(1, 0), idx(2, 1), idx(1, 2), idx(0, 1),
            idx(1, 1),
        ],
        axis=1,
    )


def _build(nx, ny, order, corners, kind, metadata=None) -> StructuredQuadMesh:
    if order not in (1, 2):
        raise MeshError(f"order must be 1 or 2, got {order}")
    if int(nx) != nx or int(ny) != ny or nx < 1 or ny < 1:
        raise MeshError(f"element counts must be positive integers, got ({nx}, {ny})")
    nx, ny = int(nx), int(ny)
    corners = np.asarray(corners, dtype=float)
    gx, gy = order * nx + 1, order * ny + 1
    s = np.arange(gx) / (gx - 1)
    t = np.arange(gy) / (gy - 1)
    S, T = np.meshgrid(s, t, indexing="xy")
    proto = StructuredQuadMesh(order, nx, ny, np.zeros((0, 2)), np.zeros((0, 4), int), corners, kind)
    nodes = proto.map_parametric(S.ravel(), T.ravel())
    if kind == "rect":
        # exact grid coordinates, no bilinear round-off
        X = corners[0, 0] + (corners[1, 0] - corners[0, 0]) * S.ravel()
        Y = corners[0, 1] + (corners[3, 1] - corners[0, 1]) * T.ravel()
        nodes = np.column_stack([X, Y])
    elements = _grid_connectivity(nx, ny, order)
    return StructuredQuadMesh(order, nx, ny, nodes, elements, corners, kind, dict(metadata or {}))


def build_rect_mesh(nx: int, ny: int, width: float, height: float, order: int = 1,
                    origin=(0.0, 0.0)) -> StructuredQuadMesh:
    if not (width > 0 and height > 0):
        raise MeshError(f"width and height must be positive, got ({width}, {height})")
    x0, y0 = origin
    corners = [(x0, y0), (x0 + width, y0), (x0 + width, y0 + height), (x0, y0 + height)]
    return _build(nx, ny, order, corners, "rect")


def taper_angle_deg(corners) -> float:
    """Half the angle enclosed by the bottom and top edge directions, in degrees."""
    c = np.asarray(corners, dtype=float)
    bottom = c[1] - c[0]
    top = c[2] - c[3]
    a_b = math.atan2(bottom[1], bottom[0])
    a_t = math.atan2(top[1], top[0])
    return math.degrees(0.5 * (a_b - a_t))


def build_tapered_mesh(nx: int, ny: int, corners, order: int = 1) -> StructuredQuadMesh:
    c = np.asarray(corners, dtype=float)
    if c.shape != (4, 2):
        raise MeshError("corners must be four 2D points")
    edges = np.roll(c, -1, axis=0) - c
    turn = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
    scale = max(np.abs(edges).max(), 1e-300) ** 2
    if np.any(turn <= 1e-12 * scale):
        raise MeshError("corners must form a convex, non-degenerate quadrilateral in counterclockwise order")
    alpha = taper_angle_deg(c)
    meta = {
        "taper_angle_deg": alpha,
        "regularity_threshold_deg": TAPER_REGULARITY_DEG,
        "regular": alpha > TAPER_REGULARITY_DEG + 1e-6,
        "regularity_marginal": abs(alpha - TAPER_REGULARITY_DEG) <= 1e-6,
    }
    return _build(nx, ny, order, c, "tapered", meta)


def tapered_cantilever_corners(length: float = 1.0, clamped_height: float = 2.0,
                               alpha_deg: float = 30.4) -> np.ndarray:
    """Symmetric trapezoid clamped along x = 0, narrowing toward x = length."""
    drop = length * math.tan(math.radians(alpha_deg))
    if 2 * drop >= clamped_height:
        raise MeshError("taper too steep for the given length and clamped height")
    return np.array([
        (0.0, 0.0),
        (length, drop),
        (length, clamped_height - drop),
        (0.0, clamped_height),
    ])


@dataclass(frozen=True)
class PeriodicPairs:
    pairs: np.ndarray  # (m, 2) rows of (plus_node, minus_node)
    excluded_corner_policy: str


def periodic_pairs(mesh: StructuredQuadMesh) -> PeriodicPairs:
    """Non-redundant node couples for periodic constraints.

    All left/right rows (corners included) are paired, then the interior of the
    bottom/top edges, then one corner couple (top-left, bottom-left).  The fourth
    corner relation (top-right, bottom-right) follows from the other three and is dropped.
    """
    if not mesh.is_rectangular:
        raise MeshError("periodic pairing requires a rectangular mesh")
    gx, gy = mesh.gx, mesh.gy
    b = np.arange(gy)
    a = np.arange(1, gx - 1)
    lr = np.column_stack([mesh.node_index(gx - 1, b), mesh.node_index(0, b)])
    bt = np.column_stack([mesh.node_index(a, gy - 1), mesh.node_index(a, 0)])
    corner = np.array([[mesh.node_index(0, gy - 1), mesh.node_index(0, 0)]])
    pairs = np.vstack([lr, bt, corner]).astype(int)
    d = mesh.nodes[pairs[:, 0]] - mesh.nodes[pairs[:, 1]]
    w, h = mesh.width, mesh.height
    ok = (np.isclose(d[:, 0], w, rtol=0, atol=1e-12 * w) & (np.abs(d[:, 1]) <= 1e-12 * h)) | (
        np.isclose(d[:, 1], h, rtol=0, atol=1e-12 * h) & (np.abs(d[:, 0]) <= 1e-12 * w)
    )
    if not np.all(ok):
        raise MeshError("opposite boundary edges do not match")
    return PeriodicPairs(pairs, "dropped (top-right, bottom-right): implied by the other three corner couples")


def boundary_loop(mesh: StructuredQuadMesh) -> np.ndarray:
    """Counterclockwise cycle of all boundary nodes, starting at the lower-left corner."""
    e = mesh.boundary_edges
    return np.concatenate([e["bottom"][:-1], e["right"][:-1], e["top"][:-1], e["left"][:-1]])


def loop_normals(mesh: StructuredQuadMesh, loop: np.ndarray | None = None) -> np.ndarray:
    """Discrete outward nodal normals ``n_q = 1/2 (x_{q+1} - x_{q-1}) x e3`` along the loop."""
    if loop is None:
        loop = boundary_loop(mesh)
    x = mesh.nodes[loop]
    d = np.roll(x, -1, axis=0) - np.roll(x, 1, axis=0)
    return 0.5 * np.column_stack([d[:, 1], -d[:, 0]])


def _invert_bilinear(mesh: StructuredQuadMesh, x: np.ndarray, tol: float = 1e-14, maxit: int = 50):
    c = mesh.corners
    st = np.full(x.shape, 0.5)
    for _ in range(maxit):
        s, t = st[:, 0], st[:, 1]
        r = mesh.map_parametric(s, t) - x
        dxs = (1 - t)[:, None] * (c[1] - c[0]) + t[:, None] * (c[2] - c[3])
        dxt = (1 - s)[:, None] * (c[3] - c[0]) + s[:, None] * (c[2] - c[1])
        det = dxs[:, 0] * dxt[:, 1] - dxs[:, 1] * dxt[:, 0]
        ds = (dxt[:, 1] * r[:, 0] - dxt[:, 0] * r[:, 1]) / det
        dt = (-dxs[:, 1] * r[:, 0] + dxs[:, 0] * r[:, 1]) / det
        st[:, 0] -= ds
        st[:, 1] -= dt
        if np.max(np.abs(ds) + np.abs(dt), initial=0.0) < tol:
            break
    return st


def locate_points(mesh: StructuredQuadMesh, x, tol: float = 1e-10):
    """Vectorised point location.

    Returns ``(elements, xi)``.  Points on element interfaces go to the lowest
    element index sharing them.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if mesh.is_rectangular:
        st = (x - mesh.corners[0]) / np.array([mesh.width, mesh.height])
    else:
        st = _invert_bilinear(mesh, x)
    bad = np.any((st < -tol) | (st > 1 + tol), axis=1)
    if np.any(bad):
        first = x[np.argmax(bad)]
        raise OutOfDomainError(f"{int(bad.sum())} point(s) outside the mesh domain, e.g. {first.tolist()}")
    st = np.clip(st, 0.0, 1.0)
    u = st * np.array([mesh.nx, mesh.ny])
    snapped = np.round(u)
    u = np.where(np.abs(u - snapped) <= 1e-12 * np.maximum(1.0, snapped), snapped, u)
    ij = np.ceil(u).astype(int) - 1
    ij[:, 0] = np.clip(ij[:, 0], 0, mesh.nx - 1)
    ij[:, 1] = np.clip(ij[:, 1], 0, mesh.ny - 1)
    xi = 2.0 * (u - ij) - 1.0
    return ij[:, 1] * mesh.nx + ij[:, 0], xi


def locate_point(mesh: StructuredQuadMesh, x, tol: float = 1e-10) -> tuple[int, np.ndarray]:
    els, xi = locate_points(mesh, np.asarray(x, dtype=float).reshape(1, 2), tol)
    return int(els[0]), xi[0]


_VTK_CELL_TYPE = {1: 9, 2: 28}


def write_vtk(path, mesh: StructuredQuadMesh, point_data: dict | None = None,
              cell_data: dict | None = None, title: str = "fehmm") -> None:
    """Legacy ASCII VTK unstructured grid; vector fields must be (n, 2) or (n, 3)."""

    def _block(kind, data, n):
        out = []
        for name, arr in (data or {}).items():
            arr = np.asarray(arr, dtype=float)
            if arr.shape[0] != n:
                raise ValueError(f"{kind} field {name!r} has {arr.shape[0]} rows, expected {n}")
            if arr.ndim == 1:
                out.append(f"SCALARS {name} double 1\nLOOKUP_TABLE default")
                out.extend(f"{v:.16g}" for v in arr)
            else:
                if arr.shape[1] == 2:
                    arr = np.column_stack([arr, np.zeros(n)])
                if arr.shape[1] == 3:
                    out.append(f"VECTORS {name} double")
                else:
                    out.append(f"FIELD {name}_field 1\n{name} {arr.shape[1]} {n} double")
                out.extend(" ".join(f"{v:.16g}" for v in row) for row in arr)
        return out

    nn, ne, nen = mesh.n_nodes, mesh.n_elements, mesh.nodes_per_element
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID",
             f"POINTS {nn} double"]
    lines.extend(f"{x:.16g} {y:.16g} 0" for x, y in mesh.nodes)
    lines.append(f"CELLS {ne} {ne * (nen + 1)}")
    lines.extend(f"{nen} " + " ".join(map(str, row)) for row in mesh.elements)
    lines.append(f"CELL_TYPES {ne}")
    lines.extend([str(_VTK_CELL_TYPE[mesh.order])] * ne)
    if point_data:
        lines.append(f"POINT_DATA {nn}")
        lines.extend(_block("point", point_data, nn))
    if cell_data:
        lines.append(f"CELL_DATA {ne}")
        lines.extend(_block("cell", cell_data, ne))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
