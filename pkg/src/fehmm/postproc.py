"""Error measurement against reference solutions, patch recovery and the recovery-based estimator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import fem
from .mesh import StructuredQuadMesh, locate_points

log = logging.getLogger(__name__)

NORMS = ("L2", "H1", "energy")
CSV_COLUMNS = ("level", "H", "h", "N_mac", "N_mic", "norm", "true_error", "est_error", "theta", "rate")


# ---------------------------------------------------------------- projection

@dataclass(frozen=True)
class PointField:
    """Displacement values and gradients of a nodal field at arbitrary points."""

    u: np.ndarray  # (..., 2)
    grad: np.ndarray  # (..., 2, 2)

    @property
    def strain(self) -> np.ndarray:
        g = self.grad
        return np.stack([g[..., 0, 0], g[..., 1, 1], g[..., 0, 1] + g[..., 1, 0]], axis=-1)


def evaluate_field(mesh: StructuredQuadMesh, d: np.ndarray, x: np.ndarray, tol: float = 1e-10) -> PointField:
    """Interpolate nodal field ``d`` (and its gradient) at points ``x`` of shape (..., 2)."""
    x = np.asarray(x, dtype=float)
    shape = x.shape[:-1]
    pts = x.reshape(-1, 2)
    try:
        els, xi = locate_points(mesh, pts, tol)
    except ValueError as exc:
        span = (mesh.nodes.min(axis=0).tolist(), mesh.nodes.max(axis=0).tolist())
        raise ValueError(f"projection point outside the coarse mesh (bounding box {span}): {exc}") from exc
    N, dN = fem.shape_functions(mesh.order, xi)  # (np, nen), (np, nen, 2)
    X = mesh.nodes[mesh.elements[els]]  # (np, nen, 2)
    J = np.einsum("pak,pad->pdk", dN, X)
    Jinv = np.linalg.inv(J)
    dNdx = np.einsum("pak,pkd->pad", dN, Jinv)
    U = np.asarray(d, dtype=float).reshape(-1, 2)[mesh.elements[els]]
    u = np.einsum("pa,pai->pi", N, U)
    g = np.einsum("paj,pai->pij", dNdx, U)
    return PointField(u.reshape(shape + (2,)), g.reshape(shape + (2, 2)))


def project_to_reference(coarse_mesh: StructuredQuadMesh, d: np.ndarray, ref_mesh: StructuredQuadMesh,
                         rule: fem.QuadratureRule | None = None) -> tuple[PointField, fem.ElementGeometry]:
    """Coarse field at the quadrature points of the reference mesh."""
    rule = rule or fem.default_rule(ref_mesh.order)
    geom = fem.element_geometry(ref_mesh, rule)
    if _same_mesh(coarse_mesh, ref_mesh):
        f = fem.evaluate_at_qp(ref_mesh, d, geom=geom)
        return PointField(f.u, f.grad), geom
    if not np.allclose(coarse_mesh.corners, ref_mesh.corners, rtol=0,
                       atol=1e-12 * np.abs(ref_mesh.corners).max()):
        raise ValueError("coarse and reference meshes cover different domains")
    return evaluate_field(coarse_mesh, d, geom.x), geom


def _same_mesh(a: StructuredQuadMesh, b: StructuredQuadMesh) -> bool:
    return a is b or (
        a.order == b.order and a.nx == b.nx and a.ny == b.ny and np.array_equal(a.nodes, b.nodes)
    )


def _tensor_at(material, x):
    return fem.material_at(material, x)


@dataclass(frozen=True)
class FieldErrors:
    L2: float
    H1: float
    energy: float
    ref_L2: float
    ref_H1: float
    ref_energy: float

    def absolute(self, norm: str) -> float:
        return getattr(self, norm)

    def relative(self, norm: str) -> float:
        ref = getattr(self, "ref_" + norm)
        return getattr(self, norm) / ref if ref > 0 else math.nan


def compare_fields(coarse_mesh, d_coarse, ref_mesh, d_ref, material_coarse, material_ref=None,
                   rule: fem.QuadratureRule | None = None) -> FieldErrors:
    """L2, H1 and energy differences on the reference quadrature.

    The energy integrand is ``(s_ref - s_c) : (e_ref - e_c)`` with each stress from its own tensor.
    When the tensors differ that product is indefinite, so ``(s_ref - s_c) : A_ref^-1 (s_ref - s_c)``
    is used instead; both coincide for equal tensors.
    """
    material_ref = material_coarse if material_ref is None else material_ref
    pc, geom = project_to_reference(coarse_mesh, d_coarse, ref_mesh, rule)
    fr = fem.evaluate_at_qp(ref_mesh, d_ref, geom=geom)
    w = geom.w
    du = fr.u - pc.u
    dg = fr.grad - pc.grad
    er, ec = fr.strain, pc.strain
    Ar = _tensor_at(material_ref, geom.x)
    Ac = Ar if material_coarse is material_ref else _tensor_at(material_coarse, geom.x)
    sr = np.einsum("eqij,eqj->eqi", Ar, er)
    sc = np.einsum("eqij,eqj->eqi", Ac, ec)
    l2 = float(np.sum(w * np.sum(du ** 2, -1)))
    g2 = float(np.sum(w * np.sum(dg ** 2, (-1, -2))))
    if Ac is Ar or np.array_equal(Ac, Ar):
        en = float(np.sum(w * np.sum((sr - sc) * (er - ec), -1)))
    else:
        # complementary form: equals the line above for equal tensors and stays definite otherwise
        ds = sr - sc
        en = float(np.sum(w * np.sum(ds * np.linalg.solve(Ar, ds[..., None])[..., 0], -1)))
    rl2 = float(np.sum(w * np.sum(fr.u ** 2, -1)))
    rg2 = float(np.sum(w * np.sum(fr.grad ** 2, (-1, -2))))
    ren = float(np.sum(w * np.sum(sr * er, -1)))
    return FieldErrors(math.sqrt(l2), math.sqrt(l2 + g2), math.sqrt(max(en, 0.0)),
                       math.sqrt(rl2), math.sqrt(rl2 + rg2), math.sqrt(max(ren, 0.0)))


def error_norms(coarse, reference, rule: fem.QuadratureRule | None = None) -> FieldErrors:
    """Errors of macro solution ``coarse`` against ``reference`` (both carry their A0)."""
    return compare_fields(coarse.mesh, coarse.u, reference.mesh, reference.u, coarse.A0, reference.A0, rule)


# ----------------------------------------------------------------------- SPR

@dataclass(frozen=True)
class SPRResult:
    nodal: np.ndarray  # (n_nodes, ncomp)
    degenerate_patches: int = 0


def superconvergent_points(order: int) -> np.ndarray:
    """Sampling sites in local coordinates: centre for Q4, 2x2 Gauss points for Q9."""
    if order == 1:
        return np.zeros((1, 2))
    return fem.gauss_rule(2).points.copy()


def _patch_fit(xs, vals, x_eval, scale):
    """Least-squares fit of span{1, x, y, xy}; returns values at x_eval and a degeneracy flag."""
    c = xs.mean(axis=0)
    y = (xs - c) / scale
    P = np.column_stack([np.ones(len(y)), y[:, 0], y[:, 1], y[:, 0] * y[:, 1]])
    A = P.T @ P
    ye = (x_eval - c) / scale
    Pe = np.column_stack([np.ones(len(ye)), ye[:, 0], ye[:, 1], ye[:, 0] * ye[:, 1]])
    if np.linalg.cond(A) > 1e12:
        return np.broadcast_to(vals.mean(axis=0), (len(ye), vals.shape[1])).copy(), True
    a = np.linalg.solve(A, P.T @ vals)
    return Pe @ a, False


def spr_recover(mesh: StructuredQuadMesh, samples: np.ndarray, sample_x: np.ndarray | None = None) -> SPRResult:
    """Nodal recovery from element samples at the superconvergent sites.

    ``samples``: (ne, ns, ncomp) with ns = 1 (Q4) or 4 (Q9).  Q4 patches are the
    four elements around an interior vertex; boundary nodes borrow the patch of
    the nearest interior vertex and receive the mean of all patches covering them.
    Q9 sites form a tensor grid; every node is fitted from the square of four
    sites around it (nearest interior square for boundary nodes).
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 2:
        samples = samples[:, None, :]
    if sample_x is None:
        sample_x = mesh.map_local(np.repeat(np.arange(mesh.n_elements), samples.shape[1]),
                                  np.tile(superconvergent_points(mesh.order), (mesh.n_elements, 1)))
        sample_x = sample_x.reshape(mesh.n_elements, samples.shape[1], 2)
    nx, ny, o = mesh.nx, mesh.ny, mesh.order
    ncomp = samples.shape[2]
    out = np.zeros((mesh.n_nodes, ncomp))
    hits = np.zeros(mesh.n_nodes)
    degenerate = 0
    scale = max(np.ptp(mesh.nodes[:, 0]), 1e-300) / max(nx, ny)

    if nx < 2 or ny < 2:
        # no interior vertex: one patch per element
        for e in range(mesh.n_elements):
            nodes = mesh.elements[e]
            v, bad = _patch_fit(sample_x[e], samples[e], mesh.nodes[nodes], scale)
            degenerate += bad
            out[nodes] += v
            hits[nodes] += 1
        return SPRResult(out / hits[:, None], degenerate)

    if o == 2:
        pts = superconvergent_points(2)
        a = (pts[:, 0] > 0).astype(int)
        b = (pts[:, 1] > 0).astype(int)
        j, i = np.divmod(np.arange(mesh.n_elements), nx)
        S = np.zeros((2 * ny, 2 * nx, ncomp))
        X = np.zeros((2 * ny, 2 * nx, 2))
        S[2 * j[:, None] + b, 2 * i[:, None] + a] = samples
        X[2 * j[:, None] + b, 2 * i[:, None] + a] = sample_x
        gx = mesh.gx
        for gj in range(2 * ny + 1):
            cj = min(max(gj - 1, 0), 2 * ny - 2)
            for gi in range(2 * nx + 1):
                ci = min(max(gi - 1, 0), 2 * nx - 2)
                n = gj * gx + gi
                v, bad = _patch_fit(X[cj:cj + 2, ci:ci + 2].reshape(-1, 2), S[cj:cj + 2, ci:ci + 2].reshape(-1, ncomp),
                                    mesh.nodes[n:n + 1], scale)
                degenerate += bad
                out[n] = v[0]
        if degenerate:
            log.warning("SPR: %d degenerate patch(es) replaced by the patch mean", degenerate)
        return SPRResult(out, degenerate)

    gx = mesh.gx
    for j in range(1, ny):
        for i in range(1, nx):
            els = np.array([(j - 1) * nx + i - 1, (j - 1) * nx + i, j * nx + i - 1, j * nx + i])
            xs = sample_x[els].reshape(-1, 2)
            vs = samples[els].reshape(-1, ncomp)
            a = np.arange(i - (i == 1), i + 1 + (i == nx - 1))
            b = np.arange(j - (j == 1), j + 1 + (j == ny - 1))
            A, B = np.meshgrid(a, b, indexing="xy")
            targets = (B * gx + A).ravel()
            v, bad = _patch_fit(xs, vs, mesh.nodes[targets], scale)
            degenerate += bad
            out[targets] += v
            hits[targets] += 1
    if degenerate:
        log.warning("SPR: %d degenerate patch(es) replaced by the patch mean", degenerate)
    return SPRResult(out / hits[:, None], degenerate)


def element_samples(solution, order_sites: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Macro strains, stresses and their locations at the superconvergent sites."""
    mesh = solution.mesh
    pts = superconvergent_points(mesh.order)
    rule = fem.QuadratureRule(pts, np.ones(len(pts)), 1)
    geom = fem.element_geometry(mesh, rule)
    ue = solution.u[fem.element_dofs(mesh.elements)]
    eps = np.einsum("eqip,ep->eqi", geom.B, ue)
    sig = eps @ np.asarray(solution.A0).T
    return eps, sig, geom.x


@dataclass(frozen=True)
class Recovery:
    strain: np.ndarray  # nodal (n_nodes, 3)
    stress: np.ndarray
    degenerate_patches: int


def recover(solution) -> Recovery:
    eps, sig, x = element_samples(solution)
    re = spr_recover(solution.mesh, eps, x)
    rs = spr_recover(solution.mesh, sig, x)
    return Recovery(re.nodal, rs.nodal, re.degenerate_patches + rs.degenerate_patches)


def _nodal_at_qp(mesh, nodal, geom):
    return np.einsum("qa,eac->eqc", geom.N, nodal[mesh.elements])


@dataclass(frozen=True)
class Estimate:
    total: float
    per_element: np.ndarray  # squared element contributions
    relative_per_element: np.ndarray
    recovery: Recovery


def estimate_error_energy(solution, rule: fem.QuadratureRule | None = None) -> Estimate:
    """Recovery-based energy-norm error estimate on the solution's own mesh."""
    mesh = solution.mesh
    rec = recover(solution)
    geom = fem.element_geometry(mesh, rule)
    ue = solution.u[fem.element_dofs(mesh.elements)]
    eps_h = np.einsum("eqip,ep->eqi", geom.B, ue)
    sig_h = eps_h @ np.asarray(solution.A0).T
    es = _nodal_at_qp(mesh, rec.strain, geom)
    ss = _nodal_at_qp(mesh, rec.stress, geom)
    per = np.sum(geom.w * np.sum((ss - sig_h) * (es - eps_h), -1), axis=1)
    energy = np.sum(geom.w * np.sum(sig_h * eps_h, -1))
    total = math.sqrt(max(per.sum(), 0.0))
    rel = per / (energy / mesh.n_elements) if energy > 0 else np.zeros_like(per)
    return Estimate(total, per, rel, rec)


def relative_element_errors(mesh: StructuredQuadMesh, d_coarse, A_coarse, ref_mesh, d_ref, A_ref) -> np.ndarray:
    """Element-wise squared energy error of the coarse field over the average energy per coarse element."""
    pc, geom = project_to_reference(mesh, d_coarse, ref_mesh)
    fr = fem.evaluate_at_qp(ref_mesh, d_ref, geom=geom)
    er, ec = fr.strain, pc.strain
    sr = er @ np.asarray(A_ref).T
    sc = ec @ np.asarray(A_coarse).T
    dens = np.sum(geom.w * np.sum((sr - sc) * (er - ec), -1), axis=1)
    owner, _ = locate_points(mesh, ref_mesh.element_centers())
    per = np.bincount(owner, weights=dens, minlength=mesh.n_elements)
    energy = np.sum(geom.w * np.sum(sr * er, -1))
    return per / (energy / mesh.n_elements)


@dataclass(frozen=True)
class EffectivityReport:
    theta: float
    lower: float
    upper: float
    recovery_gap: float  # ||u* - u_ref||_A / ||u_ref - u_H||_A
    theta_on_reference: float


def effectivity(estimated: float, true: float) -> float:
    if not true > 0:
        raise ValueError("true error must be positive")
    return estimated / true


def effectivity_with_bounds(solution, reference, estimate: Estimate | None = None) -> EffectivityReport:
    """Effectivity and the bounds ``1 -/+ ||u* - u_ref|| / ||u_ref - u_H||`` on the reference quadrature."""
    estimate = estimate or estimate_error_energy(solution)
    mesh = solution.mesh
    pc, geom = project_to_reference(mesh, solution.u, reference.mesh)
    fr = fem.evaluate_at_qp(reference.mesh, reference.u, geom=geom)
    er = fr.strain
    sr = er @ np.asarray(reference.A0).T
    ec = pc.strain
    sc = ec @ np.asarray(solution.A0).T
    ps = evaluate_nodal(mesh, estimate.recovery.strain, geom.x)
    pss = evaluate_nodal(mesh, estimate.recovery.stress, geom.x)
    w = geom.w
    e_true = math.sqrt(max(np.sum(w * np.sum((sr - sc) * (er - ec), -1)), 0.0))
    e_star = math.sqrt(max(np.sum(w * np.sum((pss - sr) * (ps - er), -1)), 0.0))
    e_est_ref = math.sqrt(max(np.sum(w * np.sum((pss - sc) * (ps - ec), -1)), 0.0))
    gap = e_star / e_true
    return EffectivityReport(estimate.total / e_true, 1 - gap, 1 + gap, gap, e_est_ref / e_true)


def evaluate_nodal(mesh: StructuredQuadMesh, nodal: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Interpolate nodal quantities (n_nodes, ncomp) at points x (..., 2)."""
    x = np.asarray(x, dtype=float)
    els, xi = locate_points(mesh, x.reshape(-1, 2))
    N, _ = fem.shape_functions(mesh.order, xi)
    v = np.einsum("pa,pac->pc", N, nodal[mesh.elements[els]])
    return v.reshape(x.shape[:-1] + (nodal.shape[1],))


# -------------------------------------------------------------------- rates

def convergence_rate(sizes, errors, window: int | None = 3) -> float:
    """Least-squares slope of log(error) against log(size) over the ``window`` finest levels."""
    s = np.asarray(sizes, dtype=float)
    e = np.asarray(errors, dtype=float)
    if s.size != e.size or s.size < 2:
        raise ValueError("need at least two (size, error) samples")
    order = np.argsort(s)
    s, e = s[order], e[order]
    if window:
        s, e = s[:window], e[:window]
    if np.any(s <= 0) or np.any(e <= 0):
        raise ValueError("sizes and errors must be positive")
    return float(np.polyfit(np.log(s), np.log(e), 1)[0])


def decompose_errors(e_tot, e_mac):
    """Micro part ``e_tot - e_mac``, floored at zero (with a logged diagnostic)."""
    e_tot = np.asarray(e_tot, dtype=float)
    e_mac = np.asarray(e_mac, dtype=float)
    diff = e_tot - e_mac
    if np.any(diff < 0):
        log.warning("micro error floored at 0 at %d level(s): min difference %.3e",
                    int(np.sum(diff < 0)), float(diff.min()))
    out = np.maximum(diff, 0.0)
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------- CSV

@dataclass
class ErrorRow:
    level: int
    H: float
    h: float
    N_mac: int
    N_mic: int
    norm: str
    true_error: float
    est_error: float = math.nan
    theta: float = math.nan
    rate: float = math.nan
    extra: dict = field(default_factory=dict)

    def values(self):
        return [self.level, self.H, self.h, self.N_mac, self.N_mic, self.norm, self.true_error,
                self.est_error, self.theta, self.rate]


def _fmt(v):
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows: list[ErrorRow], extra_columns: tuple = ()) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(CSV_COLUMNS) + list(extra_columns))
        for r in rows:
            w.writerow([_fmt(v) for v in r.values()] + [_fmt(r.extra.get(c, "")) for c in extra_columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
