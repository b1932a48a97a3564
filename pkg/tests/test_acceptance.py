"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

The heavier studies take minutes on one core; all of them run in the default
``pytest`` invocation.
"""

import math
import time

import numpy as np
import pytest

from fehmm import fem, macro, micro, postproc
from fehmm.bench import default_config
from fehmm.bench.studies import (_ratio_tag, run_estimator_validation, run_macro_convergence, run_micro_convergence,
                                 run_modeling_error, run_neumann_comparison, run_refinement_strategy)
from fehmm.material import homogeneous, matrix_inclusion, sine_wave, voigt_tensor
from fehmm.mesh import build_rect_mesh, build_tapered_mesh
from fehmm.micro import COUPLING_KINDS, CouplingSpec, MicroProblem

pytestmark = pytest.mark.acceptance


@pytest.fixture
def verdict(capsys):
    """Print one line per criterion (outside output capture) and fail on a miss."""

    def report(tag, ok, detail, seconds=None):
        t = "" if seconds is None else f" [{seconds:.1f} s]"
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {tag}: {detail}{t}")
        assert ok, f"{tag}: {detail}"

    return report


def _rel(a, b):
    return float(np.linalg.norm(np.asarray(a) - b) / np.linalg.norm(b))


def _local_rates(res, series, norm):
    return [r.rate for r in res.series(series, norm)]


# 1 ----------------------------------------------------------------------------------

def test_ac01_homogeneous_limit(verdict):
    t0 = time.perf_counter()
    E, nu = 40000.0, 0.2
    A = voigt_tensor(E, nu)
    worst_A, worst_u = 0.0, 0.0
    for q in (1, 2):
        P = MicroProblem(homogeneous(E, nu, epsilon=1.0 / 64), 1.0 / 64, 8, q)
        for kind in COUPLING_KINDS:
            c = CouplingSpec(kind)
            worst_A = max(worst_A, _rel(micro.micro_basis(P, c).A0, A))
            for builder in (macro.square_cantilever, macro.tapered_cantilever):
                sol = macro.assemble_and_solve(builder(6, q, micro=P, coupling=c))
                ref = macro.single_scale_solution(builder(6, q), A)
                worst_u = max(worst_u, _rel(sol.u, ref.u))
            micro.clear_basis_cache()
    dt = time.perf_counter() - t0
    verdict("AC1 homogeneous limit", worst_A <= 1e-10 and worst_u <= 1e-10 and dt < 10,
            f"max rel |A0 - C| = {worst_A:.2e}, max rel |u - u_single| = {worst_u:.2e}", dt)


# 2 ----------------------------------------------------------------------------------

def test_ac02_stiffness_hierarchy(verdict, rng):
    t0 = time.perf_counter()
    f = matrix_inclusion(1.0, e_matrix=40000.0, e_inclusion=2.0e6)
    P = MicroProblem(f, 1.0, 16)
    kinds = {"N": "neumann_semi_dirichlet", "P": "periodic_lagrange", "D": "dirichlet_lagrange"}
    A = {k: micro.micro_basis(P, CouplingSpec(v)).A0 for k, v in kinds.items()}
    slack = -1e-10 * np.linalg.norm(A["D"])
    eig_PN = np.linalg.eigvalsh(A["P"] - A["N"]).min()
    eig_DP = np.linalg.eigvalsh(A["D"] - A["P"]).min()
    # macro element quadratic forms: one distorted Q4 element, 2x2 Gauss points
    coords = np.array([[0.0, 0.0], [1.0, 0.1], [0.9, 1.0], [-0.1, 0.8]]) * 0.05
    geom = fem.element_geometry(build_tapered_mesh(1, 1, coords, 1))
    k = {}
    for key, kind in kinds.items():
        ops = [micro.solve_micro_unit_states(P, CouplingSpec(kind), coords, xi) for xi in fem.default_rule(1).points]
        k[key] = macro.macro_element_stiffness(coords, ops, geom.w[0])
    V = rng.standard_normal((8, 100))
    qN, qP, qD = (np.einsum("ik,ij,jk->k", V, k[s], V) for s in "NPD")
    tol = 1e-10 * np.abs(qD)
    forms_ok = bool(np.all(qP - qN >= -tol) and np.all(qD - qP >= -tol))
    micro.clear_basis_cache()
    dt = time.perf_counter() - t0
    ok = eig_PN >= slack and eig_DP >= slack and forms_ok and dt < 30
    verdict("AC2 stiffness hierarchy", ok,
            f"min eig(A_P - A_N) = {eig_PN:.3e}, min eig(A_D - A_P) = {eig_DP:.3e}, "
            f"element forms ordered on 100 vectors: {forms_ok}", dt)


# 3 ----------------------------------------------------------------------------------

def _micro_rates(q, scale="macroscale", **over):
    cfg = default_config("converge-micro").with_overrides(
        micro__order=q, macro__order=q, micro__levels="4, 8, 16, 32", micro__reference=128, macro__fixed_level=8,
        study__scale=scale, **over)
    return cfg, run_micro_convergence(cfg)


def test_ac03_micro_rates_on_macroscale(verdict):
    t0 = time.perf_counter()
    lines, ok = [], True
    for q in (1, 2):
        cfg, res = _micro_rates(q)
        for kind in cfg.micro.couplings:
            for norm in cfg.study.norms:
                r = res.rates[(kind, norm)]
                if q == 1:
                    good = abs(r - 2.0) <= 0.2
                else:
                    good = r >= (2.5 if kind.startswith("dirichlet") else 3.5)
                ok &= good
                lines.append(f"q{q} {kind.split('_')[0]} {norm} {r:.2f}")
    dt = time.perf_counter() - t0
    verdict("AC3 micro rates on macroscale", ok and dt < 600, "; ".join(lines), dt)


# 4 ----------------------------------------------------------------------------------

def test_ac04_micro_rates_on_microscale(verdict):
    t0 = time.perf_counter()
    cfg, res = _micro_rates(1, "microscale")
    lines, ok = [], True
    for kind in cfg.micro.couplings:
        for norm in cfg.study.norms:
            r = res.rates[(kind, norm)]
            ok &= abs(r - (2.0 if norm == "L2" else 1.0)) <= 0.2
            lines.append(f"{kind.split('_')[0]} {norm} {r:.2f}")
    dt = time.perf_counter() - t0
    verdict("AC4 micro rates on microscale", ok and dt < 300, "; ".join(lines), dt)


# 5 ----------------------------------------------------------------------------------

def test_ac05_singularity_limited_micro_rates(verdict):
    t0 = time.perf_counter()
    lines, ok = [], True
    for q in (1, 2):
        cfg, res = _micro_rates(q, micro__field="matrix_inclusion", micro__e_inclusion=2.0e6)
        for kind in cfg.micro.couplings:
            for norm in cfg.study.norms:
                r = res.rates[(kind, norm)]
                ok &= 1.1 <= r <= 1.7
                lines.append(f"q{q} {kind.split('_')[0]} {norm} {r:.2f}")
    dt = time.perf_counter() - t0
    verdict("AC5 singularity-limited micro rates", ok and dt < 600, "; ".join(lines), dt)


# 6 ----------------------------------------------------------------------------------

MACRO_REFERENCE = {1: 512, 2: 256}


def test_ac06_macro_rates_tapered(verdict):
    t0 = time.perf_counter()
    targets = {1: {"L2": (1.8, 2.2), "H1": (0.85, 1.15), "energy": (0.85, 1.15)},
               2: {"L2": (2.6, math.inf), "H1": (1.6, math.inf), "energy": (1.6, math.inf)}}
    lines, ok = [], True
    for p in (1, 2):
        cfg = default_config("converge-macro").with_overrides(
            macro__order=p, macro__levels="4, 8, 16, 32", macro__reference=MACRO_REFERENCE[p])
        res = run_macro_convergence(cfg)
        for norm, (lo, hi) in targets[p].items():
            r = res.rates[(cfg.micro.couplings[0], norm)]
            ok &= lo <= r <= hi
            lines.append(f"p{p} {norm} {r:.2f}")
    dt = time.perf_counter() - t0
    verdict("AC6 macro rates tapered cantilever", ok and dt < 900, "; ".join(lines), dt)


# 7 ----------------------------------------------------------------------------------

def test_ac07_macro_order_reduction_square(verdict):
    t0 = time.perf_counter()
    rates = {}
    for p in (1, 2):
        cfg = default_config("converge-macro").with_overrides(
            macro__problem="square_cantilever", macro__order=p, macro__levels="4, 8, 16, 32",
            macro__reference=128, study__norms="L2")
        res = run_macro_convergence(cfg)
        rates[p] = res.rates[(cfg.micro.couplings[0], "L2")]
    ok = rates[2] <= 2.0 and abs(rates[2] - rates[1]) <= 0.3
    dt = time.perf_counter() - t0
    verdict("AC7 square cantilever order reduction", ok, f"L2 rate p1 {rates[1]:.3f}, p2 {rates[2]:.3f}", dt)


# 8 ----------------------------------------------------------------------------------

def test_ac08_neumann_equivalence(verdict):
    t0 = time.perf_counter()
    res = run_neumann_comparison(default_config("neumann-compare"))
    rows = res.tables["norms"]
    levels = sorted({r["level"] for r in rows})
    worst_eq, worst_sweep, max_it, faster = 0.0, 0.0, 0, True
    for lv in levels:
        semi = next(r for r in rows if r["level"] == lv and r["technique"] == "semi_dirichlet")
        pert = next(r for r in rows if r["level"] == lv and r["technique"] == "perturbation")
        sweep = [r["l2_norm"] for r in rows if r["level"] == lv and r["technique"] == "perturbation_sweep"]
        worst_eq = max(worst_eq, abs(semi["l2_norm"] - pert["l2_norm"]) / semi["l2_norm"])
        same_digits = f"{semi['l2_norm']:.6g}" == f"{pert['l2_norm']:.6g}"
        worst_eq = worst_eq if same_digits else max(worst_eq, 1.0)
        worst_sweep = max(worst_sweep, (max(sweep) - min(sweep)) / semi["l2_norm"])
        max_it = max(max_it, semi["newton_iterations"])
    for t in res.tables["timing"]:
        faster &= t["perturbation_seconds"] < t["semi_dirichlet_seconds"]
    ok = worst_eq < 5e-7 and worst_sweep < 1e-6 and max_it <= 2 and faster
    dt = time.perf_counter() - t0
    verdict("AC8 Neumann technique equivalence", ok,
            f"max rel norm gap {worst_eq:.2e}, kappa sweep spread {worst_sweep:.2e}, "
            f"Newton iterations <= {max_it}, perturbation faster at every level: {faster}", dt)


# 9 ----------------------------------------------------------------------------------

def test_ac09_refinement_strategies(verdict):
    t0 = time.perf_counter()
    cfg = default_config("refine-study").with_overrides(study__norms="L2, H1")
    res = run_refinement_strategy(cfg)
    r_l2 = res.rates[("schedule_l2", "L2")]
    r_h1 = res.rates[("schedule_h1", "H1")]
    peel = {f"fixed{n}": _local_rates(res, f"fixed{n}", "L2")[-1] for n in cfg.refine.fixed_micro_levels}
    ok = abs(r_l2 - 2.0) <= 0.2 and abs(r_h1 - 1.0) <= 0.15 and all(v < 1.5 for v in peel.values())
    dt = time.perf_counter() - t0
    verdict("AC9 refinement strategies", ok,
            f"1:1 schedule L2 rate {r_l2:.3f}, sqrt schedule H1 rate {r_h1:.3f}, fixed-N last L2 rates "
            + ", ".join(f"{k} {v:.2f}" for k, v in peel.items()), dt)


# 10 ---------------------------------------------------------------------------------

def test_ac10_modeling_error(verdict):
    t0 = time.perf_counter()
    cfg = default_config("modeling-error")
    res = run_modeling_error(cfg)
    norm = "L2"
    plateau, finest = {}, {}
    for r in cfg.modeling.dirichlet_ratios:
        tag = f"dirichlet_lagrange_delta{_ratio_tag(r)}"
        plateau[r] = _local_rates(res, tag, norm)[-1]
        finest[r] = res.errors(tag, norm)[-1]
    ratios = sorted(finest)  # increasing delta/epsilon, i.e. decreasing epsilon/delta
    monotone = all(finest[a] > finest[b] for a, b in zip(ratios, ratios[1:]))
    p1 = res.errors("periodic_lagrange_delta1", norm)
    p2 = res.errors("periodic_lagrange_delta2", norm)
    agree = float(np.max(np.abs(p1 - p2) / p1))
    p_last = _local_rates(res, "periodic_lagrange_delta1", norm)[-1]
    ok = all(v < 0.3 for v in plateau.values()) and monotone and agree < 1e-6 and p_last > 1.0
    dt = time.perf_counter() - t0
    verdict("AC10 modeling error", ok,
            "Dirichlet last rates " + ", ".join(f"{r}: {v:.2f}" for r, v in plateau.items())
            + "; offsets " + " > ".join(f"{finest[r]:.3e}" for r in ratios)
            + f"; periodic delta 1 vs 2 gap {agree:.1e}, last rate {p_last:.2f}", dt)


# 11 ---------------------------------------------------------------------------------

def _bilinear(x):
    X, Y = x[..., 0], x[..., 1]
    return np.stack([3 + X - 2 * Y + 0.7 * X * Y, -1 + 0.5 * X * Y, 2 * Y], axis=-1)


def test_ac11_spr_estimator(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for order in (1, 2):
        for nx, ny in ((2, 2), (3, 2), (5, 4), (8, 8)):
            mesh = build_rect_mesh(nx, ny, 1.7, 1.1, order)
            pts = postproc.superconvergent_points(order)
            x = mesh.map_local(np.repeat(np.arange(mesh.n_elements), len(pts)), np.tile(pts, (mesh.n_elements, 1)))
            x = x.reshape(mesh.n_elements, len(pts), 2)
            nodal = postproc.spr_recover(mesh, _bilinear(x), x).nodal
            worst = max(worst, float(np.abs(nodal - _bilinear(mesh.nodes)).max() / np.abs(_bilinear(mesh.nodes)).max()))
    lines, ok = [], worst <= 1e-12
    for p in (1, 2):
        cfg = default_config("estimate-error").with_overrides(
            macro__order=p, macro__levels="4, 8, 16, 32", macro__reference=MACRO_REFERENCE[p])
        res = run_estimator_validation(cfg)
        rows = res.series(cfg.micro.couplings[0], "energy")
        theta = [r.theta for r in rows]
        dev = [abs(t - 1) for t in theta]
        ok &= all(0.8 <= t <= 1.2 for t in theta[-2:]) and all(a >= b for a, b in zip(dev, dev[1:]))
        lines.append(f"p{p} theta " + ", ".join(f"{t:.3f}" for t in theta))
    dt = time.perf_counter() - t0
    verdict("AC11 SPR estimator", ok, f"bilinear reproduction error {worst:.1e}; " + "; ".join(lines), dt)


# 12 ---------------------------------------------------------------------------------

def test_ac12_dof_accounting(verdict):
    t0 = time.perf_counter()
    mismatches = []
    f = sine_wave(1.0)
    for N in range(3, 33):
        P = MicroProblem(f, 1.0, N - 1)
        for kind in ("dirichlet", "periodic"):
            for method in ("direct", "lagrange"):
                size = micro.micro_basis(P, CouplingSpec(f"{kind}_{method}")).system
                if size.table_count != micro.dof_count(kind, method, N):
                    mismatches.append((N, kind, method, size.table_count, micro.dof_count(kind, method, N)))
        micro.clear_basis_cache()
    dt = time.perf_counter() - t0
    verdict("AC12 DOF accounting", not mismatches,
            f"{30 * 4} (N, coupling, method) cases, mismatches: {mismatches[:5]}", dt)


# 13 ---------------------------------------------------------------------------------

def test_ac13_direct_vs_lagrange(verdict):
    t0 = time.perf_counter()
    worst = {}
    for fname, f in (("matrix_inclusion", matrix_inclusion(1.0)), ("sine_wave", sine_wave(1.0))):
        for q in (1, 2):
            P = MicroProblem(f, 1.0, 8, q)
            for family in ("dirichlet", "periodic"):
                bl = micro.micro_basis(P, CouplingSpec(f"{family}_lagrange"))
                bd = micro.micro_basis(P, CouplingSpec(f"{family}_direct"))
                dl, dd = bl.D, bd.D
                if family == "periodic":
                    dl = micro.align_fluctuation_mean(P, dl, P.driving_fields)
                    dd = micro.align_fluctuation_mean(P, dd, P.driving_fields)
                key = f"{fname} q{q} {family}"
                worst[key] = max(_rel(dd, dl), _rel(bd.A0, bl.A0))
            micro.clear_basis_cache()
    dt = time.perf_counter() - t0
    m = max(worst.values())
    verdict("AC13 direct vs Lagrange", m <= 1e-10, f"max relative difference {m:.2e} over {len(worst)} cases", dt)


# 14 ---------------------------------------------------------------------------------

def test_ac14_hill_mandel_system(verdict):
    t0 = time.perf_counter()
    fields = {"sine_wave": sine_wave(1.0 / 64), "matrix_inclusion": matrix_inclusion(1.0 / 64, e_inclusion=2.0e6),
              "homogeneous": homogeneous(epsilon=1.0 / 64)}
    worst, cases = 0.0, 0
    for fname, f in fields.items():
        for order in (1, 2):
            P = MicroProblem(f, f.epsilon, 8, order)
            for kind in COUPLING_KINDS:
                for builder in (macro.square_cantilever, macro.tapered_cantilever):
                    sol = macro.assemble_and_solve(builder(8, order, micro=P, coupling=CouplingSpec(kind)))
                    worst = max(worst, abs(macro.micro_energy_sum(sol) - sol.energy()) / sol.energy())
                    cases += 1
            micro.clear_basis_cache()
    dt = time.perf_counter() - t0
    verdict("AC14 Hill-Mandel system identity", worst <= 1e-10, f"max relative gap {worst:.2e} over {cases} problems", dt)
