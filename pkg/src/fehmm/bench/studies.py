"""Convergence, estimator and comparison studies driven by a StudyConfig."""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .. import macro, material, micro, postproc
from ..mesh import tapered_cantilever_corners
from ..micro import CouplingSpec, MicroProblem
from ..postproc import ErrorRow
from .config import ConfigError, StudyConfig

log = logging.getLogger(__name__)

EXTRA_COLUMNS = ("series", "relative_error", "config_hash")


@dataclass
class StudyResult:
    name: str
    config: StudyConfig
    rows: list[ErrorRow] = field(default_factory=list)
    rates: dict = field(default_factory=dict)  # (series, norm) -> fitted slope
    tables: dict = field(default_factory=dict)  # name -> list of dicts, written as-is
    info: dict = field(default_factory=dict)

    def series(self, series: str, norm: str) -> list[ErrorRow]:
        return [r for r in self.rows if r.extra["series"] == series and r.norm == norm]

    def errors(self, series: str, norm: str) -> np.ndarray:
        return np.array([r.true_error for r in self.series(series, norm)])

    def write(self, out_dir=None) -> list[str]:
        out_dir = out_dir or self.config.output.dir
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        cfg_path = os.path.join(out_dir, f"{self.name}.config")
        with open(cfg_path, "w") as fh:
            fh.write(f"# config hash {self.config.hash}\n")
            fh.write(self.config.to_text())
        paths.append(cfg_path)
        keys = sorted({(r.extra["series"], r.norm) for r in self.rows})
        for s, n in keys:
            path = os.path.join(out_dir, f"{self.name}_{s}_{n}.csv")
            rows = sorted(self.series(s, n), key=lambda r: r.level)
            extra = EXTRA_COLUMNS + tuple(sorted(set().union(*(r.extra for r in rows)) - set(EXTRA_COLUMNS)))
            postproc.write_csv(path, rows, extra)
            paths.append(path)
        for tname, table in sorted(self.tables.items()):
            if not table:
                continue
            path = os.path.join(out_dir, f"{self.name}_{tname}.csv")
            cols = list(table[0].keys())
            with open(path, "w") as fh:
                fh.write(",".join(cols + ["config_hash"]) + "\n")
                for row in table:
                    fh.write(",".join(postproc._fmt(row[c]) for c in cols) + f",{self.config.hash}\n")
            paths.append(path)
        return paths


# ------------------------------------------------------------- builders

def make_field(cfg: StudyConfig) -> material.MicrostructureField:
    m = cfg.micro
    return material.MicrostructureField(m.field, m.epsilon, e_matrix=m.e_matrix, e_inclusion=m.e_inclusion,
                                        nu=m.nu, inclusion_ratio=m.inclusion_ratio, tiles=m.tiles,
                                        e_min=m.e_min, e_max=m.e_max, cell_variant=m.cell_variant)


def make_micro(cfg: StudyConfig, n: int, ratio: Fraction | None = None) -> MicroProblem:
    ratio = cfg.micro.delta_over_epsilon if ratio is None else ratio
    return MicroProblem(make_field(cfg), float(ratio) * cfg.micro.epsilon, n, cfg.micro.order)


def make_coupling(cfg: StudyConfig, kind: str, kappa: float | None = None) -> CouplingSpec:
    if kind == "neumann_perturbation":
        return CouplingSpec(kind, perturbation_kappa=kappa or cfg.micro.kappa_max, seed=cfg.study.seed)
    return CouplingSpec(kind)


def make_macro(cfg: StudyConfig, n: int, order: int | None = None, **kw) -> macro.MacroProblem:
    m = cfg.macro
    order = order or m.order
    line = None if m.line_load is None else ("right", (0.0, m.line_load))
    kw = dict(volume_load=tuple(m.volume_load), line_load=line, **kw)
    if m.problem == "square_cantilever":
        return macro.square_cantilever(n, order, m.size, **kw)
    corners = tapered_cantilever_corners(m.length, m.clamped_height, m.alpha_deg)
    return macro.tapered_cantilever(n, order, corners, **kw)


def basis_A0(cfg: StudyConfig, n: int, kind: str, ratio: Fraction | None = None) -> np.ndarray:
    A0 = micro.micro_basis(make_micro(cfg, n, ratio), make_coupling(cfg, kind)).A0
    micro.clear_basis_cache()
    return A0


def two_scale(cfg: StudyConfig, n_mac: int, n_mic: int, kind: str, ratio: Fraction | None = None,
              order: int | None = None) -> macro.MacroSolution:
    P = make_macro(cfg, n_mac, order, micro=make_micro(cfg, n_mic, ratio), coupling=make_coupling(cfg, kind))
    return macro.assemble_and_solve(P)


def single_scale(cfg: StudyConfig, n_mac: int, A0, order: int | None = None) -> macro.MacroSolution:
    return macro.single_scale_solution(make_macro(cfg, n_mac, order), A0)


def reference_solution(cfg: StudyConfig, A0) -> macro.MacroSolution:
    """Fine single-scale solve at ``macro.reference``, optionally of another element order."""
    return single_scale(cfg, cfg.macro.reference, A0, cfg.macro.reference_order or None)


def _add_series(result: StudyResult, series: str, sizes, levels, errors: dict, extra: dict | None = None) -> None:
    """Append rows for one curve.

    ``errors[norm]`` lists (absolute, relative) pairs per level; ``extra[norm]`` optionally lists
    per-level dicts whose ``est_error`` / ``theta`` fill those columns, the rest become extra columns.
    """
    cfg = result.config
    for norm in cfg.study.norms:
        if norm not in errors:
            continue
        vals = [e[0] for e in errors[norm]]
        for i, (lv, (abs_e, rel_e)) in enumerate(zip(levels, errors[norm])):
            local = math.nan
            if i > 0 and vals[i] > 0 and vals[i - 1] > 0:
                local = math.log(vals[i - 1] / vals[i]) / math.log(sizes[i - 1] / sizes[i])
            more = dict((extra or {}).get(norm, [{}] * len(levels))[i])
            row = ErrorRow(i, lv["H"], lv["h"], lv["N_mac"], lv["N_mic"], norm, abs_e,
                           est_error=more.pop("est_error", math.nan), theta=more.pop("theta", math.nan),
                           rate=local, extra={"series": series, "relative_error": rel_e, "config_hash": cfg.hash,
                                              **more})
            result.rows.append(row)
        if len(vals) >= 2 and all(v > 0 for v in vals):
            result.rates[(series, norm)] = postproc.convergence_rate(sizes, vals, cfg.study.rate_window)
        else:
            result.rates[(series, norm)] = math.nan


def _errors(fe: postproc.FieldErrors, norms) -> dict:
    return {n: (fe.absolute(n), fe.relative(n)) for n in norms}


def _collect(per_level: list[dict]) -> dict:
    return {n: [d[n] for d in per_level] for n in per_level[0]} if per_level else {}


def _level(cfg, n_mac, n_mic, delta=None):
    delta = float(cfg.micro.delta_over_epsilon) * cfg.micro.epsilon if delta is None else delta
    return {"H": 1.0 / n_mac, "h": delta / n_mic, "N_mac": n_mac, "N_mic": n_mic}


# --------------------------------------------------------------- studies

def run_micro_convergence(config: StudyConfig, scale: str | None = None) -> StudyResult:
    """Micro refinement at a fixed macro mesh, measured on the macro or on one micro domain."""
    cfg = config
    scale = scale or cfg.study.scale
    if scale not in ("macroscale", "microscale"):
        raise ConfigError(f"unknown scale {scale!r}")
    res = StudyResult(f"converge-micro-{scale}", cfg, info={"scale": scale})
    n_mac = cfg.macro.fixed_level
    levels = cfg.micro.levels
    sizes = [1.0 / n for n in levels]
    for kind in cfg.micro.couplings:
        t0 = time.perf_counter()
        if scale == "macroscale":
            ref = two_scale(cfg, n_mac, cfg.micro.reference, kind)
            micro.clear_basis_cache()
            errs = []
            for n in levels:
                sol = two_scale(cfg, n_mac, n, kind)
                micro.clear_basis_cache()
                errs.append(_errors(postproc.error_norms(sol, ref), cfg.study.norms))
        else:
            errs = _microscale_errors(cfg, kind, n_mac)
        _add_series(res, kind, sizes, [_level(cfg, n_mac, n) for n in levels], _collect(errs))
        res.info.setdefault("seconds", {})[kind] = time.perf_counter() - t0
    return res


def _microscale_errors(cfg: StudyConfig, kind: str, n_mac: int) -> list[dict]:
    """Micro fields at the macro point nearest ``macro.qp_point``, macro solution frozen."""
    coupling = make_coupling(cfg, kind)
    sol = two_scale(cfg, n_mac, cfg.micro.reference, kind)
    micro.clear_basis_cache()
    e, q, _ = macro.nearest_qp(sol, cfg.macro.qp_point)
    u, grad = macro.macro_state_at(sol, e, q)
    c = np.concatenate([u, grad.ravel()])
    rot = 0.5 * (grad[1, 0] - grad[0, 1])

    def field_at(n):
        P = make_micro(cfg, n)
        d = micro.solve_coupled(P, coupling, P.driving_fields @ c).d
        if not coupling.rigid_embedded:
            d = gauge_like_semi_dirichlet(P, d, P.driving_fields @ c)
        return P, d

    Pr, dr = field_at(cfg.micro.reference)
    out = []
    for n in cfg.micro.levels:
        P, d = field_at(n)
        fe = postproc.compare_fields(P.rve_mesh, d, Pr.rve_mesh, dr, P, Pr)
        out.append(_errors(fe, cfg.study.norms))
    return out


def gauge_like_semi_dirichlet(problem: MicroProblem, d: np.ndarray, d_lin: np.ndarray) -> np.ndarray:
    """Add the rigid motion that matches the driving field's mean rotation and its value at the lower-left node."""
    d = micro.enrich_rigid_body(problem, d, rotation=float(micro.average_rotation(problem, d_lin - d)))
    a = micro.resolve_node(problem, "lower_left")
    return micro.enrich_rigid_body(problem, d, translation=d_lin[2 * a:2 * a + 2] - d[2 * a:2 * a + 2])


def run_macro_convergence(config: StudyConfig) -> StudyResult:
    """Macro refinement at fixed micro mesh; reference is the fine single-scale solve with the same A0."""
    cfg = config
    res = StudyResult("converge-macro", cfg)
    levels = cfg.macro.levels
    sizes = [1.0 / n for n in levels]
    n_mic = cfg.micro.fixed_level
    for kind in cfg.micro.couplings:
        A0 = basis_A0(cfg, n_mic, kind)
        ref = reference_solution(cfg, A0)
        errs, extra = [], {"energy": []}
        for n in levels:
            sol = two_scale(cfg, n, n_mic, kind)
            errs.append(_errors(postproc.error_norms(sol, ref), cfg.study.norms))
            est = postproc.estimate_error_energy(sol)
            e_true = errs[-1].get("energy", (math.nan,))[0]
            theta = est.total / e_true if e_true > 0 else math.nan
            extra["energy"].append({"est_error": est.total, "theta": theta})
        micro.clear_basis_cache()
        _add_series(res, kind, sizes, [_level(cfg, n, n_mic) for n in levels], _collect(errs), extra)
    return res


def run_estimator_validation(config: StudyConfig) -> StudyResult:
    """Estimated vs computed energy error per level, with the two-sided effectivity bounds."""
    cfg = config
    res = StudyResult("estimate-error", cfg)
    levels = cfg.macro.levels
    sizes = [1.0 / n for n in levels]
    n_mic = cfg.micro.fixed_level
    timing = []
    for kind in cfg.micro.couplings:
        A0 = basis_A0(cfg, n_mic, kind)
        t0 = time.perf_counter()
        ref = reference_solution(cfg, A0)
        t_ref = time.perf_counter() - t0
        errs, extra = [], {"energy": []}
        for n in levels:
            sol = two_scale(cfg, n, n_mic, kind)
            t0 = time.perf_counter()
            est = postproc.estimate_error_energy(sol)
            t_est = time.perf_counter() - t0
            t0 = time.perf_counter()
            fe = postproc.error_norms(sol, ref)
            t_err = time.perf_counter() - t0
            rep = postproc.effectivity_with_bounds(sol, ref, est)
            errs.append({"energy": (fe.energy, fe.relative("energy"))})
            extra["energy"].append({"est_error": est.total, "theta": rep.theta, "theta_lower": rep.lower,
                                    "theta_upper": rep.upper, "recovery_gap": rep.recovery_gap})
            timing.append({"series": kind, "N_mac": n, "estimator_seconds": t_est,
                           "reference_seconds": t_ref + t_err})
        micro.clear_basis_cache()
        _add_series(res, kind, sizes, [_level(cfg, n, n_mic) for n in levels], _collect(errs), extra)
    res.tables["timing"] = timing
    return res


def schedule_level(n_mac: int, exponent: float) -> int:
    """Power of two at or above ``n_mac ** exponent``."""
    return 2 ** max(0, math.ceil(math.log2(n_mac) * exponent - 1e-9))


def run_refinement_strategy(config: StudyConfig) -> StudyResult:
    """Fixed-micro curves against the coupled schedules, all measured against u(H -> 0, h -> 0)."""
    cfg = config
    res = StudyResult("refine-study", cfg)
    kind = cfg.micro.couplings[0]
    p, q = cfg.macro.order, cfg.micro.order
    levels = cfg.macro.levels
    sizes = [1.0 / n for n in levels]
    ref = reference_solution(cfg, basis_A0(cfg, cfg.micro.reference, kind))
    A0_cache = {}

    def A0_at(n_mic):
        if n_mic >= cfg.micro.reference:
            raise ConfigError(f"schedule needs micro level {n_mic}, not below micro.reference")
        if n_mic not in A0_cache:
            A0_cache[n_mic] = basis_A0(cfg, n_mic, kind)
        return A0_cache[n_mic]

    curves = {f"fixed{n}": [n] * len(levels) for n in cfg.refine.fixed_micro_levels}
    expo = {"l2": (p + 1) / (2 * q), "h1": p / (2 * q)}
    for s in cfg.refine.schedules:
        if s not in expo:
            raise ConfigError(f"unknown schedule {s!r}; expected l2 or h1")
        curves[f"schedule_{s}"] = [schedule_level(n, expo[s]) for n in levels]
    for name, mics in curves.items():
        errs = []
        for n, m in zip(levels, mics):
            # uniform A0 per micro level: the two-scale solve equals the single-scale one with that tensor
            sol = single_scale(cfg, n, A0_at(m))
            errs.append(_errors(postproc.error_norms(sol, ref), cfg.study.norms))
        _add_series(res, name, sizes, [_level(cfg, n, m) for n, m in zip(levels, mics)], _collect(errs))
    return res


def run_neumann_comparison(config: StudyConfig) -> StudyResult:
    """Semi-Dirichlet vs perturbation: solution norms per level, perturbation sweep, Newton counts, timings."""
    cfg = config
    res = StudyResult("neumann-compare", cfg)
    semi = CouplingSpec("neumann_semi_dirichlet")
    # macro state driving the RVEs: a strain with rotation taken from a coarse two-scale solve
    sol = two_scale(cfg, cfg.macro.fixed_level, cfg.micro.fixed_level, "neumann_perturbation")
    micro.clear_basis_cache()
    e, q, _ = macro.nearest_qp(sol, cfg.macro.qp_point)
    u, grad = macro.macro_state_at(sol, e, q)
    c = np.concatenate([u, grad.ravel()])
    table, timing = [], []
    for lv, n in enumerate(cfg.micro.levels):
        P = make_micro(cfg, n)
        _ = P.K
        d_lin = P.driving_fields @ c

        def timed(fn):
            best, out = math.inf, None
            for _ in range(max(1, cfg.neumann.repeats)):
                t0 = time.perf_counter()
                out = fn()
                best = min(best, time.perf_counter() - t0)
            return out, best

        s_sol, t_semi = timed(lambda: micro.solve_coupled(P, semi, d_lin))
        p_sol, t_pert = timed(lambda: micro.solve_coupled(P, make_coupling(cfg, "neumann_perturbation"), d_lin))
        d_p = gauge_like_semi_dirichlet(P, p_sol.d, d_lin)
        n_semi = float(np.linalg.norm(s_sol.d))
        table.append({"level": lv, "N_mic": n, "h": P.h, "technique": "semi_dirichlet", "kappa": math.nan,
                      "l2_norm": n_semi, "newton_iterations": s_sol.info["iterations"],
                      "solves": s_sol.info["solves"]})
        table.append({"level": lv, "N_mic": n, "h": P.h, "technique": "perturbation", "kappa": cfg.micro.kappa_max,
                      "l2_norm": float(np.linalg.norm(d_p)), "newton_iterations": 0, "solves": 1})
        for kappa in cfg.neumann.kappa_sweep:
            d_k = micro.solve_coupled(P, make_coupling(cfg, "neumann_perturbation", kappa), d_lin).d
            d_k = gauge_like_semi_dirichlet(P, d_k, d_lin)
            table.append({"level": lv, "N_mic": n, "h": P.h, "technique": "perturbation_sweep", "kappa": kappa,
                          "l2_norm": float(np.linalg.norm(d_k)), "newton_iterations": 0, "solves": 1})
        total = t_semi + t_pert
        timing.append({"level": lv, "N_mic": n, "semi_dirichlet_seconds": t_semi, "perturbation_seconds": t_pert,
                       "semi_dirichlet_percent": 100 * t_semi / total, "perturbation_percent": 100 * t_pert / total})
    res.tables["norms"] = table
    res.tables["timing"] = timing
    return res


def _ratio_tag(r: Fraction) -> str:
    return f"{r.numerator}" if r.denominator == 1 else f"{r.numerator}over{r.denominator}"


def run_modeling_error(config: StudyConfig) -> StudyResult:
    """Macro sweeps for oversampled Dirichlet and periodic RVEs against periodic delta = epsilon."""
    cfg = config
    res = StudyResult("modeling-error", cfg)
    levels = cfg.macro.levels
    sizes = [1.0 / n for n in levels]
    n0 = cfg.micro.fixed_level
    periodic = next((k for k in cfg.micro.couplings if k.startswith("periodic")), "periodic_lagrange")
    dirichlet = next((k for k in cfg.micro.couplings if k.startswith("dirichlet")), "dirichlet_lagrange")
    A0_base = basis_A0(cfg, n0, periodic, Fraction(1))
    ref = reference_solution(cfg, A0_base)
    runs = [(dirichlet, r) for r in cfg.modeling.dirichlet_ratios] + [(periodic, r) for r in cfg.modeling.periodic_ratios]
    offsets, finest = {}, {}
    for kind, r in runs:
        n = max(1, round(float(r) * n0))
        A0 = basis_A0(cfg, n, kind, r)
        errs = []
        for nm in levels:
            sol = single_scale(cfg, nm, A0)
            errs.append(_errors(postproc.error_norms(sol, ref), cfg.study.norms))
        name = f"{kind}_delta{_ratio_tag(r)}"
        delta = float(r) * cfg.micro.epsilon
        _add_series(res, name, sizes, [_level(cfg, nm, n, delta) for nm in levels], _collect(errs))
        offsets[name] = float(np.linalg.norm(A0 - A0_base) / np.linalg.norm(A0_base))
        finest[name] = {k: v[-1][0] for k, v in _collect(errs).items()}
    res.info["tensor_offsets"] = offsets
    res.info["finest_errors"] = finest
    return res


def run_error_decomposition(config: StudyConfig) -> StudyResult:
    """Total error against u(H->0, h->0), macro part of u(H, h->0), micro part by subtraction."""
    cfg = config
    res = StudyResult("decompose-error", cfg)
    kind = cfg.micro.couplings[0]
    if len(cfg.macro.levels) != len(cfg.micro.levels):
        raise ConfigError("decompose-error pairs macro.levels with micro.levels; give equally many")
    A0_ref = basis_A0(cfg, cfg.micro.reference, kind)
    ref = reference_solution(cfg, A0_ref)
    sizes = [1.0 / n for n in cfg.macro.levels]
    tot, mac, mic = [], [], []
    lvls = []
    for i, (n, m) in enumerate(zip(cfg.macro.levels, cfg.micro.levels)):
        sol = two_scale(cfg, n, m, kind)
        micro.clear_basis_cache()
        e_tot = postproc.error_norms(sol, ref)
        e_mac = postproc.error_norms(single_scale(cfg, n, A0_ref), ref)
        tot.append(_errors(e_tot, cfg.study.norms))
        mac.append(_errors(e_mac, cfg.study.norms))
        mic.append({k: (postproc.decompose_errors(tot[-1][k][0], mac[-1][k][0]),
                        postproc.decompose_errors(tot[-1][k][1], mac[-1][k][1])) for k in cfg.study.norms})
        lvls.append(_level(cfg, n, m))
        if cfg.output.vtk:
            os.makedirs(cfg.output.dir, exist_ok=True)
            rel_tot = postproc.relative_element_errors(sol.mesh, sol.u, sol.A0, ref.mesh, ref.u, ref.A0)
            s_mac = single_scale(cfg, n, A0_ref)
            rel_mac = postproc.relative_element_errors(s_mac.mesh, s_mac.u, s_mac.A0, ref.mesh, ref.u, ref.A0)
            macro.write_fields(sol, os.path.join(cfg.output.dir, f"decompose-error_level{i}"),
                               {"relative_total_error": rel_tot,
                                "relative_micro_error": np.maximum(rel_tot - rel_mac, 0.0)})
    _add_series(res, "total", sizes, lvls, _collect(tot))
    _add_series(res, "macro", sizes, lvls, _collect(mac))
    _add_series(res, "micro", sizes, lvls, _collect(mic))
    return res


STUDIES = {
    "converge-micro": run_micro_convergence,
    "converge-macro": run_macro_convergence,
    "refine-study": run_refinement_strategy,
    "neumann-compare": run_neumann_comparison,
    "modeling-error": run_modeling_error,
    "decompose-error": run_error_decomposition,
    "estimate-error": run_estimator_validation,
}
