"""Study configuration: flat ``section.key = value`` text files mapped onto dataclasses.

Syntax::

    # comment
    study.name = converge-macro
    macro.levels = 4, 8, 16, 32
    micro.field = sine_wave
    micro.delta_over_epsilon = 5/3

Lists are comma separated, booleans are true/false, ``none`` clears optional values,
ratios may be written as fractions.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from fractions import Fraction


class ConfigError(ValueError):
    pass


PROBLEMS = ("square_cantilever", "tapered_cantilever")


@dataclass
class StudySection:
    name: str = "converge-macro"
    seed: int = 0
    rate_window: int = 3
    norms: list[str] = field(default_factory=lambda: ["L2", "H1", "energy"])
    scale: str = "macroscale"  # micro convergence: macroscale or microscale


@dataclass
class MacroSection:
    problem: str = "square_cantilever"
    order: int = 1
    levels: list[int] = field(default_factory=lambda: [4, 8, 16, 32])
    reference: int = 128
    reference_order: int = 0  # 0: same as macro.order
    fixed_level: int = 8  # macro mesh for micro studies
    size: float = 1.0  # square cantilever edge
    length: float = 1.0  # tapered cantilever
    clamped_height: float = 2.0
    alpha_deg: float = 30.4
    volume_load: list[float] = field(default_factory=lambda: [0.0, -10.0])
    line_load: float | None = None  # vertical traction on the free edge
    qp_point: list[float] = field(default_factory=lambda: [0.26, 0.26])


@dataclass
class MicroSection:
    field: str = "sine_wave"
    order: int = 1
    levels: list[int] = dataclasses.field(default_factory=lambda: [4, 8, 16, 32])
    reference: int = 128
    fixed_level: int = 16  # micro mesh for macro studies
    couplings: list[str] = dataclasses.field(default_factory=lambda: ["periodic_lagrange"])
    epsilon: float = 1.0 / 64
    delta_over_epsilon: Fraction = Fraction(1)
    e_matrix: float = 40000.0
    e_inclusion: float = 200000.0
    e_min: float = 40000.0
    e_max: float = 50000.0
    nu: float = 0.2
    inclusion_ratio: float = 0.75
    tiles: int = 2
    cell_variant: str = "shifted"
    kappa_max: float = 1e-5


@dataclass
class NeumannSection:
    kappa_sweep: list[float] = field(default_factory=lambda: [1e-8, 1e-7, 1e-6, 1e-5])
    repeats: int = 3


@dataclass
class ModelingSection:
    dirichlet_ratios: list[Fraction] = field(default_factory=lambda: [Fraction(11, 10), Fraction(5, 3), Fraction(2)])
    periodic_ratios: list[Fraction] = field(default_factory=lambda: [Fraction(1), Fraction(2)])


@dataclass
class RefineSection:
    fixed_micro_levels: list[int] = field(default_factory=lambda: [2, 4, 8])
    schedules: list[str] = field(default_factory=lambda: ["l2", "h1"])


@dataclass
class OutputSection:
    dir: str = "results"
    vtk: bool = False


@dataclass
class StudyConfig:
    study: StudySection = field(default_factory=StudySection)
    macro: MacroSection = field(default_factory=MacroSection)
    micro: MicroSection = field(default_factory=MicroSection)
    neumann: NeumannSection = field(default_factory=NeumannSection)
    modeling: ModelingSection = field(default_factory=ModelingSection)
    refine: RefineSection = field(default_factory=RefineSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> "StudyConfig":
        from ..micro import COUPLING_KINDS
        from ..material import FIELD_KINDS

        m, u = self.macro, self.micro
        if m.problem not in PROBLEMS:
            raise ConfigError(f"macro.problem must be one of {PROBLEMS}, got {m.problem!r}")
        if u.field not in FIELD_KINDS:
            raise ConfigError(f"micro.field must be one of {FIELD_KINDS}, got {u.field!r}")
        for c in u.couplings:
            if c not in COUPLING_KINDS:
                raise ConfigError(f"unknown coupling {c!r}; expected one of {COUPLING_KINDS}")
        for name, o in (("macro.order", m.order), ("micro.order", u.order)):
            if o not in (1, 2):
                raise ConfigError(f"{name} must be 1 or 2")
        for name, lv in (("macro.levels", m.levels), ("micro.levels", u.levels)):
            if not lv or any(n < 1 for n in lv) or sorted(lv) != list(lv) or len(set(lv)) != len(lv):
                raise ConfigError(f"{name} must be a strictly increasing list of positive integers")
        if m.reference_order not in (0, 1, 2):
            raise ConfigError("macro.reference_order must be 0 (same as macro.order), 1 or 2")
        if m.reference * (m.reference_order or m.order) <= max(m.levels) * m.order:
            raise ConfigError("macro.reference must be finer than every macro level")
        if u.reference <= max(u.levels):
            raise ConfigError("micro.reference must be finer than every micro level")
        for n in u.levels + [u.reference]:
            if n & (n - 1):
                raise ConfigError("micro levels must be powers of two")
        if u.delta_over_epsilon < 1:
            raise ConfigError("micro.delta_over_epsilon must be >= 1")
        if u.epsilon <= 0:
            raise ConfigError("micro.epsilon must be positive")
        if self.study.rate_window < 2:
            raise ConfigError("study.rate_window must be >= 2")
        bad = set(self.study.norms) - {"L2", "H1", "energy"}
        if bad:
            raise ConfigError(f"unknown norms {sorted(bad)}")
        if self.study.scale not in ("macroscale", "microscale"):
            raise ConfigError("study.scale must be macroscale or microscale")
        if len(m.volume_load) != 2 or len(m.qp_point) != 2:
            raise ConfigError("macro.volume_load and macro.qp_point take two values")
        if not 0 < m.alpha_deg < 90:
            raise ConfigError("macro.alpha_deg must lie in (0, 90)")
        if u.kappa_max <= 0 or any(k <= 0 for k in self.neumann.kappa_sweep):
            raise ConfigError("perturbation values must be positive")
        if self.study.seed < 0 or self.study.seed >= 2 ** 64:
            raise ConfigError("study.seed must be an unsigned 64-bit integer")
        from ..material import MicrostructureField, voigt_tensor
        from ..mesh import MeshError, tapered_cantilever_corners

        if m.size <= 0:
            raise ConfigError("macro.size must be positive")
        if m.problem == "tapered_cantilever":
            try:
                if m.length <= 0:
                    raise MeshError("length must be positive")
                tapered_cantilever_corners(m.length, m.clamped_height, m.alpha_deg)
            except MeshError as exc:
                raise ConfigError(f"macro geometry: {exc}") from exc

        try:
            MicrostructureField(u.field, u.epsilon, e_matrix=u.e_matrix, e_inclusion=u.e_inclusion, nu=u.nu,
                                inclusion_ratio=u.inclusion_ratio, tiles=u.tiles, e_min=u.e_min, e_max=u.e_max,
                                cell_variant=u.cell_variant)
            for E in (u.e_matrix, u.e_inclusion, u.e_min, u.e_max):
                voigt_tensor(E, u.nu)
        except ValueError as exc:
            raise ConfigError(f"micro material: {exc}") from exc
        return self

    # ------------------------------------------------------------ text form

    def items(self) -> list[tuple[str, str]]:
        out = []
        for sec in dataclasses.fields(self):
            obj = getattr(self, sec.name)
            for f in dataclasses.fields(obj):
                out.append((f"{sec.name}.{f.name}", _format(getattr(obj, f.name))))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    @property
    def hash(self) -> str:
        """Short digest of the canonical text, excluding output location."""
        text = "".join(f"{k} = {v}\n" for k, v in self.items() if not k.startswith("output."))
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def with_overrides(self, **dotted) -> "StudyConfig":
        cfg = dataclasses.replace(self, **{s.name: dataclasses.replace(getattr(self, s.name))
                                          for s in dataclasses.fields(self)})
        for key, value in dotted.items():
            _assign(cfg, key.replace("__", "."), value if isinstance(value, str) else _format(value))
        return cfg.validate()


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(tp, raw: str, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if raw.lower() == "none":
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(inner, raw, key)
    if origin is list:
        if not raw:
            return []
        return [_coerce(args[0], part, key) for part in raw.split(",")]
    try:
        if tp is bool:
            if raw.lower() in ("true", "yes", "1", "on"):
                return True
            if raw.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(Fraction(raw)) if "/" in raw else float(raw)
        if tp is Fraction:
            return Fraction(raw)
        return raw
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: cannot read {raw!r} as {getattr(tp, '__name__', tp)}") from exc


def _assign(cfg: StudyConfig, key: str, raw: str) -> None:
    if key.count(".") != 1:
        raise ConfigError(f"keys take the form section.name, got {key!r}")
    sec, name = key.split(".")
    if sec not in {f.name for f in dataclasses.fields(cfg)}:
        raise ConfigError(f"unknown section {sec!r} in {key!r}")
    obj = getattr(cfg, sec)
    hints = typing.get_type_hints(type(obj))
    if name not in hints:
        raise ConfigError(f"unknown key {key!r}")
    setattr(obj, name, _coerce(hints[name], raw, key))


def parse_config(text: str, base: StudyConfig | None = None) -> StudyConfig:
    cfg = base if base is not None else StudyConfig()
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       interpolation=None, strict=True)
    parser.optionxform = str
    try:
        parser.read_string("[config]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    for key, raw in parser["config"].items():
        _assign(cfg, key, raw)
    return cfg.validate()


def load_config(path, base: StudyConfig | None = None) -> StudyConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, base)


def default_config(name: str) -> StudyConfig:
    """Desk-scale defaults per study."""
    cfg = StudyConfig()
    cfg.study.name = name
    if name in ("converge-macro", "estimate-error", "decompose-error"):
        cfg.macro.problem = "tapered_cantilever"
    if name == "decompose-error":
        cfg.macro.line_load = -10.0
        cfg.macro.levels = [4, 8, 16]
        cfg.macro.reference = 64
        cfg.micro.levels = [4, 8, 16]
        cfg.micro.reference = 64
    if name == "converge-micro":
        cfg.micro.couplings = ["dirichlet_lagrange", "periodic_lagrange", "neumann_perturbation"]
    if name == "neumann-compare":
        cfg.micro.field = "matrix_inclusion"
        cfg.micro.couplings = ["neumann_semi_dirichlet", "neumann_perturbation"]
        cfg.micro.levels = [16, 32, 64, 128]
        cfg.micro.reference = 256
        cfg.micro.epsilon = 1.0
    if name == "modeling-error":
        cfg.micro.couplings = ["dirichlet_lagrange", "periodic_lagrange"]
        cfg.micro.fixed_level = 32
        cfg.micro.e_max = 100000.0
        cfg.macro.levels = [16, 32, 64, 128]
        cfg.macro.reference = 128
        cfg.macro.reference_order = 2
        cfg.study.norms = ["L2", "H1"]
    if name == "refine-study":
        cfg.macro.problem = "tapered_cantilever"
        cfg.micro.e_max = 100000.0
    return cfg
