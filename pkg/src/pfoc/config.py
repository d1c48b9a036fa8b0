"""Experiment configuration as a sectioned key/value text file.

The file is read with :mod:`configparser`. Every key that is present must
be known; unknown keys and invalid values raise
:class:`~pfoc.errors.ConfigurationError` carrying the line number of the
offending entry. Serializing a parsed config and parsing it again yields an
equal object.

Sections
--------
``[experiment]``
    ``kind`` and a free-form ``name``.
``[problem]``
    Model and optimizer parameters. ``tau`` may be given instead of
    ``n_steps``; it must divide ``T`` into a whole number of steps.
``[grid]``
    Dimension, domain and the coarsest, storage and solve resolutions.
``[amr]``
    Refinement switch, block size, flag threshold and regrid interval.
``[shape.initial]``, ``[shape.target]``
    Level-set shapes. A ``union_max`` shape takes its two parts from
    ``[shape.<role>.part1]`` and ``[shape.<role>.part2]``.
``[study]``
    Settings for the multi-run experiment kinds.
``[output]`` and ``[run]``
    Output directory, snapshot cadence, threads and determinism.
"""

from __future__ import annotations

import configparser
import copy
import dataclasses
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .amr import AMRConfig
from .control import OptimizeConfig, StoppingCriteria
from .errors import ConfigurationError
from .mgcore import CycleConfig
from .shapes import ShapeSpec

KINDS = ("optimize", "convergence_table", "mg_rate", "complexity_timing", "alpha_study",
         "two_grid_compare")

# Probe times of the 2-D benchmark family.
PROBE_TIMES = (0.0125, 0.0625, 0.125)


@dataclass
class ProblemSettings:
    eps: float = 0.1
    theta: float = 0.01
    T: float = 0.125
    n_steps: int = 10
    alpha0: float = 0.1
    p_l: float = 0.5
    p_u: float = 1.1
    alpha_min: Optional[float] = None
    adaptive: bool = True
    tol_lambda: float = 0.01
    max_lambda_iter: int = 20
    constrain: bool = True
    residual_tol: float = 1e-11
    max_cycles: int = 50
    pre_sweeps: int = 2
    post_sweeps: int = 2
    abs_tol: Optional[float] = None
    rel_tol: Optional[float] = 1e-4
    max_iter: int = 50
    rel_mode: str = "relative"
    fidelity_level: str = "solve"
    mean_free_adjoint: bool = False

    @property
    def tau(self) -> float:
        return self.T / self.n_steps


@dataclass
class GridSettings:
    dim: int = 2
    origin: float = 0.0
    extent: float = 4.0
    coarsest_n: int = 16
    storage_n: int = 64
    solve_n: int = 64


@dataclass
class StudySettings:
    """Parameters of the multi-run experiment kinds.

    ``ladder`` lists ``n:steps`` pairs, coarsest first. ``benchmark`` is
    one ``n:steps`` pair. ``pairs`` lists ``p_u:p_l`` pairs for the step
    size study.
    """

    ladder: tuple = ((32, 10), (64, 20), (128, 40))
    benchmark: tuple = (256, 80)
    probe_times: tuple = PROBE_TIMES
    sizes: tuple = (64, 128, 256)
    pairs: tuple = ((1.1, 0.5), (1.2, 0.4), (1.3, 0.3))
    fixed_iterations: int = 50
    timing_iterations: int = 10
    two_grid: tuple = (256, 32)
    compare_steps: int = 80
    seed: int = 0


@dataclass
class OutputSettings:
    dir: str = "out"
    snapshot_every: int = 0
    binary: bool = False


@dataclass
class RunSettings:
    threads: int = 1
    deterministic: bool = True
    log_level: str = "INFO"


def _circle():
    return ShapeSpec("circle", center=(2.0, 2.0), radius=1.0)


def _ellipse():
    return ShapeSpec("ellipse", center=(2.0, 2.0), radius=1.0, weights=(0.5, 1.0))


@dataclass
class ExperimentConfig:
    """Complete description of one experiment invocation."""

    kind: str = "optimize"
    name: str = "benchmark"
    problem: ProblemSettings = field(default_factory=ProblemSettings)
    grid: GridSettings = field(default_factory=GridSettings)
    amr: AMRConfig = field(default_factory=AMRConfig)
    initial: ShapeSpec = field(default_factory=_circle)
    target: ShapeSpec = field(default_factory=_ellipse)
    study: StudySettings = field(default_factory=StudySettings)
    output: OutputSettings = field(default_factory=OutputSettings)
    run: RunSettings = field(default_factory=RunSettings)

    def optimize_config(self, n_steps: Optional[int] = None, amr: Optional[AMRConfig] = None,
                        **overrides) -> OptimizeConfig:
        """Translate the problem section into an :class:`OptimizeConfig`."""
        p = self.problem
        cycle = CycleConfig(p.pre_sweeps, p.post_sweeps, 0, tol=p.residual_tol, max_cycles=p.max_cycles)
        stopping = StoppingCriteria(p.abs_tol, p.rel_tol, p.max_iter, p.rel_mode)
        kw = dict(eps=p.eps, theta=p.theta, T=p.T, n_steps=n_steps or p.n_steps, alpha0=p.alpha0,
                  p_l=p.p_l, p_u=p.p_u, alpha_min=p.alpha_min, adaptive=p.adaptive,
                  tol_lambda=p.tol_lambda, max_lambda_iter=p.max_lambda_iter, constrain=p.constrain,
                  cycle=cycle, amr=amr if amr is not None else self.amr, stopping=stopping,
                  fidelity_level=p.fidelity_level, mean_free_adjoint=p.mean_free_adjoint)
        kw.update(overrides)
        return OptimizeConfig(**kw)

    def shapes(self):
        """Initial and target shapes with the problem's interface width."""
        return self.initial.with_eps(self.problem.eps), self.target.with_eps(self.problem.eps)


# ---------------------------------------------------------------- parsing helpers

def _tuple_of(conv):
    def parse(text):
        text = text.strip()
        if not text:
            return ()
        return tuple(conv(v) for v in re.split(r"[,\s]+", text) if v)
    return parse


def _pairs_of(conv):
    def parse(text):
        out = []
        for item in re.split(r"[,\s]+", text.strip()):
            if not item:
                continue
            a, b = item.split(":")
            out.append((conv(a), conv(b)))
        return tuple(out)
    return parse


def _pair_of(conv):
    def parse(text):
        a, b = text.strip().split(":")
        return (conv(a), conv(b))
    return parse


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def parse(text):
        return None if text.strip().lower() in ("", "none") else conv(text)
    return parse


def _matrix(text):
    text = text.strip()
    if not text:
        return ()
    return tuple(tuple(float(v) for v in row.split(",")) for row in text.split(";"))


_FIELD_PARSERS = {
    "problem": {
        "alpha_min": _optional(float), "abs_tol": _optional(float), "rel_tol": _optional(float),
    },
    "study": {
        "ladder": _pairs_of(int), "benchmark": _pair_of(int), "probe_times": _tuple_of(float),
        "sizes": _tuple_of(int), "pairs": _pairs_of(float), "two_grid": _pair_of(int),
    },
}

_SHAPE_PARSERS = {
    "kind": str, "center": _tuple_of(float), "radius": float, "weights": _tuple_of(float),
    "axes": _matrix, "bend": float, "bend_axis": int, "bend_along": int,
}


def _default_parser(ftype):
    if ftype in (bool, "bool"):
        return _bool
    if ftype in (int, "int"):
        return int
    if ftype in (float, "float"):
        return float
    return str


_PAIR_FIELDS = {"ladder", "benchmark", "pairs", "two_grid"}


def _format(value, key: str = "") -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if key in _PAIR_FIELDS:
            pairs = value if value and isinstance(value[0], tuple) else (value,)
            return ", ".join(f"{_format(a)}:{_format(b)}" for a, b in pairs)
        return ", ".join(_format(v) for v in value)
    return str(value)


def _line_index(text: str) -> dict:
    """Map ``(section, key)`` and ``(section, None)`` to 1-based line numbers."""
    index = {}
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", s)
        if m:
            section = m.group(1).strip()
            index.setdefault((section, None), lineno)
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", s)
        if m and section is not None:
            index[(section, m.group(1).strip())] = lineno
    return index


_MISSING = object()


class _Reader:
    def __init__(self, text: str, source: str):
        self.parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        self.parser.optionxform = str
        try:
            self.parser.read_string(text, source=source)
        except configparser.Error as exc:
            line = getattr(exc, "lineno", None)
            raise ConfigurationError(f"{source}: {exc.message if hasattr(exc, 'message') else exc}",
                                     line) from None
        self.lines = _line_index(text)
        self.source = source
        self.used = set()

    def line(self, section, key=None):
        return self.lines.get((section, key)) or self.lines.get((section, None))

    def fail(self, section, key, message):
        raise ConfigurationError(f"{self.source}: [{section}] {key}: {message}", self.line(section, key))

    def has(self, section):
        return self.parser.has_section(section)

    def get(self, section, key, conv):
        if not self.parser.has_option(section, key):
            return _MISSING
        self.used.add((section, key))
        raw = self.parser.get(section, key)
        try:
            return conv(raw)
        except (ValueError, TypeError) as exc:
            self.fail(section, key, f"cannot parse {raw!r} ({exc})")

    def check_unknown(self):
        for section in self.parser.sections():
            for key in self.parser.options(section):
                if (section, key) not in self.used:
                    self.fail(section, key, "unknown key")


def _read_dataclass(reader: _Reader, section: str, cls, default):
    if not reader.has(section):
        return default
    kwargs = {}
    parsers = _FIELD_PARSERS.get(section, {})
    for f in dataclasses.fields(cls):
        conv = parsers.get(f.name) or _default_parser(f.type)
        value = reader.get(section, f.name, conv)
        if value is not _MISSING:
            kwargs[f.name] = value
    try:
        return dataclasses.replace(default, **kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{reader.source}: [{section}] {exc}", reader.line(section)) from None


def _read_shape(reader: _Reader, section: str, default: ShapeSpec) -> ShapeSpec:
    if not reader.has(section):
        return default
    kwargs = {}
    for key, conv in _SHAPE_PARSERS.items():
        value = reader.get(section, key, conv)
        if value is not _MISSING:
            kwargs[key] = value
    default_kind = default.kind if default is not None else None
    if kwargs.get("kind", default_kind) == "union_max":
        parts = tuple(_read_shape(reader, f"{section}.part{i}", None) for i in (1, 2))
        if any(p is None for p in parts):
            reader.fail(section, "kind", "union_max needs part1 and part2 sections")
        kwargs["parts"] = parts
    base = default if default is not None and kwargs.get("kind", default_kind) == default_kind else None
    try:
        if base is None:
            if "kind" not in kwargs:
                reader.fail(section, "kind", "missing shape kind")
            return ShapeSpec(**kwargs)
        return dataclasses.replace(base, **kwargs)
    except (ConfigurationError, TypeError, ValueError) as exc:
        raise ConfigurationError(f"{reader.source}: [{section}] {exc}", reader.line(section)) from None


def parse_config(text: str, source: str = "<config>", base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse configuration text on top of ``base`` (default: :func:`preset` ``"table1"``)."""
    reader = _Reader(text, source)
    cfg = copy.deepcopy(base) if base is not None else preset("table1")
    kind = reader.get("experiment", "kind", str) if reader.has("experiment") else _MISSING
    name = reader.get("experiment", "name", str) if reader.has("experiment") else _MISSING
    if kind is not _MISSING:
        if kind not in KINDS:
            reader.fail("experiment", "kind", f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
        cfg.kind = kind
    if name is not _MISSING:
        cfg.name = name
    problem = _read_dataclass(reader, "problem", ProblemSettings, cfg.problem)
    tau = reader.get("problem", "tau", float) if reader.has("problem") else _MISSING
    if tau is not _MISSING:
        if reader.parser.has_option("problem", "n_steps"):
            reader.fail("problem", "tau", "give either tau or n_steps, not both")
        steps = problem.T / tau
        if not tau > 0 or abs(steps - round(steps)) > 1e-9 * steps:
            reader.fail("problem", "tau", f"tau={tau!r} does not divide T={problem.T!r} into whole steps")
        problem = dataclasses.replace(problem, n_steps=int(round(steps)))
    cfg.problem = problem
    cfg.grid = _read_dataclass(reader, "grid", GridSettings, cfg.grid)
    cfg.amr = _read_dataclass(reader, "amr", AMRConfig, cfg.amr)
    cfg.initial = _read_shape(reader, "shape.initial", cfg.initial)
    cfg.target = _read_shape(reader, "shape.target", cfg.target)
    cfg.study = _read_dataclass(reader, "study", StudySettings, cfg.study)
    cfg.output = _read_dataclass(reader, "output", OutputSettings, cfg.output)
    cfg.run = _read_dataclass(reader, "run", RunSettings, cfg.run)
    reader.check_unknown()
    validate(cfg, reader)
    return cfg


def load_config(path, overrides=()) -> ExperimentConfig:
    """Read a config file and apply ``section.key=value`` overrides.

    An optional ``preset`` key in ``[experiment]`` selects the base that
    the file is read on top of. Each override is parsed as its own layer,
    so its error messages name the offending override.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    base = _preset_from_text(text, str(path))
    # Blank out the preset key in place so line numbers stay valid.
    text = re.sub(r"(?im)^\s*preset\s*[=:].*$", "", text)
    cfg = parse_config(text, str(path), base=base)
    return apply_overrides(cfg, overrides)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings on top of ``cfg``."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        if "." not in lhs:
            raise ConfigurationError(f"override {item!r} needs a section, as in problem.eps=0.05")
        section, key = lhs.strip().rsplit(".", 1)
        text = f"[{section}]\n{key} = {value.strip()}\n"
        if section == "problem" and key.strip() == "tau":
            text += f"T = {cfg.problem.T!r}\n"
        cfg = parse_config(text, f"override {item!r}", base=cfg)
    return cfg


def _preset_from_text(text, source):
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        parser.read_string(text, source=source)
    except configparser.Error:
        return None
    if parser.has_option("experiment", "preset"):
        name = parser.get("experiment", "preset")
        try:
            return preset(name)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}: {exc}", _line_index(text).get(("experiment", "preset"))) from None
    return None


def validate(cfg: ExperimentConfig, reader: Optional[_Reader] = None):
    """Cross-field checks; raises :class:`ConfigurationError`."""
    def fail(section, key, message):
        if reader is not None:
            reader.fail(section, key, message)
        raise ConfigurationError(f"[{section}] {key}: {message}")

    p, g = cfg.problem, cfg.grid
    for key in ("eps", "theta", "T", "alpha0", "tol_lambda", "residual_tol"):
        if not getattr(p, key) > 0:
            fail("problem", key, "must be positive")
    if p.n_steps < 1:
        fail("problem", "n_steps", "must be at least 1")
    if not (0 < p.p_l < 1):
        fail("problem", "p_l", "must lie in (0, 1)")
    if not p.p_u > 1:
        fail("problem", "p_u", "must exceed 1")
    if p.alpha_min is not None and not 0 < p.alpha_min <= p.alpha0:
        fail("problem", "alpha_min", "must lie in (0, alpha0]")
    if p.abs_tol is None and p.rel_tol is None and p.max_iter < 1:
        fail("problem", "max_iter", "at least one stopping criterion must be enabled")
    if p.rel_mode not in ("relative", "absolute"):
        fail("problem", "rel_mode", "must be 'relative' or 'absolute'")
    if p.fidelity_level not in ("solve", "storage"):
        fail("problem", "fidelity_level", "must be 'solve' or 'storage'")
    if g.dim not in (2, 3):
        fail("grid", "dim", "must be 2 or 3")
    if not g.extent > 0:
        fail("grid", "extent", "must be positive")
    for key in ("coarsest_n", "storage_n", "solve_n"):
        n = getattr(g, key)
        if n < 2 or n & (n - 1):
            fail("grid", key, "must be a power of two >= 2")
    if not g.coarsest_n <= g.storage_n <= g.solve_n:
        fail("grid", "storage_n", "need coarsest_n <= storage_n <= solve_n")
    for role, shape in (("initial", cfg.initial), ("target", cfg.target)):
        if shape.dim != g.dim:
            fail(f"shape.{role}", "center", f"{shape.dim}-D shape in a {g.dim}-D experiment")
    if cfg.run.threads < 1:
        fail("run", "threads", "must be >= 1")
    if any(not 0 < t <= p.T for t in cfg.study.probe_times):
        fail("study", "probe_times", "probe times must lie in (0, T]")
    if cfg.kind == "mg_rate" and not cfg.study.sizes:
        fail("study", "sizes", "needs at least one grid size")


# ---------------------------------------------------------------- serialization

def _shape_items(shape: ShapeSpec):
    items = [("kind", shape.kind)]
    if shape.kind == "union_max":
        return items
    items += [("center", shape.center), ("radius", shape.radius), ("weights", shape.weights)]
    if shape.axes:
        items.append(("axes", "; ".join(",".join(repr(float(v)) for v in row) for row in shape.axes)))
    if shape.kind == "bent_tube_3d" or shape.bend:
        items += [("bend", shape.bend), ("bend_axis", shape.bend_axis), ("bend_along", shape.bend_along)]
    return items


def _emit_shape(lines, section, shape):
    lines.append(f"[{section}]")
    for key, value in _shape_items(shape):
        lines.append(f"{key} = {value if isinstance(value, str) else _format(value)}")
    lines.append("")
    if shape.kind == "union_max":
        for i, part in enumerate(shape.parts, start=1):
            _emit_shape(lines, f"{section}.part{i}", part)


def to_text(cfg: ExperimentConfig) -> str:
    """Serialize every setting; :func:`parse_config` inverts this exactly."""
    lines = ["[experiment]", f"kind = {cfg.kind}", f"name = {cfg.name}", ""]
    for section, obj in (("problem", cfg.problem), ("grid", cfg.grid), ("amr", cfg.amr)):
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name), f.name)}")
        lines.append("")
    _emit_shape(lines, "shape.initial", cfg.initial)
    _emit_shape(lines, "shape.target", cfg.target)
    for section, obj in (("study", cfg.study), ("output", cfg.output), ("run", cfg.run)):
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format(getattr(obj, f.name), f.name)}")
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------- presets

def _rotated_ellipse(sign: float) -> ShapeSpec:
    # [(x-2)+(y-2)]^2/6 + [(y-2)-(x-2)]^2 - 1 for sign=+1, written as rows
    # of M acting on (x-2, y-2) with weights (1/6, 1). sign=-1 swaps the two
    # diagonals, giving the ellipse mirrored about x=2.
    return ShapeSpec("ellipse", center=(2.0, 2.0), radius=1.0, weights=(1.0 / 6.0, 1.0),
                     axes=((1.0, sign), (-sign, 1.0)))


def preset(name: str) -> ExperimentConfig:
    """Named configurations.

    ``table1``
        Circle to ellipse on ``(0, 4)^2`` with ``alpha0 = 0.1``,
        ``theta = 0.01``, ``eps = 0.1``, ``T = 0.125`` at 64^2 and 10 steps.
    ``reference``
        The same problem with ``tau = 7.8125e-4`` (160 steps).
    ``ladder``
        Convergence table over the ladder ``32:10, 64:20, 128:40`` against a
        ``256:80`` benchmark, stopping at ``J < 0.065``.
    ``irregular2d``
        Circle to the union of two rotated ellipses. The second ellipse
        uses the mirrored orientation by default.
    ``sphere3d``
        Sphere to ellipsoid on ``(0, 1)^3`` with ``eps = 0.04`` and
        ``tau = 5e-5``: 64^3 solve level with refinement, 16^3 storage.
    """
    cfg = ExperimentConfig()
    if name == "table1":
        return cfg
    if name == "reference":
        cfg.name = "reference"
        cfg.problem.n_steps = 160
        return cfg
    if name == "ladder":
        cfg.name, cfg.kind = "ladder", "convergence_table"
        cfg.problem.abs_tol = 0.065
        cfg.problem.max_iter = 40
        return cfg
    if name == "irregular2d":
        cfg.name = "irregular2d"
        cfg.target = ShapeSpec("union_max", parts=(_rotated_ellipse(1.0), _rotated_ellipse(-1.0)))
        return cfg
    if name == "sphere3d":
        cfg.name = "sphere3d"
        cfg.problem.eps = 0.04
        cfg.problem.T = 20 * 5e-5
        cfg.problem.n_steps = 20
        cfg.problem.max_iter = 15
        cfg.problem.rel_tol = None
        cfg.grid = GridSettings(dim=3, origin=0.0, extent=1.0, coarsest_n=4, storage_n=16, solve_n=64)
        cfg.amr = AMRConfig(enabled=True)
        cfg.initial = ShapeSpec("sphere", center=(0.5, 0.5, 0.5), radius=0.25)
        cfg.target = ShapeSpec("ellipsoid", center=(0.5, 0.5, 0.5), radius=0.25, weights=(0.5, 1.0, 1.0))
        cfg.study.probe_times = (cfg.problem.T,)
        return cfg
    raise ConfigurationError(f"unknown preset {name!r}; available: table1, reference, ladder, irregular2d, sphere3d")


PRESETS = ("table1", "reference", "ladder", "irregular2d", "sphere3d")
