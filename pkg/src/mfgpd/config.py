"""Run configuration files.

Configs are INI files read with :mod:`configparser`::

    [grid]
    N_h = 32
    N_T = 32
    T = 1.0
    nu = 0.5
    q = 2

    [coupling]
    kind = sincos          ; sincos | table | zero
    hbar_file =            ; N_h x N_h whitespace table when kind = table

    [solver]
    gamma = 0.95
    tau = 0.95
    theta = 1.0
    tol_cp = 1e-6
    max_iters = 500
    linear_solver = bicgstab   ; direct | cg | bicgstab
    preconditioner = multigrid ; identity | jacobi | multigrid
    lin_tol = 1e-8
    lin_maxit = 500
    general_q = false

    [multigrid]
    H = 2
    levels =               ; empty: inferred from N_h / H
    eta1 = 2
    eta2 = 2
    cycle = F

    [output]
    directory = out
    formats = csv          ; comma-separated subset of csv, raw
    stride = 8

    [sweep]                ; bench-linsolve and cond-estimate only
    nu = 0.046, 0.12, 0.2, 0.36, 0.6
    sizes = 32             ; N (N_h = N_T = N) or N_hxN_T, e.g. 32x10
    solvers = bicgstab:multigrid, bicgstab:identity
    factors = 1e-3, 1e-8
    preconditioned = false

Unknown sections or keys are rejected. Relative ``hbar_file`` and output
paths resolve against the config file's directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .coupling import CouplingSpec, quadratic_coupling, sincos_coupling, zero_coupling
from .grid import GridSpec
from .primal_dual import CPConfig, ConfigError

SECTIONS = {
    "grid": {"n_h", "n_t", "t", "nu", "q"},
    "coupling": {"kind", "hbar_file"},
    "solver": {
        "gamma", "tau", "theta", "tol_cp", "max_iters", "linear_solver",
        "preconditioner", "lin_tol", "lin_maxit", "general_q",
    },
    "multigrid": {"h", "levels", "eta1", "eta2", "cycle"},
    "output": {"directory", "formats", "stride"},
    "sweep": {"nu", "sizes", "solvers", "factors", "preconditioned"},
}

PRESET_DIR = Path(__file__).with_name("presets")


@dataclass
class SweepConfig:
    nu: list = field(default_factory=list)
    sizes: list = field(default_factory=list)
    solvers: list = field(default_factory=list)
    factors: list = field(default_factory=lambda: [1e-3, 1e-8])
    preconditioned: bool = False


@dataclass
class RunConfig:
    grid: GridSpec
    cp: CPConfig
    coupling_kind: str = "sincos"
    hbar_file: Optional[Path] = None
    output_dir: Path = Path("out")
    formats: tuple = ("csv",)
    stride: int = 8
    sweep: SweepConfig = field(default_factory=SweepConfig)
    source: Optional[str] = None

    def coupling(self, grid: Optional[GridSpec] = None) -> CouplingSpec:
        grid = grid or self.grid
        if self.coupling_kind == "sincos":
            return sincos_coupling(grid)
        if self.coupling_kind == "zero":
            return zero_coupling()
        hbar = np.loadtxt(self.hbar_file, ndmin=2)
        if hbar.shape != (grid.N_h, grid.N_h):
            raise ConfigError(
                f"coupling.hbar_file holds a {hbar.shape} table, expected {(grid.N_h, grid.N_h)}",
                ("coupling.hbar_file",),
            )
        return quadratic_coupling(hbar, name="table")

    def echo(self) -> dict:
        """Resolved configuration as nested plain values (for the run manifest)."""
        cp = dataclasses.asdict(self.cp)
        return {
            "grid": {k: getattr(self.grid, k) for k in ("N_h", "N_T", "T", "nu", "q")},
            "coupling": {"kind": self.coupling_kind, "hbar_file": str(self.hbar_file or "")},
            "solver": {k: cp[k] for k in SOLVER_KEYS},
            "multigrid": {
                "H": self.cp.mg_H,
                "levels": self.cp.mg_levels,
                "eta1": self.cp.eta1,
                "eta2": self.cp.eta2,
                "cycle": self.cp.cycle,
            },
            "output": {
                "directory": str(self.output_dir),
                "formats": ",".join(self.formats),
                "stride": self.stride,
            },
            "sweep": {
                "nu": ",".join(repr(v) for v in self.sweep.nu),
                "sizes": ",".join(f"{a}x{b}" for a, b in self.sweep.sizes),
                "solvers": ",".join(f"{a}:{b}" for a, b in self.sweep.solvers),
                "factors": ",".join(repr(v) for v in self.sweep.factors),
                "preconditioned": self.sweep.preconditioned,
            },
        }

    def to_ini(self) -> str:
        lines = []
        for section, values in self.echo().items():
            lines.append(f"[{section}]")
            for key, value in values.items():
                lines.append(f"{key} = {'' if value is None else _ini_value(value)}")
            lines.append("")
        return "\n".join(lines)


SOLVER_KEYS = (
    "gamma", "tau", "theta", "tol_cp", "max_iters", "linear_solver",
    "preconditioner", "lin_tol", "lin_maxit", "general_q",
)


def _ini_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _Reader:
    def __init__(self, parser: configparser.ConfigParser):
        self.p = parser

    def raw(self, section, key, default=None):
        if self.p.has_option(section, key):
            value = self.p.get(section, key).strip()
            return value if value != "" else default
        return default

    def number(self, section, key, default, kind=float):
        value = self.raw(section, key)
        if value is None:
            return default
        try:
            out = kind(value)
        except ValueError:
            raise ConfigError(
                f"{section}.{key}: expected {kind.__name__}, got {value!r}", (f"{section}.{key}",)
            ) from None
        if kind is float and not math.isfinite(out):
            raise ConfigError(f"{section}.{key}: must be finite", (f"{section}.{key}",))
        return out

    def boolean(self, section, key, default):
        value = self.raw(section, key)
        if value is None:
            return default
        try:
            return self.p.getboolean(section, key)
        except ValueError:
            raise ConfigError(
                f"{section}.{key}: expected a boolean, got {value!r}", (f"{section}.{key}",)
            ) from None

    def floats(self, section, key):
        value = self.raw(section, key)
        if value is None:
            return []
        try:
            return [float(x) for x in value.replace(";", ",").split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"{section}.{key}: expected a list of numbers", (f"{section}.{key}",)) from None


def _parse_sizes(text: Optional[str]) -> list:
    if not text:
        return []
    out = []
    for item in text.split(","):
        item = item.strip().lower()
        if not item:
            continue
        try:
            if "x" in item:
                a, b = item.split("x")
                out.append((int(a), int(b)))
            else:
                out.append((int(item), int(item)))
        except ValueError:
            raise ConfigError(f"sweep.sizes: cannot parse {item!r}", ("sweep.sizes",)) from None
    return out


def _parse_solvers(text: Optional[str]) -> list:
    if not text:
        return []
    out = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        solver, _, pc = item.partition(":")
        out.append((solver.strip(), (pc or "identity").strip()))
    return out


def load_config(path) -> RunConfig:
    """Parse and validate a config file (or ``preset:<name>``).

    All cross-field checks run here, before any large allocation. Raises
    :class:`ConfigError` naming the offending ``section.key`` fields.
    """
    text, base, source = _read_source(path)
    return parse_config(text, base=base, source=source)


def _read_source(path):
    path = str(path)
    if path.startswith("preset:"):
        name = path.split(":", 1)[1]
        preset = PRESET_DIR / f"{name}.ini"
        if not preset.is_file():
            names = sorted(p.stem for p in PRESET_DIR.glob("*.ini"))
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(names)}", ("preset",))
        return preset.read_text(), Path.cwd(), path
    p = Path(path)
    if p.suffix == ".json":
        import json

        manifest = json.loads(p.read_text())
        try:
            return manifest["config_ini"], p.parent, path
        except KeyError:
            raise ConfigError(f"{path} is not a run manifest (no config_ini entry)", ("config",)) from None
    return p.read_text(), p.parent, path


def parse_config(text: str, base: Path = Path("."), source: Optional[str] = None) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", ("config",)) from None
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", (section,))
        unknown = set(parser.options(section)) - SECTIONS[section]
        if unknown:
            keys = ", ".join(f"{section}.{k}" for k in sorted(unknown))
            raise ConfigError(f"unknown keys: {keys}", tuple(sorted(unknown)))
    r = _Reader(parser)

    N_h = r.number("grid", "n_h", None, int)
    N_T = r.number("grid", "n_t", None, int)
    if N_h is None or N_T is None:
        raise ConfigError("grid.N_h and grid.N_T are required", ("grid.N_h", "grid.N_T"))
    try:
        grid = GridSpec(
            N_h=N_h,
            N_T=N_T,
            T=r.number("grid", "t", 1.0),
            nu=r.number("grid", "nu", 0.5),
            q=r.number("grid", "q", 2.0),
        )
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}", ("grid",)) from None

    levels = r.number("multigrid", "levels", None, int)
    cp = CPConfig(
        gamma=r.number("solver", "gamma", 0.95),
        tau=r.number("solver", "tau", 0.95),
        theta=r.number("solver", "theta", 1.0),
        tol_cp=r.number("solver", "tol_cp", 1e-6),
        max_iters=r.number("solver", "max_iters", 500, int),
        linear_solver=r.raw("solver", "linear_solver", "bicgstab"),
        preconditioner=r.raw("solver", "preconditioner", "multigrid"),
        lin_tol=r.number("solver", "lin_tol", 1e-8),
        lin_maxit=r.number("solver", "lin_maxit", 500, int),
        mg_H=r.number("multigrid", "h", 2, int),
        mg_levels=levels,
        eta1=r.number("multigrid", "eta1", 2, int),
        eta2=r.number("multigrid", "eta2", 2, int),
        cycle=r.raw("multigrid", "cycle", "F"),
        general_q=r.boolean("solver", "general_q", False),
    )
    try:
        cp.validate()
    except ConfigError as exc:
        raise ConfigError(str(exc), tuple(f"solver.{f}" for f in exc.fields)) from None
    if cp.eta1 < 0 or cp.eta2 < 0:
        raise ConfigError("multigrid.eta1 and multigrid.eta2 must be >= 0", ("multigrid.eta1", "multigrid.eta2"))
    if grid.q != 2.0 and not cp.general_q:
        raise ConfigError("grid.q != 2 needs solver.general_q = true", ("grid.q", "solver.general_q"))

    kind = r.raw("coupling", "kind", "sincos")
    if kind not in ("sincos", "table", "zero"):
        raise ConfigError(f"coupling.kind must be sincos, table or zero, got {kind!r}", ("coupling.kind",))
    hbar_file = r.raw("coupling", "hbar_file")
    if kind == "table":
        if hbar_file is None:
            raise ConfigError("coupling.kind = table needs coupling.hbar_file", ("coupling.hbar_file",))
        hbar_file = (base / hbar_file).resolve()
        if not hbar_file.is_file():
            raise ConfigError(f"coupling.hbar_file not found: {hbar_file}", ("coupling.hbar_file",))
    else:
        hbar_file = None

    formats = tuple(
        f.strip() for f in (r.raw("output", "formats", "csv") or "csv").split(",") if f.strip()
    )
    bad = [f for f in formats if f not in ("csv", "raw")]
    if bad or not formats:
        raise ConfigError(f"output.formats must list csv and/or raw, got {formats}", ("output.formats",))
    stride = r.number("output", "stride", 8, int)
    if stride < 1:
        raise ConfigError(f"output.stride must be >= 1, got {stride}", ("output.stride",))
    outdir = Path(r.raw("output", "directory", "out"))
    if not outdir.is_absolute():
        outdir = (base / outdir).resolve()

    sweep = SweepConfig(
        nu=r.floats("sweep", "nu"),
        sizes=_parse_sizes(r.raw("sweep", "sizes")),
        solvers=_parse_solvers(r.raw("sweep", "solvers")),
        factors=r.floats("sweep", "factors") or [1e-3, 1e-8],
        preconditioned=r.boolean("sweep", "preconditioned", False),
    )
    if any(v <= 0 for v in sweep.nu):
        raise ConfigError("sweep.nu entries must be positive", ("sweep.nu",))
    if any(not 0 < f < 1 for f in sweep.factors):
        raise ConfigError("sweep.factors must lie in (0, 1)", ("sweep.factors",))
    for solver, pc in sweep.solvers:
        try:
            dataclasses.replace(cp, linear_solver=solver, preconditioner=pc).validate()
        except ConfigError as exc:
            raise ConfigError(f"sweep.solvers entry {solver}:{pc}: {exc}", ("sweep.solvers",)) from None

    cfg = RunConfig(
        grid=grid,
        cp=cp,
        coupling_kind=kind,
        hbar_file=hbar_file,
        output_dir=outdir,
        formats=formats,
        stride=stride,
        sweep=sweep,
        source=source,
    )
    if cp.linear_solver != "direct" and cp.preconditioner == "multigrid":
        check_multigrid_size(grid.N_h, cp, "grid.N_h")
    return cfg


def check_multigrid_size(N_h: int, cp: CPConfig, name: str) -> int:
    """Number of multigrid levels for ``N_h``; raises :class:`ConfigError` if none fits."""
    H = cp.mg_H
    if H < 2:
        raise ConfigError(f"multigrid.H must be >= 2, got {H}", ("multigrid.H",))
    ratio = N_h / H
    levels = cp.mg_levels
    if levels is None:
        levels = int(round(math.log2(ratio))) if ratio >= 1 else 0
    if levels < 1 or N_h != H * 2**levels:
        raise ConfigError(
            f"{name} = {N_h} must equal multigrid.H * 2**levels = {H} * 2**{levels} with levels >= 1",
            (name, "multigrid.H", "multigrid.levels"),
        )
    return levels
