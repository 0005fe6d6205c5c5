"""Scenario configuration files.

INI-style text with the sections ``[fluid]``, ``[solid]``, ``[model]``,
``[time]`` and the optional ``[solver]`` and ``[force]``.  Vector values are
whitespace separated.  Every key is checked: unknown keys, missing required
keys and malformed values raise :class:`ConfigError` naming the key and the
line it sits on.
"""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, replace
from pathlib import Path

from .coupling import DEFAULT_DEGREE
from .fem import BC_KINDS
from .saddle import BLOCK_TRI, PRECONDITIONERS
from .simulator import ANNULUS, BAR, FORCE_PROFILES, SOLID_KINDS, ForceSpec, Scenario, SolverSettings
from .solid import EXPONENTIAL, LINEAR


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    """Run options that do not change the physics."""

    config_path: str | None = None
    precond: str = BLOCK_TRI
    degree: int = DEFAULT_DEGREE
    out_dir: str = "out"
    stride: int = 25
    levels: int = 0

    def __post_init__(self):
        if self.precond not in PRECONDITIONERS:
            raise ValueError(f"unknown preconditioner {self.precond!r}; expected one of {PRECONDITIONERS}")
        if self.stride < 1:
            raise ValueError("snapshot stride must be at least 1")


_SIDES = ("bottom", "right", "top", "left")

# key -> (parser name, required)
_SCHEMA = {
    "fluid": {"n": ("int", True), "box": ("floats4", False), "nu": ("pos", True), "rho": ("pos", True),
              **{f"bc_{s}": ("bc", False) for s in _SIDES}},
    "solid": {"kind": ("kind", True), "resolution": ("ints2", True), "box": ("floats4", False),
              "radii": ("floats2", False), "stretch": ("pos", False)},
    "model": {"law": ("law", True), "kappa": ("pos", False), "gamma": ("pos", False), "eta": ("pos", False)},
    "time": {"dt": ("pos", True), "t_end": ("pos", True)},
    "solver": {"precond": ("precond", False), "tol": ("pos", False), "restart": ("int", False),
               "maxit": ("int", False), "newton_tol": ("pos", False), "newton_maxit": ("int", False),
               "quad_degree": ("int", False), "snapshot_stride": ("int", False)},
    "force": {"magnitude": ("float", False), "direction": ("floats2", False), "point": ("floats2", False),
              "profile": ("profile", False), "edge": ("str", False), "t_start": ("float", False),
              "t_end": ("float", False)},
}
_REQUIRED_SECTIONS = ("fluid", "solid", "model", "time")


def _line_of(text: str, section: str, key: str | None = None) -> int:
    current = None
    for no, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        m = re.match(r"\[(.+)\]$", s)
        if m:
            current = m.group(1).strip()
            if key is None and current == section:
                return no
            continue
        if current == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s, re.IGNORECASE):
            return no
    return 0


def _floats(raw, n=None):
    vals = tuple(float(v) for v in raw.replace(",", " ").split())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} numbers, got {len(vals)}")
    return vals


def _convert(kind: str, raw: str):
    raw = raw.strip()
    if kind == "int":
        v = int(raw)
        if v < 1:
            raise ValueError("must be a positive integer")
        return v
    if kind == "float":
        return float(raw)
    if kind == "pos":
        v = float(raw)
        if not v > 0:
            raise ValueError("must be positive")
        return v
    if kind == "floats2":
        return _floats(raw, 2)
    if kind == "floats4":
        return _floats(raw, 4)
    if kind == "ints2":
        vals = tuple(int(v) for v in raw.replace(",", " ").split())
        if len(vals) != 2 or min(vals) < 1:
            raise ValueError("expected two positive integers")
        return vals
    choices = {"bc": BC_KINDS, "kind": SOLID_KINDS, "law": (LINEAR, EXPONENTIAL), "precond": PRECONDITIONERS,
               "profile": FORCE_PROFILES}
    if kind in choices:
        if raw not in choices[kind]:
            raise ValueError(f"expected one of {', '.join(choices[kind])}")
        return raw
    return raw


def parse_config_text(text: str, name: str = "custom", path: str | None = None):
    """Parse configuration text into ``(Scenario, RunConfig)``."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed configuration: {exc}") from exc
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}] (line {_line_of(text, section)})")
        for key, raw in cp.items(section):
            line = _line_of(text, section, key)
            if key not in _SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}] (line {line})")
            try:
                values[section, key] = _convert(_SCHEMA[section][key][0], raw)
            except ValueError as exc:
                raise ConfigError(f"invalid value for {key!r} in [{section}] (line {line}): {exc}") from None
    for section in _REQUIRED_SECTIONS:
        if not cp.has_section(section):
            raise ConfigError(f"missing section [{section}]")
    for section, keys in _SCHEMA.items():
        for key, (_, required) in keys.items():
            if required and (section, key) not in values:
                raise ConfigError(f"missing required key {key!r} in [{section}] (line {_line_of(text, section)})")

    def get(section, key, default):
        return values.get((section, key), default)

    law = values["model", "law"]
    needed = ("kappa",) if law == LINEAR else ("gamma", "eta")
    for key in needed:
        if ("model", key) not in values:
            raise ConfigError(f"missing required key {key!r} for law {law!r} in [model] "
                              f"(line {_line_of(text, 'model')})")
    base = Scenario()
    kind = values["solid", "kind"]
    if kind == ANNULUS and ("solid", "box") in values:
        raise ConfigError(f"key 'box' does not apply to an annulus (line {_line_of(text, 'solid', 'box')})")
    if kind == BAR and ("solid", "radii") in values:
        raise ConfigError(f"key 'radii' does not apply to a bar (line {_line_of(text, 'solid', 'radii')})")
    fd = ForceSpec()
    force = ForceSpec(
        magnitude=get("force", "magnitude", fd.magnitude),
        direction=get("force", "direction", fd.direction),
        point=get("force", "point", fd.point),
        profile=get("force", "profile", fd.profile),
        edge=get("force", "edge", fd.edge),
        t_start=get("force", "t_start", fd.t_start),
        t_end=get("force", "t_end", fd.t_end),
    )
    sd = SolverSettings()
    solver = SolverSettings(
        tol=get("solver", "tol", sd.tol),
        restart=get("solver", "restart", sd.restart),
        maxit=get("solver", "maxit", sd.maxit),
        newton_tol=get("solver", "newton_tol", sd.newton_tol),
        newton_maxit=get("solver", "newton_maxit", sd.newton_maxit),
    )
    try:
        scenario = Scenario(
            name=name,
            fluid_n=values["fluid", "n"],
            fluid_box=get("fluid", "box", base.fluid_box),
            solid_kind=kind,
            solid_n=values["solid", "resolution"],
            bar_box=get("solid", "box", base.bar_box),
            annulus_radii=get("solid", "radii", base.annulus_radii),
            model=law,
            kappa=get("model", "kappa", base.kappa),
            gamma=get("model", "gamma", base.gamma),
            eta=get("model", "eta", base.eta),
            rho=values["fluid", "rho"],
            nu=values["fluid", "nu"],
            dt=values["time", "dt"],
            T=values["time", "t_end"],
            stretch=get("solid", "stretch", 1.0),
            bcs={s: get("fluid", f"bc_{s}", "noslip") for s in _SIDES},
            force=force,
            solver=solver,
        )
        run = RunConfig(
            config_path=path,
            precond=get("solver", "precond", BLOCK_TRI),
            degree=get("solver", "quad_degree", DEFAULT_DEGREE),
            stride=get("solver", "snapshot_stride", 25),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return scenario, run


def parse_config(path):
    """Read a configuration file; returns ``(Scenario, RunConfig)``."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {p}: {exc}") from exc
    return parse_config_text(text, name=p.stem, path=str(p))


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return " ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(scenario: Scenario, run: RunConfig | None = None) -> str:
    """Inverse of :func:`parse_config_text` (the name travels in the file name)."""
    run = run or RunConfig()
    s = scenario
    sections = {
        "fluid": {"n": s.fluid_n, "box": s.fluid_box, "nu": s.nu, "rho": s.rho,
                  **{f"bc_{side}": s.bcs.get(side, "noslip") for side in _SIDES}},
        "solid": {"kind": s.solid_kind, "resolution": s.solid_n, "stretch": s.stretch},
        "model": {"law": s.model},
        "time": {"dt": s.dt, "t_end": s.T},
        "solver": {"precond": run.precond, "tol": s.solver.tol, "restart": s.solver.restart,
                   "maxit": s.solver.maxit, "newton_tol": s.solver.newton_tol,
                   "newton_maxit": s.solver.newton_maxit, "quad_degree": run.degree,
                   "snapshot_stride": run.stride},
        "force": {"magnitude": s.force.magnitude, "direction": s.force.direction, "point": s.force.point,
                  "profile": s.force.profile, "edge": s.force.edge, "t_start": s.force.t_start,
                  "t_end": s.force.t_end},
    }
    if s.solid_kind == BAR:
        sections["solid"]["box"] = s.bar_box
    else:
        sections["solid"]["radii"] = s.annulus_radii
    if s.model == LINEAR:
        sections["model"]["kappa"] = s.kappa
    else:
        sections["model"].update(gamma=s.gamma, eta=s.eta)
    lines = []
    for name, items in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in items.items())
        lines.append("")
    return "\n".join(lines)


def write_config(scenario: Scenario, path, run: RunConfig | None = None) -> None:
    Path(path).write_text(format_config(scenario, run))


def with_name(scenario: Scenario, name: str) -> Scenario:
    return replace(scenario, name=name)
