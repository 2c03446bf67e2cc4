"""Declarative run configuration (INI sections parsed with :mod:`configparser`)."""
from __future__ import annotations

import configparser
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from .expr import ExpressionError, parse as parse_expr


class ConfigError(ValueError):
    """Schema violation; ``line`` is 1-based when the offending key is located."""

    def __init__(self, msg: str, section: str | None = None, key: str | None = None,
                 line: int | None = None):
        where = ""
        if line is not None:
            where += f"line {line}: "
        if section is not None:
            where += f"[{section}]" + (f" {key}: " if key else ": ")
        super().__init__(where + msg)
        self.section, self.key, self.line = section, key, line


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in re.split(r"[,\s]+", text.strip()) if v)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in re.split(r"[,\s]+", text.strip()) if v)


def _words(text: str) -> tuple[str, ...]:
    return tuple(v for v in re.split(r"[,\s]+", text.strip()) if v)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_float(text: str) -> float | None:
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _atoms(text: str) -> tuple[tuple[tuple[float, ...], float], ...]:
    """``loc:weight`` items separated by ``;``; 2D locations as ``x,y:w``."""
    out = []
    for item in text.split(";"):
        item = item.strip()
        if not item:
            continue
        loc, _, w = item.partition(":")
        out.append((_floats(loc), float(w) if w else 1.0))
    if not out:
        raise ValueError("no atoms given")
    return tuple(out)


def _weights_list(text: str) -> tuple[tuple[float, ...], ...]:
    """Mixture weight vectors separated by ``;``, entries by ``/``."""
    return tuple(tuple(float(v) for v in grp.split("/")) for grp in text.split(";") if grp.strip())


def _domain(text: str) -> tuple[tuple[float, float], ...] | None:
    if text.strip().lower() in ("", "auto", "none"):
        return None
    out = []
    for grp in text.split(";"):
        lo, hi = _floats(grp)
        out.append((lo, hi))
    return tuple(out)


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {t!r}")
        return t
    return parse


def _strategies(text: str) -> tuple[str, ...]:
    from .family import STRATEGIES
    out = _words(text)
    for s in out:
        if s not in STRATEGIES:
            raise ValueError(f"unknown strategy {s!r}; valid: {', '.join(STRATEGIES)}")
    if not out:
        raise ValueError("at least one strategy is required")
    return out


def _stages(text: str) -> tuple[str, ...]:
    out = _words(text)
    for s in out:
        if s not in STAGES:
            raise ValueError(f"unknown stage {s!r}; valid: {', '.join(STAGES)}")
    return out


STAGES = ("validate", "generate", "select", "assemble", "flow", "probe", "particles")

# section -> key -> (parser, default text, description)
SCHEMA: dict[str, dict[str, tuple[Callable[[str], Any], str, str]]] = {
    "problem": {
        "preset": (_choice("heat", "zero", "sqrt_branch", "ou_tanh", "custom"), "heat",
                   "preset name, or custom to use the a/b expressions"),
        "a": (str, "1", "custom diffusion: scalar or [[..],[..]] expression in t, x, y"),
        "b": (str, "0", "custom drift: scalar (1D) or [.., ..] expression"),
        "dimension": (int, "1", "custom problem dimension (1 or 2)"),
        "horizon": (float, "1.0", "custom problem horizon T"),
        "domain": (_domain, "auto", "custom domain box 'lo,hi' per axis separated by ';'"),
    },
    "time": {
        "step": (float, "0.001", "spacing of the global time grid shared by all curves"),
        "checkpoints": (_floats, "0, 0.25, 0.5, 0.75, 1",
                        "checkpoint times Q (must lie on the time grid)"),
    },
    "solver": {
        "dt": (float, "1e-4", "largest substep of the forward solver"),
        "dx": (float, "0.02", "grid spacing (grid problems)"),
    },
    "initial": {
        "s": (float, "0", "start time (a checkpoint)"),
        "measure": (_choice("dirac", "normal", "atoms"), "dirac", "initial datum kind"),
        "location": (_floats, "0", "dirac location"),
        "mean": (_floats, "0", "normal mean"),
        "var": (float, "1", "normal variance (discretized on the solver grid)"),
        "atoms": (_atoms, "0:1", "atoms as 'loc:weight; loc:weight'"),
    },
    "candidates": {
        "strategies": (_strategies, "solver_single",
                       "ordered strategies: branching_catalog, mollification_ladder, "
                       "mixture_hull, solver_single"),
        "admission_tolerance": (float, "1e-4", "largest admitted weak residual"),
        "branch_times": (_floats, "", "branch times (default: the checkpoints)"),
        "ladder_eps": (_floats, "1e-7, 1e-8, 1e-9", "mollification widths"),
        "ladder_shifts": (_ints, "-1, 0, 1", "mollifier shifts in units of the width"),
        "mixture_weights": (_weights_list, "0.5/0.5", "mixture weight vectors, ';'-separated"),
    },
    "selection": {
        "family": (_choice("default"), "default", "selection family"),
        "first": (str, "", "optional 'function_id@time' moved to the front of the enumeration"),
        "tie_tol": (_opt_float, "auto", "tie tolerance (auto: 1e-9 atoms, 1e-6 grids)"),
    },
    "flow": {
        "strategies": (_strategies, "solver_single", "strategies used for flow entries"),
        "tol": (_opt_float, "auto", "flow W1 tolerance (auto: 2 x admission tolerance)"),
    },
    "probe": {
        "strategies": (_strategies, "solver_single", "strategies used by the probe"),
    },
    "particles": {
        "n": (int, "100000", "number of particles"),
        "dt": (float, "0.01", "Euler-Maruyama step"),
        "seed": (int, "1", "particle seed (overridden by --seed)"),
        "windows": (int, "4", "quantile windows of the martingale test"),
        "phi": (_words, "tanh[1;0]", "martingale test functions (ids)"),
        "w1_tol": (float, "0.02", "particle vs solver W1 tolerance per checkpoint"),
    },
    "run": {
        "stages": (_stages, "validate, generate, select, assemble, flow, probe",
                   "pipeline stages to execute, in pipeline order"),
        "workers": (int, "1", "worker threads for per-start selections and ladder rungs"),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict[str, Any]]
    source: str = "<string>"

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def to_dict(self) -> dict:
        return {s: {k: _jsonable(v) for k, v in kv.items()} for s, kv in self.values.items()}


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    return v


def _line_of(text: str, section: str | None, key: str | None) -> int | None:
    cur = None
    for n, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            cur = m.group(1).strip()
            if key is None and cur == section:
                return n
            continue
        if key is not None and cur == section:
            k = re.split(r"[=:]", line, 1)[0].strip().lower()
            if k == key:
                return n
    return None


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse: {exc}", line=getattr(exc, "lineno", None)) from None
    values: dict[str, dict[str, Any]] = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section; valid: {', '.join(SCHEMA)}", section,
                              line=_line_of(text, section, None))
        for key in cp[section]:
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key; valid: {', '.join(SCHEMA[section])}", section,
                                  key, _line_of(text, section, key))
    for section, keys in SCHEMA.items():
        values[section] = {}
        for key, (parser, default, _) in keys.items():
            raw = cp.get(section, key, fallback=default) if cp.has_section(section) else default
            try:
                values[section][key] = parser(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigError(str(exc), section, key, _line_of(text, section, key)) from None
    pr = values["problem"]
    if pr["preset"] == "custom":
        for key in ("a", "b"):
            try:
                parse_expr(pr[key], pr["dimension"])
            except ExpressionError as exc:
                raise ConfigError(str(exc), "problem", key, _line_of(text, "problem", key)) from None
    return RunConfig(values, source)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def schema_text() -> str:
    """Commented INI listing every section, key, default and meaning."""
    lines = []
    for section, keys in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (_, default, doc) in keys.items():
            lines.append(f"# {doc}")
            lines.append(f"{key} = {default}")
        lines.append("")
    return "\n".join(lines)


def bundled_config(name: str) -> Path:
    return Path(__file__).parent / "configs" / f"{name}.cfg"
