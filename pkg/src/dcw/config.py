"""Run configuration: ``key = value`` text with sections, presets and the manifest writer.

Sections: [model], [run], plus one optional section per engine ([particles],
[pde], [cycle], [scan], [chaos]).  Floats are written with repr, so parsing a
manifest gives back exactly the configuration that produced it.
"""
from __future__ import annotations

import configparser
import math
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import ModelParams

ENGINES = ("particles", "ode", "pde", "cycle", "scan", "chaos")


class ConfigError(ValueError):
    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _float(text):
    return float(text)


def _int(text):
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _opt_float(text):
    return None if text.strip().lower() in ("", "auto", "none") else float(text)


def _opt_int(text):
    return None if text.strip().lower() in ("", "auto", "none") else _int(text)


def _float_list(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


def _int_list(text):
    return tuple(_int(v) for v in text.replace(",", " ").split())


def _str(text):
    return text.strip()


# section -> key -> (RunConfig field, parser)
SCHEMA = {
    "model": {
        "alpha": ("alpha", _float),
        "beta": ("beta", _float),
        "sigma": ("sigma", _float),
        "n_particles": ("n_particles", _int),
    },
    "run": {
        "engine": ("engine", _str),
        "lambda0": ("lambda0", _float),
        "m0": ("m0", _float),
        "horizon": ("horizon", _float),
        "cadence": ("cadence", _float),
        "seed": ("seed", _int),
        "out": ("out", _str),
    },
    "particles": {"keep_events": ("keep_events", _int)},
    "pde": {
        "half_width": ("half_width", _opt_float),
        "n_cells": ("n_cells", _opt_int),
        "dt": ("dt", _opt_float),
        "snapshots": ("snapshots", _float_list),
    },
    "ode": {"coords": ("coords", _str)},
    "cycle": {"y_start": ("y_start", _float), "y_cap": ("y_cap", _float)},
    "scan": {
        "beta_start": ("beta_start", _float),
        "beta_stop": ("beta_stop", _float),
        "beta_step": ("beta_step", _float),
        "workers": ("workers", _int),
    },
    "chaos": {
        "n_list": ("n_list", _int_list),
        "replicas": ("replicas", _int),
        "grid_step": ("grid_step", _float),
    },
}
REQUIRED = ("engine", "alpha", "beta", "sigma")


@dataclass(frozen=True)
class RunConfig:
    engine: str = "ode"
    alpha: float = math.nan
    beta: float = math.nan
    sigma: float = math.nan
    n_particles: int = 1000
    lambda0: float = 3.0
    m0: float = 0.0
    horizon: float = 10.0
    cadence: float = 0.01
    seed: int | None = None
    out: str = ""
    keep_events: int = 0
    half_width: float | None = None
    n_cells: int | None = None
    dt: float | None = None
    snapshots: tuple = ()
    coords: str = "macro"
    y_start: float = 0.01
    y_cap: float = 1e3
    beta_start: float = 2.0
    beta_stop: float = 3.0
    beta_step: float = 0.05
    workers: int = 1
    n_list: tuple = (250, 1000, 4000)
    replicas: int = 16
    grid_step: float = 0.002

    @property
    def params(self) -> ModelParams:
        return ModelParams(self.alpha, self.beta, self.sigma, self.n_particles)


# Named parameter sets: (alpha, beta, sigma, horizon).
_PRESET_PARAMS = {
    "fig5": (3.0, 1.0, 0.1, 10.0),
    "fig7": (3.0, 3.0, 0.1, 20.0),
    "fig9": (3.0, 1.0, 10.0, 10.0),
    "fig11": (3.0, 3.0, 10.0, 10.0),
}


def preset(name: str) -> dict:
    """Config values for a named preset; ``*-noiseless`` variants use sigma = 0 and the ODE engine."""
    base, _, suffix = name.partition("-")
    if base not in _PRESET_PARAMS or suffix not in ("", "noiseless"):
        raise ConfigError([f"unknown preset {name!r}; choose from "
                           + ", ".join(sorted(PRESETS))])
    alpha, beta, sigma, horizon = _PRESET_PARAMS[base]
    values = {"alpha": alpha, "beta": beta, "sigma": sigma, "lambda0": 3.0, "m0": 0.0,
              "horizon": horizon, "engine": "pde"}
    if suffix:
        values.update(sigma=0.0, engine="ode")
    return values


PRESETS = tuple(f"{b}{s}" for b in _PRESET_PARAMS for s in ("", "-noiseless"))


def _read_sections(text: str, errors: list) -> dict:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), delimiters=("=",),
                                       empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        errors.append(f"malformed config: {exc.message if hasattr(exc, 'message') else exc}")
        return {}
    return {s: dict(parser.items(s)) for s in parser.sections()}


def raw_values(text: str, errors: list) -> dict:
    """Field values found in ``text`` (parsed, not yet validated); problems go to ``errors``."""
    values = {}
    for section, items in _read_sections(text, errors).items():
        table = SCHEMA.get(section)
        if table is None:
            errors.append(f"unknown section [{section}]; expected one of " + ", ".join(SCHEMA))
            continue
        for key, text_value in items.items():
            if key not in table:
                errors.append(f"unknown key {key!r} in [{section}]; allowed: " + ", ".join(table))
                continue
            name, conv = table[key]
            try:
                values[name] = conv(text_value)
            except ValueError as exc:
                errors.append(f"[{section}] {key}: cannot parse {text_value!r} ({exc})")
    return values


def build_config(values: dict, errors: list | None = None) -> RunConfig:
    """Validate ``values`` (field name -> value) into a RunConfig, collecting every problem."""
    errors = [] if errors is None else errors
    values = dict(values)
    if values.get("engine") in ("ode", "cycle", "scan"):
        # noiseless engines: sigma plays no role, and a scan sweeps beta itself
        values.setdefault("sigma", 0.0)
    if values.get("engine") == "scan":
        values.setdefault("beta", values.get("beta_start", RunConfig.beta_start))
    for name in REQUIRED:
        if name not in values:
            errors.append(f"missing required key {name!r}")
    known = {f.name for f in fields(RunConfig)}
    cfg = RunConfig(**{k: v for k, v in values.items() if k in known})

    def check(cond, msg):
        if not cond:
            errors.append(msg)

    for name in ("alpha", "beta", "sigma", "lambda0", "m0", "horizon", "cadence", "y_start",
                 "y_cap", "beta_start", "beta_stop", "beta_step", "grid_step"):
        v = getattr(cfg, name)
        if name in values and not math.isfinite(v):
            errors.append(f"{name} must be a finite number, got {v}")
    for name in ("half_width", "dt"):
        v = getattr(cfg, name)
        if v is not None and not (math.isfinite(v) and v > 0):
            errors.append(f"{name} must be a positive finite number, got {v}")
    for name in ("alpha", "beta", "sigma"):
        v = getattr(cfg, name)
        if name in values and math.isfinite(v):
            check(v >= 0, f"{name} must be non-negative, got {v}")
    check(cfg.engine in ENGINES, f"engine must be one of {', '.join(ENGINES)}, got {cfg.engine!r}")
    check(cfg.n_particles >= 1, f"n_particles must be >= 1, got {cfg.n_particles}")
    check(-1.0 <= cfg.m0 <= 1.0, f"m0 must lie in [-1, 1], got {cfg.m0}")
    check(cfg.horizon > 0, f"horizon must be positive, got {cfg.horizon}")
    check(cfg.cadence > 0, f"cadence must be positive, got {cfg.cadence}")
    check(cfg.seed is None or cfg.seed >= 0, f"seed must be a non-negative integer, got {cfg.seed}")
    check(cfg.coords in ("macro", "lienard"), f"coords must be 'macro' or 'lienard', got {cfg.coords!r}")
    check(cfg.n_cells is None or (cfg.n_cells >= 64 and cfg.n_cells % 2 == 0),
          f"n_cells must be even and >= 64, got {cfg.n_cells}")
    check(cfg.workers >= 1, f"workers must be >= 1, got {cfg.workers}")
    check(cfg.replicas >= 1, f"replicas must be >= 1, got {cfg.replicas}")
    check(cfg.grid_step > 0, f"grid_step must be positive, got {cfg.grid_step}")
    check(cfg.beta_step > 0, f"beta_step must be positive, got {cfg.beta_step}")
    check(cfg.beta_start <= cfg.beta_stop, "beta_start must not exceed beta_stop")
    check(cfg.beta_start >= 0, f"beta_start must be non-negative, got {cfg.beta_start}")
    check(0 < cfg.y_start < cfg.y_cap, "need 0 < y_start < y_cap")
    check(all(t >= 0 for t in cfg.snapshots), "snapshot times must be non-negative")
    if cfg.engine == "pde" and cfg.sigma == 0:
        errors.append("sigma = 0 has no Fokker-Planck density to evolve; use engine = ode for the "
                      "noiseless dynamics")
    if cfg.engine == "chaos":
        ns = sorted(cfg.n_list)
        check(len(ns) >= 3 and ns[0] >= 1 and ns[-1] >= 10 * ns[0],
              "n_list needs at least 3 sizes spanning a decade")
    if cfg.engine in ("cycle", "scan") and "alpha" in values and not cfg.alpha > 0:
        errors.append(f"engine {cfg.engine} needs alpha > 0")
    if errors:
        raise ConfigError(errors)
    return cfg


def parse_config(text: str) -> RunConfig:
    errors: list = []
    values = raw_values(text, errors)
    return build_config(values, errors)


def resolve(cfg: RunConfig, env=None) -> RunConfig:
    """Fill the seed from DCW_SEED (else 0) and anchor ``out`` at DCW_OUT (else the cwd)."""
    env = os.environ if env is None else env
    seed = cfg.seed
    if seed is None:
        try:
            seed = _int(env.get("DCW_SEED", "0"))
        except ValueError:
            raise ConfigError([f"DCW_SEED must be an integer, got {env.get('DCW_SEED')!r}"])
        if seed < 0:
            raise ConfigError(["DCW_SEED must be non-negative"])
    root = Path(env.get("DCW_OUT", "."))
    out = Path(cfg.out or f"{cfg.engine}-run")
    if not out.is_absolute():
        out = root / out
    return replace(cfg, seed=seed, out=str(out.resolve()))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return " ".join(_fmt(v) for v in value)
    if value is None:
        return "auto"
    return str(value)


def to_text(cfg: RunConfig, header: str = "") -> str:
    """Render every field; ``parse_config(to_text(cfg)) == cfg``."""
    lines = [f"# {line}" for line in header.splitlines()]
    for section, table in SCHEMA.items():
        lines.append(f"[{section}]")
        for key, (name, _) in table.items():
            value = getattr(cfg, name)
            if name == "seed" and value is None:
                continue
            lines.append(f"{key} = {_fmt(value)}")
        lines.append("")
    return "\n".join(lines)
