"""Run configuration: a flat, dotted key schema loaded from YAML.

Nested YAML mappings are flattened to dotted keys (``attractor.horizon``).
Model parameters live under ``model.param.<name>``.  Any key can be
overridden from the environment as ``RANDPERIODIC_<SECTION>__<KEY>``, e.g.
``RANDPERIODIC_ATTRACTOR__HORIZON=30``; values are parsed as YAML scalars.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Any, Mapping, Optional

import yaml

ENV_PREFIX = "RANDPERIODIC_"
STAGES = ("simulate", "attractor", "lyapunov", "curves", "verify")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


@dataclass(frozen=True)
class Key:
    kind: str  # int, float, str, bool, list, float?, int?
    default: Any
    doc: str


SCHEMA: dict[str, Key] = {
    "run.seed": Key("int", 0, "root seed; every path seed is derived from it"),
    "run.stages": Key("list", list(STAGES), "stages to execute, in dependency order"),
    "run.workers": Key("int", 1, "process pool size for independent pullbacks"),
    "model.name": Key("str", "a", "zoo entry name or label"),
    "model.steps_per_period": Key("int?", None, "grid steps per period; zoo default when null"),
    "simulate.horizon": Key("float", 4.0, "trajectory length in periods"),
    "simulate.s0": Key("float", 0.0, "initial circle coordinate"),
    "simulate.x0": Key("list", [1.0], "initial state"),
    "simulate.every": Key("int", 1, "record every k-th grid step"),
    "attractor.horizon": Key("float", 50.0, "pullback horizon T (whole periods)"),
    "attractor.box_lower": Key("list", [-2.0], "seed box lower corner"),
    "attractor.box_upper": Key("list", [2.0], "seed box upper corner"),
    "attractor.grid": Key("int", 4, "seed points per axis"),
    "attractor.nbins": Key("int", 256, "circle bins (1 / bin width)"),
    "attractor.tol_K": Key("float?", None, "convergence tolerance; 1e-3 x box diameter when null"),
    "lyapunov.horizon": Key("float", 200.0, "spectrum horizon in periods"),
    "lyapunov.qr_stride": Key("int", 10, "grid steps between QR factorisations"),
    "lyapunov.paths": Key("int", 8, "noise paths for the spectrum"),
    "lyapunov.cloud_paths": Key("int", 2, "paths with their own attractor for the extremal exponent"),
    "lyapunov.n_grid": Key("list", [16, 32, 64, 128], "periods n for Phi_n"),
    "lyapunov.bins": Key("int", 16, "bins sampled per cloud"),
    "lyapunov.per_bin": Key("int", 2, "points sampled per bin"),
    "lyapunov.lambda_prime": Key("float", -0.5, "semiuniform rate lambda'"),
    "lyapunov.lambda": Key("float?", None, "target rate lambda; max(0, lambda' + 1) when null"),
    "curves.strips": Key("int", 8, "strip count M"),
    "curves.gap": Key("float?", None, "cluster cut; tol_K when null"),
    "curves.jump_threshold": Key("float?", None, "continuation threshold; 10 x bin spread (>= tol_K) when null"),
    "curves.tol_match": Key("float?", None, "overlap match tolerance; 4 x continuity modulus when null"),
    "verify.k": Key("int", 1, "periods between the compared base points"),
    "verify.tol_period": Key("float?", None, "periodicity tolerance; 5 x tol_K when null"),
    "verify.shifts": Key("int", 2, "extra base shifts for the period invariance check"),
    "output.trajectory": Key("bool", False, "dump the simulate trajectory as CSV"),
}


def flatten(tree: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in tree.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(key: str, value, kind: str):
    optional = kind.endswith("?")
    base = kind.rstrip("?")
    if value is None:
        if optional:
            return None
        raise ConfigError(key, f"expected {base}, got null")
    if base == "bool":
        if isinstance(value, bool):
            return value
    elif base == "int":
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif base == "float":
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif base == "str":
        if isinstance(value, str):
            return value
    elif base == "list":
        if isinstance(value, (list, tuple)):
            return list(value)
    raise ConfigError(key, f"expected {base}, got {type(value).__name__} {value!r}")


def validate(flat: Mapping) -> dict:
    """Fill defaults, coerce types, reject unknown keys."""
    out = {}
    for key, value in flat.items():
        if key.startswith("model.param."):
            if isinstance(value, bool) or not isinstance(value, (int, float, str)):
                raise ConfigError(key, "model parameters must be numbers or strings")
            out[key] = value
            continue
        spec = SCHEMA.get(key)
        if spec is None:
            raise ConfigError(key, "unknown key")
        out[key] = _coerce(key, value, spec.kind)
    for key, spec in SCHEMA.items():
        out.setdefault(key, spec.default)
    bad = [s for s in out["run.stages"] if s not in STAGES]
    if bad:
        raise ConfigError("run.stages", f"unknown stages {bad}")
    if out["run.workers"] < 1:
        raise ConfigError("run.workers", "must be >= 1")
    if len(out["attractor.box_lower"]) != len(out["attractor.box_upper"]):
        raise ConfigError("attractor.box_upper", "box corners differ in dimension")
    return dict(sorted(out.items()))


def env_overrides(environ: Optional[Mapping] = None) -> dict:
    environ = os.environ if environ is None else environ
    known = {k.lower(): k for k in SCHEMA}
    out = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        key = name[len(ENV_PREFIX):].lower().replace("__", ".")
        out[known.get(key, key)] = yaml.safe_load(raw)
    return out


def load_config(path=None, overrides: Optional[Mapping] = None, environ: Optional[Mapping] = None) -> dict:
    """Config file, then environment, then explicit overrides; validated."""
    flat: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                tree = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError("--config", str(exc)) from exc
        except yaml.YAMLError as exc:
            raise ConfigError("--config", f"invalid YAML: {exc}") from exc
        if not isinstance(tree, Mapping):
            raise ConfigError("--config", "top level must be a mapping")
        flat.update(flatten(tree))
    flat.update(env_overrides(environ))
    flat.update(overrides or {})
    return validate(flat)


def model_params(cfg: Mapping) -> dict:
    params = {k[len("model.param."):]: v for k, v in cfg.items() if k.startswith("model.param.")}
    if cfg.get("model.steps_per_period") is not None:
        params["steps_per_period"] = cfg["model.steps_per_period"]
    return params
