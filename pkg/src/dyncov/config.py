"""JSON run configurations for the command-line interface.

Every command has its own schema. Unknown keys are rejected, and relative
paths are resolved against the directory of the configuration file.
"""

from __future__ import annotations

import copy
from pathlib import Path

import jsonschema

from .estimation import ConstraintConfig, FitOptions
from .exceptions import ConfigError
from .io import read_json
from .kernels import KernelKind, KernelSpec
from .simulation import INTERPOLANTS, WAVEFORM_KINDS
from .tuning import TuningGrid

_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_path = {"type": "string", "minLength": 1}
_seed = {"type": "integer", "minimum": 0, "maximum": 2**64 - 1}

KERNEL = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "kind": {"enum": [k.value for k in KernelKind]},
        "length_scale": _pos,
        "variance": _pos,
        "alpha": _pos,
    },
}

CONSTRAINTS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "K": _posint,
        "s": _posint,
        "gamma": _pos,
        "c": {"oneOf": [_pos, {"type": "null"}]},
        "delta": _pos,
        "kernel": KERNEL,
    },
}

OPTIONS = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "step_multiplier": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
        "epsilon_stop": _pos,
        "max_iter": _posint,
        "use_qr": {"type": "boolean"},
        "max_alt_iter": _posint,
        "proj_tol": _pos,
        "rng_seed": _seed,
    },
}

TRUTH = {
    "type": "object",
    "additionalProperties": False,
    "required": ["P", "K", "J", "block_size"],
    "properties": {
        "P": _posint,
        "K": _posint,
        "J": _posint,
        "block_size": _posint,
        "waveform": {"enum": list(WAVEFORM_KINDS)},
        "n_knots": {"type": "integer", "minimum": 2},
        "sigma": {"type": "number", "minimum": 0},
        "distinct_blocks": {"type": "boolean"},
        "interpolant": {"enum": list(INTERPOLANTS)},
        "weight_floor": {"type": "number", "minimum": 0},
    },
}

TWO_TASK = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "P": _posint,
        "K": {"type": "integer", "minimum": 2},
        "L": _posint,
        "baseline": {"type": "number", "minimum": 0},
        "active": {"type": "number", "minimum": 0},
        "sigma": {"type": "number", "minimum": 0},
    },
}

GRID = {
    "type": "object",
    "additionalProperties": False,
    "required": ["s_values", "K_values", "gamma_values", "l_values"],
    "properties": {
        "s_values": {"type": "array", "items": _posint, "minItems": 1},
        "K_values": {"type": "array", "items": _posint, "minItems": 1},
        "gamma_values": {"type": "array", "items": _pos, "minItems": 1},
        "l_values": {"type": "array", "items": _pos, "minItems": 1},
        "folds": {"type": "integer", "minimum": 2},
        "ridge": _pos,
        "sweep_stage1": {"type": "boolean"},
    },
}

WINDOWS = {
    "type": "object",
    "minProperties": 1,
    "additionalProperties": {
        "type": "array",
        "minItems": 1,
        "items": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 2, "maxItems": 2},
    },
}

GAMMA_MODE = {"enum": ["absolute", "reference"]}


def _command(name, properties, required):
    props = {"command": {"const": name}, "seed": _seed, "output_dir": _path, "threads": _posint}
    props.update(properties)
    return {"type": "object", "additionalProperties": False, "properties": props, "required": required}


SCHEMAS = {
    "simulate": _command(
        "simulate",
        {
            "N": _posint,
            "N_test": _posint,
            "format": {"enum": ["binary", "csv"]},
            "truth": TRUTH,
            "two_task": TWO_TASK,
            "kernel": KERNEL,
        },
        ["N"],
    ),
    "fit": _command(
        "fit",
        {
            "samples": _path,
            "constraints": CONSTRAINTS,
            "options": OPTIONS,
            "gamma_mode": GAMMA_MODE,
            "truth_dir": _path,
        },
        ["samples", "constraints"],
    ),
    "tune": _command(
        "tune",
        {
            "samples": _path,
            "grid": GRID,
            "constraints": CONSTRAINTS,
            "options": OPTIONS,
            "gamma_mode": GAMMA_MODE,
            "refit": {"type": "boolean"},
        },
        ["samples", "grid"],
    ),
    "evaluate": _command(
        "evaluate",
        {"estimate_dir": _path, "truth_dir": _path, "cutoff": _pos},
        ["estimate_dir", "truth_dir"],
    ),
    "classify": _command(
        "classify",
        {
            "train_samples": _path,
            "test_samples": _path,
            "windows": WINDOWS,
            "windows_file": _path,
            "estimate_dir": _path,
            "constraints": CONSTRAINTS,
            "options": OPTIONS,
            "gamma_mode": GAMMA_MODE,
        },
        ["train_samples", "test_samples"],
    ),
}

_PATH_KEYS = ("samples", "truth_dir", "estimate_dir", "train_samples", "test_samples", "windows_file", "output_dir")


def validate(cfg: dict, command: str) -> dict:
    if command not in SCHEMAS:
        raise ConfigError(f"unknown command {command!r}")
    try:
        jsonschema.validate(cfg, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid {command} config at {where}: {exc.message}") from exc
    if command == "simulate" and ("truth" in cfg) == ("two_task" in cfg):
        raise ConfigError("simulate config needs exactly one of 'truth' or 'two_task'")
    if command == "simulate" and "N_test" in cfg and "two_task" not in cfg:
        raise ConfigError("'N_test' only applies to the two_task design")
    if command == "classify":
        if ("windows" in cfg) == ("windows_file" in cfg):
            raise ConfigError("classify config needs exactly one of 'windows' or 'windows_file'")
        if "estimate_dir" not in cfg and "constraints" not in cfg:
            raise ConfigError("classify config needs 'estimate_dir' or 'constraints' to fit on the training set")
    if "constraints" in cfg and command in ("fit", "classify"):
        for key in ("K", "s", "gamma"):
            if key not in cfg["constraints"]:
                raise ConfigError(f"constraints.{key} is required for {command}")
    return cfg


def load(path, command: str) -> dict:
    """Read, validate and path-resolve a configuration file."""
    path = Path(path)
    try:
        raw = read_json(path)
    except Exception as exc:  # missing or malformed config is a config error, not a data error
        raise ConfigError(str(exc)) from exc
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    cfg = validate(copy.deepcopy(raw), command)
    base = path.resolve().parent
    for key in _PATH_KEYS:
        if key in cfg:
            cfg[key] = str((base / cfg[key]).resolve())
    return cfg


def kernel_spec(d: dict | None) -> KernelSpec:
    return KernelSpec(**(d or {}))


def constraint_config(d: dict, gamma_scale: float = 1.0) -> ConstraintConfig:
    d = dict(d)
    kernel = kernel_spec(d.pop("kernel", None))
    d["gamma"] = d["gamma"] * gamma_scale
    return ConstraintConfig(kernel=kernel, **d)


def fit_options(d: dict | None, use_qr: bool | None = None, seed: int | None = None) -> FitOptions:
    d = dict(d or {})
    if use_qr is not None:
        d["use_qr"] = use_qr
    if seed is not None:
        d["rng_seed"] = seed
    return FitOptions(**d)


def tuning_grid(d: dict, gamma_scale: float = 1.0) -> TuningGrid:
    d = dict(d)
    d["gamma_values"] = [g * gamma_scale for g in d["gamma_values"]]
    return TuningGrid(**d)
