"""Run configuration: one JSON document validated against a fixed schema.

Every object in the schema closes its key set, so misspelled or unknown keys
are rejected instead of silently ignored.  :func:`load_config` fills defaults
and returns a plain dict.
"""

import copy
import json
from pathlib import Path

import jsonschema

from .errors import ConfigError

__all__ = ["SCHEMA", "DEFAULTS", "load_config", "validate_config", "merge_defaults"]


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_INT1 = {"type": "integer", "minimum": 1}
_PAIR = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}
_BOX = {"type": "array", "items": _PAIR, "minItems": 2, "maxItems": 2}
_UPS = {"oneOf": [{"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                  {"type": "string", "pattern": r"^\s*1\s*-\s*[0-9.eE+-]+\s*$"}]}
_KINDS = {"enum": ["port", "skeleton", "full_interface", "full_subdomain"]}
_ENERGY = {"enum": ["sigma", "sigma2"]}
_CONSTRAINT = {"oneOf": [{"const": "strong"}, _INT1]}

SCHEMA = _obj({
    "seed": {"type": "integer", "minimum": 0},
    "mu": _PAIR,
    "problem": _obj({
        "problem": {"enum": ["heat", "burgers"]},
        "nx": _INT1, "ny": _INT1,
        "domain_box": _BOX,
        "param_domain": _BOX,
        "constants": _obj({"amplitude": _NUM, "nu": _POS, "x10": _NUM, "a3": _NUM, "a4": _NUM, "a5": _NUM}),
    }, required=["problem"]),
    "decomposition": _obj({"split": {"type": "array", "items": _INT1, "minItems": 2, "maxItems": 2}}),
    "newton": _obj({"tol": _POS, "max_iters": _INT1}),
    "training": _obj({
        "mode": {"enum": ["top_down", "bottom_up"]},
        "grid": {"type": "array", "items": _INT1, "minItems": 2, "maxItems": 2},
        "n_samples": _INT1,
        "eta": _POS,
        "mu_train": {"oneOf": [_PAIR, {"type": "array", "items": _PAIR, "minItems": 1}]},
        "workers": _INT1,
    }),
    "bases": _obj({"kind": _KINDS, "upsilon_int": _UPS, "upsilon_bnd": _UPS, "energy": _ENERGY}),
    "residual_bases": _obj({"upsilon": _UPS, "energy": _ENERGY}),
    "hyper": _obj({
        "scheme": {"enum": ["identity", "collocation", "gappy"]},
        "ratio": {"type": "number", "minimum": 1},
        "corner_mode": {"enum": ["interface", "corner", "none"]},
        "n_w": {"oneOf": [_INT1, {"type": "null"}]},
    }),
    "constraints": _obj({
        "mode": {"enum": ["strong", "weak"]},
        "n_c": {"oneOf": [_INT1, {"type": "array", "items": _INT1, "minItems": 1}]},
        "pairs": {"enum": ["chain", "all"]},
    }),
    "solver": _obj({"tol": _POS, "max_iters": _INT1}),
    "study": _obj({
        "basis_kinds": {"type": "array", "items": _KINDS, "minItems": 1},
        "constraints": {"type": "array", "items": _CONSTRAINT, "minItems": 1},
        "upsilon_state": {"type": "array", "items": _UPS, "minItems": 1},
        "upsilon_bnd": {"type": "array", "items": {"oneOf": [_UPS, {"type": "null"}]}, "minItems": 1},
        "upsilon_res": {"type": "array", "items": _UPS, "minItems": 1},
        "ratios": {"type": "array", "items": {"type": "number", "minimum": 1}, "minItems": 1},
        "methods": {"type": "array", "items": {"enum": ["DDLSPG", "DDGNAT", "Collocation"]}, "minItems": 1},
        "n_weak_seeds": _INT1,
        "timing_repeats": _INT1,
        "workers": _INT1,
    }),
    "paths": _obj({"snapshots": {"type": "string"}, "bases": {"type": "string"},
                   "hyper": {"type": "string"}, "study": {"type": "string"}}),
}, required=["problem"])

DEFAULTS = {
    "seed": 0,
    "decomposition": {"split": [2, 2]},
    "newton": {"tol": 1e-10, "max_iters": 50},
    "training": {"mode": "top_down", "grid": [20, 20], "n_samples": 200, "eta": 2.0,
                 "mu_train": [5.0, 5.0], "workers": 1},
    "bases": {"kind": "port", "upsilon_int": 1e-5, "energy": "sigma"},
    "residual_bases": {"upsilon": 1e-12, "energy": "sigma"},
    "hyper": {"scheme": "identity", "ratio": 2.0, "corner_mode": "interface", "n_w": None},
    "constraints": {"mode": "strong", "n_c": 1, "pairs": "chain"},
    "solver": {"tol": 1e-8, "max_iters": 50},
    "study": {"basis_kinds": ["port", "skeleton", "full_interface", "full_subdomain"],
              "constraints": ["strong", 1, 2, 3, 4, 5], "upsilon_state": [1e-5], "upsilon_bnd": [None],
              "upsilon_res": [1e-12], "ratios": [1.0, 1.5, 2.0, 4.0],
              "methods": ["DDLSPG", "DDGNAT", "Collocation"], "n_weak_seeds": 5,
              "timing_repeats": 1, "workers": 1},
    "paths": {},
}


def validate_config(cfg):
    """Raise :class:`ConfigError` unless ``cfg`` satisfies :data:`SCHEMA`."""
    try:
        jsonschema.validate(cfg, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc
    box = cfg["problem"].get("param_domain")
    if box is not None and any(lo > hi for lo, hi in box):
        raise ConfigError("config error at problem/param_domain: lower bound above upper bound")
    return cfg


def merge_defaults(cfg):
    """Return a copy of ``cfg`` with every section filled from :data:`DEFAULTS`."""
    out = copy.deepcopy(DEFAULTS)
    for key, val in cfg.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key].update(copy.deepcopy(val))
        else:
            out[key] = copy.deepcopy(val)
    if out["problem"]["problem"] == "burgers" and "decomposition" not in cfg:
        out["decomposition"] = {"split": [4, 2]}
    return out


def load_config(path=None, text=None, seed=None):
    """Read, validate and complete a configuration.

    Exactly one of ``path`` or ``text`` is used.  ``seed`` (when not ``None``)
    overrides the document's ``seed``.
    """
    try:
        if text is None:
            if path is None:
                raise ConfigError("no configuration given")
            text = Path(path).read_text()
        cfg = json.loads(text)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    validate_config(cfg)
    out = merge_defaults(cfg)
    if seed is not None:
        if seed < 0 or seed >= 2 ** 64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        out["seed"] = int(seed)
    return out
