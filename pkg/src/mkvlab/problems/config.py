"""Problem specifications from JSON documents.

Two shapes are accepted::

    {"kind": "lqcn", "preset": "LQCN-1", "params": {...overrides}, "initial": {...}}
    {"kind": "generic", "dims": {"n": 1, "d": 1, "ell": 1}, "horizon": 1.0,
     "control_box": {"lo": [-1], "hi": [1]},
     "drift": {"template": "linear", "state": 0.0, "mean": 0.0, "control": 1.0},
     "diffusion": {"template": "constant", "value": 0.5}, ...,
     "initial": {"type": "gaussian", "mean": [0], "std": [1]}}
"""
from __future__ import annotations

import jsonschema

from .spec import Dirac, Gaussian, ProblemSpec, Uniform, box
from . import templates as tp


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is a dotted path to the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


_num = {"type": "number"}
_numish = {"oneOf": [_num, {"type": "array"}]}
_vec = {"type": "array", "items": _num, "minItems": 1}

INITIAL_SCHEMA = {
    "type": "object",
    "oneOf": [
        {"properties": {"type": {"const": "gaussian"}, "mean": _vec, "std": _vec},
         "required": ["type", "mean", "std"], "additionalProperties": False},
        {"properties": {"type": {"const": "dirac"}, "point": _vec},
         "required": ["type", "point"], "additionalProperties": False},
        {"properties": {"type": {"const": "uniform"}, "lo": _vec, "hi": _vec},
         "required": ["type", "lo", "hi"], "additionalProperties": False},
    ],
}


def _template(names, params):
    return {"type": "object", "properties": {"template": {"enum": list(names)}, **{k: _numish for k in params}},
            "required": ["template"], "additionalProperties": False}


LQ_PARAMS = ("A", "Abar", "B", "Q", "Qbar", "R", "G", "Gbar", "sigma", "sigma0", "T")

PROBLEM_SCHEMA = {
    "type": "object",
    "oneOf": [
        {
            "properties": {
                "kind": {"const": "lqcn"},
                "preset": {"enum": ["LQCN-1", "LQCN-2"]},
                "params": {"type": "object", "properties": {k: _num for k in LQ_PARAMS},
                           "additionalProperties": False},
                "control_box": {"type": "object", "properties": {"lo": _num, "hi": _num},
                                "required": ["lo", "hi"], "additionalProperties": False},
                "ell": {"enum": [0, 1]},
                "initial": INITIAL_SCHEMA,
            },
            "required": ["kind", "preset"], "additionalProperties": False,
        },
        {
            "properties": {
                "kind": {"const": "generic"},
                "name": {"type": "string"},
                "dims": {"type": "object",
                         "properties": {k: {"type": "integer", "minimum": 0} for k in ("n", "d", "ell")},
                         "required": ["n", "d", "ell"], "additionalProperties": False},
                "horizon": {"type": "number", "exclusiveMinimum": 0},
                "objective": {"enum": ["maximize", "minimize"]},
                "control_box": {"type": "object", "properties": {"lo": _vec, "hi": _vec},
                                "required": ["lo", "hi"], "additionalProperties": False},
                "drift": _template(("constant", "linear"), ("value", "const", "state", "mean", "control")),
                "diffusion": _template(("constant", "linear"), ("value", "state")),
                "common_diffusion": _template(("constant", "linear"), ("value", "state")),
                "running": _template(("constant", "quadratic"),
                                     ("value", "const", "state", "mean", "control", "state_linear", "control_linear")),
                "terminal": _template(("constant", "quadratic"), ("value", "const", "state", "mean", "state_linear")),
                "initial": INITIAL_SCHEMA,
            },
            "required": ["kind", "dims", "horizon", "control_box", "drift", "diffusion", "common_diffusion",
                         "running", "terminal", "initial"],
            "additionalProperties": False,
        },
    ],
}


def _best_error(err: jsonschema.ValidationError) -> jsonschema.ValidationError:
    # descend into oneOf branches to the deepest (most specific) error
    # branches whose discriminator ("kind", "type", ...) fails are ignored
    subs = list(err.context or ())
    rejected = {e.relative_schema_path[0] for e in subs
                if e.validator == "const" or (e.validator == "enum" and "template" in e.relative_path)}
    kept = [e for e in subs if e.relative_schema_path[0] not in rejected]
    best = err
    for sub in kept or subs:
        cand = _best_error(sub)
        if len(cand.absolute_path) > len(best.absolute_path):
            best = cand
    return best


def check_schema(doc, schema, prefix: str = "") -> None:
    """Validate ``doc``; raises ConfigError naming the dotted field path."""
    v = jsonschema.Draft202012Validator(schema)
    errors = sorted(v.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if not errors:
        return
    err = _best_error(max(errors, key=jsonschema.exceptions.relevance))
    path = ".".join([prefix] * bool(prefix) + [str(p) for p in err.absolute_path])
    msg = err.message
    if err.validator == "additionalProperties":
        msg = f"unknown key(s): {msg}"
    raise ConfigError(path or prefix, msg)


def initial_from_json(d: dict, n: int, field: str = "initial"):
    kind = d["type"]
    try:
        if kind == "gaussian":
            law = Gaussian(tuple(d["mean"]), tuple(d["std"]))
            if any(s < 0 for s in d["std"]):
                raise ConfigError(f"{field}.std", "standard deviations must be nonnegative")
        elif kind == "dirac":
            law = Dirac(tuple(d["point"]))
        else:
            law = Uniform(tuple(d["lo"]), tuple(d["hi"]))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(field, str(exc)) from exc
    if law.n != n:
        raise ConfigError(field, f"initial law has dimension {law.n}, state dimension is {n}")
    return law


def _build(kind_map, d, field, *dims):
    t = d["template"]
    params = {k: v for k, v in d.items() if k != "template"}
    try:
        return kind_map[t](*dims, **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(field, f"bad parameters for {t!r} template: {exc}") from exc


def problem_from_json(doc: dict, field: str = "problem") -> ProblemSpec:
    check_schema(doc, PROBLEM_SCHEMA, field)
    if doc["kind"] == "lqcn":
        from ..lq_oracle import preset, to_problem
        try:
            lq = preset(doc["preset"], **doc.get("params", {}))
        except ValueError as exc:
            raise ConfigError(f"{field}.params", str(exc)) from exc
        cb = doc.get("control_box", {"lo": -10.0, "hi": 10.0})
        if not cb["lo"] < cb["hi"]:
            raise ConfigError(f"{field}.control_box", "lo must be below hi")
        init = initial_from_json(doc["initial"], 1, f"{field}.initial") if "initial" in doc else None
        ell = doc.get("ell", 1)
        if ell == 0 and lq.sigma0 != 0:
            raise ConfigError(f"{field}.ell", "ell = 0 requires sigma0 = 0")
        return to_problem(lq, initial=init, control_bounds=(cb["lo"], cb["hi"]), ell=ell, name=doc["preset"])
    dims = doc["dims"]
    n, d, ell = dims["n"], dims["d"], dims["ell"]
    if n < 1:
        raise ConfigError(f"{field}.dims.n", "state dimension must be at least 1")
    cb = doc["control_box"]
    if len(cb["lo"]) != len(cb["hi"]):
        raise ConfigError(f"{field}.control_box", "lo and hi differ in length")
    if any(lo > hi for lo, hi in zip(cb["lo"], cb["hi"])):
        raise ConfigError(f"{field}.control_box", "lo must not exceed hi")
    m = len(cb["lo"])
    drift = _build({"constant": lambda n, m, value=0.0: tp.constant_drift(value, n),
                    "linear": tp.linear_drift}, doc["drift"], f"{field}.drift", n, m)
    diff_map = {"constant": lambda n, k, value=0.0: tp.constant_diffusion(value, n, k), "linear": tp.linear_diffusion}
    diffusion = _build(diff_map, doc["diffusion"], f"{field}.diffusion", n, d)
    common = _build(diff_map, doc["common_diffusion"], f"{field}.common_diffusion", n, ell)
    running = _build({"constant": lambda n, m, value=0.0: tp.constant_reward(value, n, m),
                      "quadratic": tp.quadratic_reward}, doc["running"], f"{field}.running", n, m)
    terminal = _build({"constant": lambda n, value=0.0: tp.constant_terminal(value, n),
                       "quadratic": tp.quadratic_terminal}, doc["terminal"], f"{field}.terminal", n)
    return ProblemSpec(
        n=n, d=d, ell=ell, T=float(doc["horizon"]), control_box=box(cb["lo"], cb["hi"]),
        drift=drift, diffusion=diffusion, common_diffusion=common, running=running, terminal=terminal,
        initial=initial_from_json(doc["initial"], n, f"{field}.initial"),
        objective=doc.get("objective", "maximize"), name=doc.get("name", "generic"),
    )
