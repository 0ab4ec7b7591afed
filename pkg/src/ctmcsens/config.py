"""JSON model files and experiment configs: schemas, loading and diagnostics.

Model file
----------
A model file describes species, named parameters and reactions::

    {
      "name": "birth_death",
      "species": ["A"],
      "parameters": ["theta1", "theta2"],
      "reactions": [
        {"name": "birth", "reactants": {}, "products": {"A": 1},
         "kind": "mass_action", "rate": "theta1"},
        {"name": "death", "reactants": {"A": 1}, "products": {},
         "kind": "mass_action", "rate": "theta2"}
      ],
      "exempt": ["death"],
      "observable": {"kind": "terminal", "species": "A"},
      "default_set": "default",
      "parameter_sets": {
        "default": {"theta": [10.0, 0.5], "initial_state": {"A": 0}, "time": 5.0}
      }
    }

Michaelis-Menten reactions use ``"kind": "michaelis_menten"`` with ``vmax``,
``km`` (parameter names) and ``substrate`` (a species name).  ``exempt`` lists
reactions (by name or 1-based number) allowed to keep a zero rate in the
approximate process.  A parameter set may override the model's observable.

Observables
-----------
``{"kind": "terminal", "species": "A"}`` is the count of ``A`` at the final
time.  ``{"kind": "integral", "species": "A", "window": [a, b]}`` integrates
the count over ``[a, b]``.  ``{"kind": "flux", "reaction": "name"}``
integrates that reaction's rate.  The window defaults to ``[0, time]``.
``terms`` (a list of ``{"coeff": c, "powers": {"A": 2}}``) may replace
``species`` to give a polynomial.

Experiment config
-----------------
See :data:`EXPERIMENT_SCHEMA`.  ``model`` is a builtin name, a path to a
model file or an inline model object.  Parameters are numbered from 1.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path as FsPath

import jsonschema
import numpy as np

from .model import (
    DEFAULT_BIG_M,
    DEFAULT_DELTA,
    ConfigurationError,
    MassAction,
    MichaelisMenten,
    ReactionNetwork,
    network_from_reactions,
)
from .sim import Functional, Polynomial, flux_functional, integral_functional, terminal_functional

_NAME = {"type": "string", "minLength": 1}
_STOICH = {"type": "object", "additionalProperties": {"type": "integer", "minimum": 0}}

OBSERVABLE_SCHEMA = {
    "type": "object",
    "required": ["kind"],
    "properties": {
        "kind": {"enum": ["terminal", "integral", "flux"]},
        "species": _NAME,
        "terms": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["coeff", "powers"],
                "properties": {"coeff": {"type": "number"}, "powers": _STOICH},
                "additionalProperties": False,
            },
        },
        "reaction": _NAME,
        "window": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2,
                   "maxItems": 2},
    },
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"kind": {"const": "flux"}}},
         "then": {"required": ["reaction"]},
         "else": {"oneOf": [{"required": ["species"]}, {"required": ["terms"]}]}},
    ],
}

MODEL_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["name", "species", "parameters", "reactions", "parameter_sets"],
    "properties": {
        "name": _NAME,
        "description": {"type": "string"},
        "species": {"type": "array", "items": _NAME, "minItems": 1, "uniqueItems": True},
        "parameters": {"type": "array", "items": _NAME, "minItems": 1, "uniqueItems": True},
        "reactions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["reactants", "products", "kind"],
                "properties": {
                    "name": _NAME,
                    "reactants": _STOICH,
                    "products": _STOICH,
                    "kind": {"enum": ["mass_action", "michaelis_menten"]},
                    "rate": _NAME,
                    "vmax": _NAME,
                    "km": _NAME,
                    "substrate": _NAME,
                },
                "additionalProperties": False,
                "allOf": [
                    {"if": {"properties": {"kind": {"const": "mass_action"}}},
                     "then": {"required": ["rate"]},
                     "else": {"required": ["vmax", "km", "substrate"]}},
                ],
            },
        },
        "exempt": {"type": "array", "items": {"anyOf": [_NAME, {"type": "integer", "minimum": 1}]}},
        "observable": OBSERVABLE_SCHEMA,
        "default_set": _NAME,
        "parameter_sets": {
            "type": "object",
            "minProperties": 1,
            "additionalProperties": {
                "type": "object",
                "required": ["theta", "initial_state", "time"],
                "properties": {
                    "theta": {"type": "array", "items": {"type": "number", "minimum": 0}},
                    "initial_state": {"type": "object",
                                      "additionalProperties": {"type": "integer"}},
                    "time": {"type": "number", "minimum": 0},
                    "observable": OBSERVABLE_SCHEMA,
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}

METHODS = ("lr", "lr_cv", "gs_pathwise", "rpd_pathwise", "gs_hybrid", "rpd_hybrid", "cfd", "oracle")

EXPERIMENT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["model", "method"],
    "properties": {
        "model": {"anyOf": [_NAME, {"type": "object"}]},
        "parameter_set": _NAME,
        "method": {"enum": list(METHODS)},
        "observable": OBSERVABLE_SCHEMA,
        "params": {"anyOf": [{"const": "all"},
                             {"type": "array", "items": {"type": "integer", "minimum": 1},
                              "minItems": 1}]},
        "time": {"type": "number", "minimum": 0},
        "window": {"type": "number", "exclusiveMinimum": 0},
        "fd_step": {"type": "number", "exclusiveMinimum": 0},
        "delta": {"anyOf": [{"type": "number", "exclusiveMinimum": 0},
                            {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}}]},
        "big_m": {"type": "number", "exclusiveMinimum": 0},
        "exempt": {"type": "array", "items": {"anyOf": [_NAME, {"type": "integer", "minimum": 1}]}},
        "paths": {"type": "integer", "minimum": 2},
        "target_halfwidth": {"type": "number", "exclusiveMinimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "workers": {"type": "integer", "minimum": 1},
        "pilot": {"type": "integer", "minimum": 2},
        "alloc_param": {"type": "integer", "minimum": 1},
        "cost": {"enum": ["work", "cpu"]},
        "timing": {"type": "boolean"},
        "out": {"type": "string"},
        "dump_paths": {"type": "integer", "minimum": 0},
        "max_jumps": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
    "not": {"required": ["paths", "target_halfwidth"]},
    "allOf": [
        {"if": {"properties": {"method": {"enum": ["rpd_pathwise", "rpd_hybrid"]}}},
         "then": {"required": ["window"]}},
        {"if": {"properties": {"method": {"const": "cfd"}}},
         "then": {"required": ["fd_step"]}},
    ],
}


class ConfigError(ConfigurationError):
    """Invalid config file; ``line`` points into the source text when known."""

    def __init__(self, msg: str, source: str = "<config>", line: int | None = None):
        self.source = source
        self.line = line
        loc = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(loc + msg)


# -- locating JSON paths in source text ---------------------------------------------------

_WS = " \t\n\r"


def _skip(text, i):
    while i < len(text) and text[i] in _WS:
        i += 1
    return i


def _positions(text: str) -> dict:
    """Map every JSON path (a tuple of keys and indices) to its offset in ``text``."""
    dec = json.JSONDecoder()
    out = {}

    def value(i, path):
        i = _skip(text, i)
        out[path] = i
        c = text[i]
        if c == "{":
            i = _skip(text, i + 1)
            if text[i] == "}":
                return i + 1
            while True:
                key, i = json.decoder.scanstring(text, _skip(text, i) + 1)
                i = _skip(text, i) + 1  # colon
                i = _skip(text, value(i, path + (key,)))
                if text[i] == "}":
                    return i + 1
                i += 1
        if c == "[":
            i = _skip(text, i + 1)
            if text[i] == "]":
                return i + 1
            n = 0
            while True:
                i = _skip(text, value(i, path + (n,)))
                n += 1
                if text[i] == "]":
                    return i + 1
                i += 1
        _, end = dec.raw_decode(text, i)
        return end

    value(0, ())
    return out


def line_of(text: str, path) -> int:
    """1-based line of the deepest prefix of ``path`` present in ``text``."""
    pos = _positions(text)
    path = tuple(path)
    while path not in pos:
        path = path[:-1]
    return text.count("\n", 0, pos[path]) + 1


def parse_json(text: str, schema: dict, source: str = "<config>") -> dict:
    """Parse and validate; errors name the source line."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg}", source, e.lineno) from None
    validate(doc, schema, source, text)
    return doc


def validate(doc, schema: dict, source: str = "<config>", text: str | None = None):
    v = jsonschema.Draft202012Validator(schema)
    errors = sorted(v.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if not errors:
        return
    err = jsonschema.exceptions.best_match(errors)
    where = "/".join(str(p) for p in err.absolute_path) or "(root)"
    line = line_of(text, err.absolute_path) if text is not None else None
    raise ConfigError(f"at {where}: {err.message}", source, line)


# -- models -------------------------------------------------------------------------------


@dataclass
class ParameterSet:
    theta: np.ndarray
    x0: np.ndarray
    time: float
    observable: dict


@dataclass
class ModelSpec:
    """A loaded model: network, exempt reactions and named parameter sets."""

    name: str
    net: ReactionNetwork
    exempt: tuple[int, ...]
    parameter_sets: dict
    default_set: str
    doc: dict = field(repr=False, default_factory=dict)

    def parameter_set(self, name: str | None = None) -> ParameterSet:
        name = name or self.default_set
        if name not in self.parameter_sets:
            raise ConfigError(f"model {self.name!r} has no parameter set {name!r} "
                              f"(available: {', '.join(self.parameter_sets)})")
        return self.parameter_sets[name]


def builtin_models() -> list[str]:
    files = resources.files("ctmcsens") / "models"
    return sorted(p.name[:-5] for p in files.iterdir() if p.name.endswith(".json"))


def _builtin_text(name: str) -> str | None:
    key = name.replace("-", "_")
    if key not in builtin_models():
        return None
    return (resources.files("ctmcsens") / "models" / f"{key}.json").read_text()


def reaction_index(net: ReactionNetwork, ref) -> int:
    """0-based index of a reaction given by name or by 1-based number."""
    if isinstance(ref, (int, np.integer)):
        if not 1 <= ref <= net.num_reactions:
            raise ConfigError(f"reaction number {ref} out of range 1..{net.num_reactions}")
        return int(ref) - 1
    names = [r.name for r in net.reactions]
    if ref not in names:
        raise ConfigError(f"unknown reaction {ref!r}")
    return names.index(ref)


def model_from_dict(doc: dict, source: str = "<model>", text: str | None = None) -> ModelSpec:
    validate(doc, MODEL_SCHEMA, source, text)
    species = doc["species"]
    pnames = doc["parameters"]

    def pidx(name, k):
        if name not in pnames:
            raise ConfigError(f"reaction {k}: unknown parameter {name!r}", source)
        return pnames.index(name)

    rs = []
    for k, r in enumerate(doc["reactions"]):
        for side in ("reactants", "products"):
            for s in r[side]:
                if s not in species:
                    raise ConfigError(f"reaction {k}: unknown species {s!r}", source)
        if r["kind"] == "mass_action":
            inten = MassAction(pidx(r["rate"], k))
        else:
            if r["substrate"] not in species:
                raise ConfigError(f"reaction {k}: unknown substrate {r['substrate']!r}", source)
            inten = MichaelisMenten(pidx(r["vmax"], k), pidx(r["km"], k), species.index(r["substrate"]))
        rs.append((r["reactants"], r["products"], inten, r.get("name", f"r{k + 1}")))
    net = network_from_reactions(species, rs, len(pnames), pnames)
    exempt = tuple(sorted({reaction_index(net, e) for e in doc.get("exempt", [])}))
    sets = {}
    for sname, ps in doc["parameter_sets"].items():
        if len(ps["theta"]) != len(pnames):
            raise ConfigError(f"parameter set {sname!r}: theta needs {len(pnames)} entries", source)
        x0 = np.zeros(len(species), dtype=np.int64)
        for s, v in ps["initial_state"].items():
            if s not in species:
                raise ConfigError(f"parameter set {sname!r}: unknown species {s!r}", source)
            x0[species.index(s)] = v
        obs = ps.get("observable", doc.get("observable"))
        if obs is None:
            raise ConfigError(f"parameter set {sname!r} has no observable", source)
        sets[sname] = ParameterSet(np.asarray(ps["theta"], dtype=float), x0, float(ps["time"]), obs)
    default = doc.get("default_set", next(iter(sets)))
    if default not in sets:
        raise ConfigError(f"default_set {default!r} is not a parameter set", source)
    return ModelSpec(doc["name"], net, exempt, sets, default, doc)


def load_model(ref) -> ModelSpec:
    """Load a builtin model by name, a model file path, or an inline dict."""
    if isinstance(ref, ModelSpec):
        return ref
    if isinstance(ref, dict):
        return model_from_dict(ref)
    text = _builtin_text(str(ref))
    source = f"<builtin {ref}>"
    if text is None:
        p = FsPath(ref)
        if not p.is_file():
            raise ConfigError(f"no builtin model or file named {ref!r} "
                              f"(builtins: {', '.join(builtin_models())})")
        text, source = p.read_text(), str(p)
    return model_from_dict(parse_json(text, MODEL_SCHEMA, source), source, text)


def _polynomial(net: ReactionNetwork, obs: dict) -> Polynomial:
    d = net.num_species
    if "species" in obs:
        if obs["species"] not in net.species:
            raise ConfigError(f"unknown species {obs['species']!r} in observable")
        return Polynomial.species(d, net.index(obs["species"]))
    powers = np.zeros((len(obs["terms"]), d), dtype=np.int64)
    for t, term in enumerate(obs["terms"]):
        for s, p in term["powers"].items():
            if s not in net.species:
                raise ConfigError(f"unknown species {s!r} in observable")
            powers[t, net.index(s)] = p
    return Polynomial(powers, [term["coeff"] for term in obs["terms"]])


def make_observable(net: ReactionNetwork, obs: dict, T: float) -> Functional:
    """Functional for an observable description, evaluated up to time ``T``."""
    validate(obs, OBSERVABLE_SCHEMA, "<observable>")
    kind = obs["kind"]
    a, b = obs.get("window", (0.0, T))
    if kind != "terminal" and not 0 <= a <= b:
        raise ConfigError("observable window must satisfy 0 <= a <= b")
    if kind == "terminal":
        return terminal_functional(_polynomial(net, obs), T, label=obs.get("species", "terminal"))
    if kind == "flux":
        return flux_functional(net, reaction_index(net, obs["reaction"]), a, b)
    return integral_functional(_polynomial(net, obs), a, b, label=obs.get("species", "integral"))


# -- experiment configs -------------------------------------------------------------------

DEFAULTS = {
    "parameter_set": None,
    "params": "all",
    "seed": 0,
    "workers": 1,
    "pilot": 500,
    "alloc_param": None,
    "cost": "work",
    "timing": False,
    "big_m": DEFAULT_BIG_M,
    "delta": DEFAULT_DELTA,
    "dump_paths": 0,
    "max_jumps": 10**8,
}

ENV_PREFIX = "CTMCSENS_"

# environment overrides: CTMCSENS_<KEY> for these keys
_ENV_TYPES = {"seed": int, "workers": int, "paths": int, "pilot": int, "target_halfwidth": float,
              "big_m": float, "cost": str, "out": str, "parameter_set": str}


def env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    out = {}
    for key, typ in _ENV_TYPES.items():
        raw = environ.get(ENV_PREFIX + key.upper())
        if raw is None:
            continue
        try:
            out[key] = typ(raw)
        except ValueError:
            raise ConfigError(f"environment variable {ENV_PREFIX + key.upper()}={raw!r} is not a "
                              f"valid {typ.__name__}") from None
    return out


def load_experiment(path) -> dict:
    p = FsPath(path)
    if not p.is_file():
        raise ConfigError(f"config file {path!r} not found")
    text = p.read_text()
    return parse_json(text, EXPERIMENT_SCHEMA, str(p))


def resolve_experiment(cfg: dict) -> tuple[dict, ModelSpec]:
    """Validate, fill in defaults from the model and return ``(resolved, model)``.

    The resolved config is self-contained: it carries the model inline, so it
    re-runs to the same result without the original files.
    """
    validate(cfg, EXPERIMENT_SCHEMA, "<config>")
    out = dict(DEFAULTS)
    out.update({k: v for k, v in cfg.items() if v is not None})
    model = load_model(cfg["model"])
    ps = model.parameter_set(out["parameter_set"])
    out["parameter_set"] = out["parameter_set"] or model.default_set
    out["model"] = model.doc
    out.setdefault("time", ps.time)
    out.setdefault("observable", ps.observable)
    if "paths" not in out and "target_halfwidth" not in out and out["method"] != "oracle":
        out["paths"] = 10_000
    R = model.net.param_dim
    if out["params"] != "all" and max(out["params"]) > R:
        raise ConfigError(f"parameter index {max(out['params'])} out of range 1..{R}")
    if out.get("alloc_param") is None:
        out["alloc_param"] = 1 if out["params"] == "all" else out["params"][0]
    if out["alloc_param"] > R:
        raise ConfigError(f"alloc_param {out['alloc_param']} out of range 1..{R}")
    if "exempt" not in out:
        out["exempt"] = [k + 1 for k in model.exempt]
    names = [r.name for r in model.net.reactions]
    out["exempt"] = [names[k] for k in sorted({reaction_index(model.net, e) for e in out["exempt"]})]
    if out["method"] in ("rpd_pathwise", "rpd_hybrid") and out["window"] > out["time"]:
        raise ConfigError("window must not exceed the final time")
    return out, model


__all__ = [
    "ConfigError",
    "ENV_PREFIX",
    "EXPERIMENT_SCHEMA",
    "METHODS",
    "MODEL_SCHEMA",
    "ModelSpec",
    "OBSERVABLE_SCHEMA",
    "ParameterSet",
    "builtin_models",
    "env_overrides",
    "line_of",
    "load_experiment",
    "load_model",
    "make_observable",
    "model_from_dict",
    "parse_json",
    "reaction_index",
    "resolve_experiment",
    "validate",
]
