"""Model files: JSON documents describing an SDE or a manifold."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from .dsl import Expr, SymbolTable
from .errors import ConfigError, JetSdeError
from .manifolds import ImplicitSurface, MetricField
from .models import SdeModel

FORMAT_VERSION = 1

_EXPR = {"type": ["string", "number"]}
_EXPR_LIST = {"type": "array", "items": _EXPR, "minItems": 1}
_EXPR_MATRIX = {"type": "array", "items": _EXPR_LIST, "minItems": 1}
_NAMES = {"type": "array", "items": {"type": "string", "pattern": "^[A-Za-z_][A-Za-z_0-9]*$"}, "minItems": 1}

MODEL_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "jetsde model file",
    "type": "object",
    "required": ["name", "states", "x0"],
    "additionalProperties": False,
    "properties": {
        "format_version": {"const": FORMAT_VERSION},
        "name": {"type": "string"},
        "description": {"type": "string"},
        "n": {"type": "integer", "minimum": 1},
        "d": {"type": "integer", "minimum": 1},
        "form": {"enum": ["ito", "stratonovich", "jet", "vector"]},
        "states": _NAMES,
        "drivers": _NAMES,
        "coefficients": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "a": _EXPR_LIST,
                "b": _EXPR_MATRIX,
                "gamma": _EXPR_LIST,
                "A": _EXPR_LIST,
                "B": _EXPR_LIST,
            },
        },
        "x0": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "constants": {"type": "object", "additionalProperties": {"type": "number"}},
        "floors": {"type": "object", "additionalProperties": {"type": "number"}},
        "closed_form": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"type": "string"},
                "params": {"type": "object", "additionalProperties": {"type": ["number", "string"]}},
            },
        },
        "manifold": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "implicit_F": {"type": "string"},
                "metric": _EXPR_MATRIX,
                "embedding": _EXPR_LIST,
                "eps": {"type": "number", "exclusiveMinimum": 0},
            },
            "oneOf": [{"required": ["implicit_F"]}, {"required": ["metric"]}],
        },
    },
    "if": {"not": {"required": ["manifold"]}},
    "then": {"required": ["n", "d", "form", "coefficients"]},
}

_COEF_KEYS = {"ito": ("a", "b"), "stratonovich": ("a", "b"), "jet": ("gamma",), "vector": ("A", "B")}


@dataclass
class ModelFile:
    name: str
    doc: dict
    model: SdeModel | None
    surface: ImplicitSurface | None
    metric: MetricField | None
    embedding: list[Expr] | None
    x0: np.ndarray
    eps: float

    @property
    def is_manifold(self) -> bool:
        return self.surface is not None or self.metric is not None


def _text(v) -> str:
    return v if isinstance(v, str) else repr(float(v))


def load_model_dict(doc: dict) -> ModelFile:
    try:
        return _load(doc)
    except JetSdeError:
        raise
    except ValueError as exc:  # symbol-table problems (duplicate or shadowing names)
        raise ConfigError(str(exc)) from None


def _load(doc: dict) -> ModelFile:
    try:
        jsonschema.validate(doc, MODEL_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"model file does not match the schema at {where}: {exc.message}") from None
    states = tuple(doc["states"])
    x0 = np.asarray(doc["x0"], dtype=float)
    constants = doc.get("constants", {})
    if len(x0) != len(states):
        raise ConfigError(f"x0 has {len(x0)} entries but {len(states)} states are declared")
    if "n" in doc and doc["n"] != len(states):
        raise ConfigError(f"n = {doc['n']} but {len(states)} states are declared")
    manifold = doc.get("manifold")
    model = surface = metric = embedding = None
    eps = 0.1
    if manifold is not None:
        eps = float(manifold.get("eps", eps))
        if "implicit_F" in manifold:
            surface = ImplicitSurface(manifold["implicit_F"], states, constants, name=doc["name"])
        else:
            metric = MetricField.from_exprs(
                [[_text(e) for e in row] for row in manifold["metric"]], states, constants
            )
            if "embedding" in manifold:
                sym = SymbolTable(states, (), "t", constants)
                embedding = [Expr(_text(e), sym) for e in manifold["embedding"]]
    if "form" in doc:
        form = doc["form"]
        d = doc.get("d")
        drivers = tuple(doc.get("drivers") or (f"u{k + 1}" for k in range(d or 0)))
        if d is not None and len(drivers) != d:
            raise ConfigError(f"d = {d} but {len(drivers)} drivers are declared")
        coefs = doc.get("coefficients", {})
        expected = set(_COEF_KEYS[form])
        if set(coefs) != expected:
            raise ConfigError(
                f"form {form!r} needs coefficients {sorted(expected)}, got {sorted(coefs)}"
            )
        kwargs = {}
        if form in ("ito", "stratonovich"):
            kwargs["drift"] = [_text(e) for e in coefs["a"]]
            kwargs["diffusion"] = [[_text(e) for e in row] for row in coefs["b"]]
        elif form == "jet":
            kwargs["gamma"] = [_text(e) for e in coefs["gamma"]]
        else:
            kwargs["A"] = [_text(e) for e in coefs["A"]]
            kwargs["B"] = [_text(e) for e in coefs["B"]]
        model = SdeModel.build(
            doc["name"],
            form,
            states,
            drivers,
            x0,
            constants=constants,
            floors=doc.get("floors", {}),
            closed_form=doc.get("closed_form"),
            **kwargs,
        )
    return ModelFile(doc["name"], doc, model, surface, metric, embedding, x0, eps)


def load_model(path: str | Path) -> ModelFile:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read model file {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return load_model_dict(doc)
