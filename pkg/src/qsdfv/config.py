"""Experiment configuration files.

A config is a YAML mapping with a required integer ``seed``, a ``law`` block
and one block per subcommand.  Only the block of the subcommand being run is
validated.  Errors carry the file line of the offending field::

    seed: 2024
    law: {family: binary, p0: 0.75}
    sweep:
      N: [25, 50, 100, 200, 400, 800]
      horizon: 500
      burn_in: 50
      runs: 64

See ``configs/acceptance.yaml`` for every block with its defaults spelled out.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import yaml

from .gw_model import LawError, OffspringLaw, law_from_config


class ConfigError(ValueError):
    pass


# field -> (kind, default); a default of REQUIRED means the key must be present
REQUIRED = object()

_num = (int, float)


def _is_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _is_num(v):
    return isinstance(v, _num) and not isinstance(v, bool)


def _int_list(v):
    return isinstance(v, list) and all(_is_int(x) for x in v)


def _num_list(v):
    return isinstance(v, list) and all(_is_num(x) for x in v)


def _pairs(v):
    return isinstance(v, list) and all(isinstance(p, list) and len(p) == 2 and _int_list(p)
                                       for p in v)


KINDS: dict[str, tuple[Callable[[Any], bool], str]] = {
    "int": (_is_int, "an integer"),
    "num": (_is_num, "a number"),
    "num?": (lambda v: v is None or _is_num(v), "a number or null"),
    "ints": (_int_list, "a list of integers"),
    "nums": (_num_list, "a list of numbers"),
    "pairs": (_pairs, "a list of [x, y] integer pairs"),
    "str": (lambda v: isinstance(v, str), "a string"),
    "section": (lambda v: v is None or isinstance(v, dict), "a mapping"),
}

SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "qsd": {"L": ("int", 200), "z": ("nums", [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]),
            "tol": ("num", 1e-6), "geometric_tol": ("num", 1e-8), "yaglom": ("section", None)},
    "qsd.yaglom": {"alpha": ("num", 10.0), "times": ("nums", [1, 2, 4, 8, 16]),
                   "sites": ("ints", [1, 2, 3]), "L": ("int", 400), "tol": ("num", 1e-3)},
    "simulate": {"N": ("int", REQUIRED), "horizon": ("num", REQUIRED), "burn_in": ("num", REQUIRED),
                 "rho": ("num?", None), "batches": ("int", 20), "lyapunov": ("section", None),
                 "generator": ("section", None)},
    "simulate.lyapunov": {"configs": ("int", 1000), "N": ("ints", [10, 50, 200]),
                          "max_position": ("int", 50)},
    "simulate.generator": {"configs": ("int", 10), "N": ("ints", [2, 4, 6, 8]),
                           "max_position": ("int", 6), "h": ("num", 1e-3),
                           "replicas": ("int", 10**6)},
    "sweep": {"N": ("ints", REQUIRED), "selection_N": ("ints", None), "trend_N": ("ints", None),
              "horizon": ("num", REQUIRED), "burn_in": ("num", REQUIRED), "runs": ("int", 64),
              "rho": ("num?", None), "tv_max": ("num", 0.05)},
    "couple": {"N": ("ints", [2, 5, 20]), "seeds": ("int", 100), "horizon": ("num", 2.0),
               "growth": ("section", None), "rightmost": ("section", None)},
    "couple.growth": {"initial": ("int", 10), "t": ("nums", [0.5, 1.0]),
                      "replicas": ("int", 10_000)},
    "couple.rightmost": {"N": ("int", 5), "t": ("num", 1.0), "replicas": ("int", 2000),
                         "rho": ("num?", None)},
    "ld": {"rho": ("num", 0.2), "x0": ("int", 5), "t": ("num", 2.0), "replicas": ("int", 10**5),
           "large_deviation": ("section", None)},
    "ld.large_deviation": {"x0": ("int", 40), "T": ("num", 1.0), "deltas": ("nums", [10, 20, 30]),
                           "replicas": ("int", 10**5)},
    "chaos": {"N": ("ints", REQUIRED), "t": ("num", 1.0), "pairs": ("pairs", [[1, 1]]),
              "replicas": ("int", 10_000)},
    "semigroup": {"N": ("ints", REQUIRED), "t": ("num", 1.0), "replicas": ("int", 20_000),
                  "grid": ("int", 21), "method": ("str", "evolution"), "L": ("int", 64),
                  "K": ("int", 16), "factor": ("num", 2.0)},
}

SUBCOMMANDS = ("qsd", "simulate", "sweep", "couple", "ld", "chaos", "semigroup")


@dataclass
class ExperimentSpec:
    subcommand: str
    seed: int
    law: OffspringLaw
    law_cfg: dict
    params: dict
    source: str = "<memory>"

    def resolved(self) -> dict:
        return {"subcommand": self.subcommand, "seed": self.seed, "law": self.law_cfg,
                "law_probs": [float(p) for p in self.law.probs], self.subcommand: self.params}


def _line_map(text: str) -> dict[tuple, int]:
    """Map key paths to 1-based line numbers using the YAML node tree."""
    out: dict[tuple, int] = {}

    def walk(node, path):
        out[path] = node.start_mark.line + 1
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                key = path + (k.value,)
                out[key] = k.start_mark.line + 1
                walk(v, key)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                walk(v, path + (i,))

    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return out
    if root is not None:
        walk(root, ())
    return out


class _Reporter:
    def __init__(self, source: str, lines: dict[tuple, int]):
        self.source, self.lines = source, lines

    def fail(self, path: tuple, msg: str):
        p = path
        while p and p not in self.lines:
            p = p[:-1]
        where = f"{self.source}:{self.lines[p]}" if p in self.lines else self.source
        field = ".".join(str(s) for s in path) or "<root>"
        raise ConfigError(f"{where}: {field}: {msg}")


def _validate_section(raw, name: str, rep: _Reporter, path: tuple) -> dict:
    schema = SCHEMA[name]
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        rep.fail(path, "expected a mapping")
    for key in raw:
        if key not in schema:
            rep.fail(path + (key,), f"unknown field (expected one of {', '.join(schema)})")
    out = {}
    for key, (kind, default) in schema.items():
        if key not in raw:
            if default is REQUIRED:
                rep.fail(path + (key,), "required field is missing")
            value = copy.deepcopy(default)
        else:
            value = raw[key]
            # YAML reads 1e-6 without a dot as a string; accept it as a number
            if kind in ("num", "num?") and isinstance(value, str):
                try:
                    value = float(value)
                except ValueError:
                    pass
            check, desc = KINDS[kind]
            if not check(value):
                rep.fail(path + (key,), f"expected {desc}, got {value!r}")
        if kind == "section":
            value = _validate_section(value, f"{name}.{key}", rep, path + (key,)) \
                if key in raw else None
        out[key] = value
    _semantic_checks(name, out, rep, path)
    return out


def _semantic_checks(name: str, p: dict, rep: _Reporter, path: tuple):
    for key in ("N", "selection_N", "trend_N"):
        v = p.get(key)
        if isinstance(v, list):
            if not v:
                rep.fail(path + (key,), "list must not be empty")
            if name in ("sweep", "chaos", "semigroup", "couple") and min(v) < 2:
                rep.fail(path + (key,), "every N must be >= 2")
        elif _is_int(v) and name in ("simulate", "couple.rightmost") and v < 2:
            rep.fail(path + (key,), "N must be >= 2")
    if "burn_in" in p and "horizon" in p and not 0 <= p["burn_in"] < p["horizon"]:
        rep.fail(path + ("burn_in",), "need 0 <= burn_in < horizon")
    for key in ("replicas", "runs", "seeds", "configs", "L", "grid"):
        if key in p and p[key] < 1:
            rep.fail(path + (key,), "must be positive")
    if name == "sweep":
        extra = set(p["selection_N"] or []) | set(p["trend_N"] or [])
        if p["runs"] < 2:
            rep.fail(path + ("runs",), "need at least two runs for error bars")
        if not extra <= set(p["N"]):
            rep.fail(path + ("N",), "selection_N and trend_N must be subsets of N")
    if name == "semigroup" and p["method"] not in ("evolution", "direct"):
        rep.fail(path + ("method",), "method must be 'evolution' or 'direct'")
    if name == "chaos" and p["replicas"] < 1000:
        rep.fail(path + ("replicas",), "need at least 1000 replicas")


def parse_config(text: str, subcommand: str, source: str = "<string>",
                 seed_override: int | None = None) -> ExperimentSpec:
    if subcommand not in SUBCOMMANDS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: malformed YAML: {getattr(exc, 'problem', exc)}") from None
    rep = _Reporter(source, _line_map(text))
    if not isinstance(raw, dict):
        rep.fail((), "top level must be a mapping")
    seed = raw.get("seed") if seed_override is None else seed_override
    if seed is None:
        rep.fail(("seed",), "required field is missing (no implicit seeds)")
    if not _is_int(seed) or seed < 0:
        rep.fail(("seed",), f"expected a nonnegative integer, got {seed!r}")
    law_cfg = raw.get("law", {"family": "binary", "p0": 0.75})
    if not isinstance(law_cfg, dict):
        rep.fail(("law",), "expected a mapping")
    try:
        law = law_from_config(law_cfg)
    except (LawError, KeyError, TypeError, ValueError) as exc:
        rep.fail(("law",), str(exc))
    params = _validate_section(raw.get(subcommand), subcommand, rep, (subcommand,))
    return ExperimentSpec(subcommand, int(seed), law, law_cfg, params, source)


def load_config(path: str | Path, subcommand: str,
                seed_override: int | None = None) -> ExperimentSpec:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, subcommand, str(path), seed_override)
