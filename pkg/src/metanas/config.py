"""Strict INI configuration.

Every section and key is declared in :data:`SCHEMA`; anything else is an
error.  Values are parsed once into Python types, overrides of the form
``section.key=value`` are applied on top, and the typed sections are then
turned into the library's config objects.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass
from typing import Any, Callable

from .enumeration import DEFAULT_BOUND
from .engine import SearchConfig
from .evaluator import IdxSpec, SyntheticSpec
from .genetic import CrossoverConfig, MutationConfig
from .genotype import InitConfig, MacroConfig, SearchSpace
from .metalr import EsConfig, QuadraticBowlTask


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    optional: bool = False


def _k(parse, default, optional=False) -> Key:
    return Key(parse, default, optional)


SCHEMA: dict[str, dict[str, Key]] = {
    "search": {
        "population_size": _k(int, 20),
        "generations": _k(int, 5),
        "early_epochs": _k(int, 35),
        "full_epochs": _k(int, 100),
        "c_target": _k(int, 3_000_000),
        "complexity_max": _k(int, 5_000_000),
        "evaluator": _k(str, "oracle"),
        "seed": _k(int, 0),
        "surrogate": _k(_bool, True),
        "metalr": _k(_bool, True),
        "period_mutation": _k(_bool, True),
        "fixed_lr": _k(float, 1e-2),
        "param_scale": _k(float, 1e6),
        "batch_size": _k(int, 32),
        "schedule": _k(str, None, optional=True),
        "controller": _k(str, None, optional=True),
    },
    "mutation": {
        "period_N_l": _k(int, 4),
        "window_N_h": _k(int, 1),
        "literal_eq8": _k(_bool, False),
        "node_add_remove_prob": _k(float, 0.05),
        "p_hi": _k(float, 0.9),
        "fixed_link_rate": _k(float, None, optional=True),
        "fixed_op_rate": _k(float, None, optional=True),
    },
    "crossover": {
        "swap_prob": _k(float, 0.5),
        "intra_prob": _k(float, 1.0),
    },
    "space": {
        "min_nodes": _k(int, 5),
        "max_nodes": _k(int, 12),
        "ops": _k(_ints, tuple(range(1, 13))),
        "reduction_min_nodes": _k(int, None, optional=True),
        "reduction_max_nodes": _k(int, None, optional=True),
        "p_hi": _k(float, 0.9),
    },
    "macro": {
        "num_cells": _k(int, 6),
        "channels": _k(int, 8),
        "input_shape": _k(_ints, (16, 16, 1)),
        "num_classes": _k(int, 2),
        "reduction_positions": _k(_ints, None, optional=True),
    },
    "dataset": {
        "kind": _k(str, "synthetic"),
        "classes": _k(int, 2),
        "samples": _k(int, 200),
        "image_size": _k(int, 16),
        "noise": _k(float, 0.1),
        "seed": _k(int, 0),
        "images": _k(str, None, optional=True),
        "labels": _k(str, None, optional=True),
        "limit": _k(int, None, optional=True),
    },
    "task": {
        "kind": _k(str, "quadratic"),
        "dim": _k(int, 10),
        "lam_min": _k(float, 1e-2),
        "seed": _k(int, 0),
    },
    "es": {
        "population": _k(int, 16),
        "sigma": _k(float, 0.05),
        "meta_steps": _k(int, 30),
        "inner_steps": _k(int, 100),
        "learning_rate": _k(float, 0.1),
        "seed": _k(int, 0),
    },
    "enumerate": {
        "epochs": _k(int, 100),
        "bound": _k(int, DEFAULT_BOUND),
    },
}

Sections = dict[str, dict[str, Any]]


def _parse_value(section: str, key: str, text: str) -> Any:
    spec = SCHEMA[section][key]
    if spec.optional and text.strip() == "":
        return None
    try:
        return spec.parse(text.strip())
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from exc


def _check_key(section: str, key: str) -> None:
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")


def parse_text(text: str, source: str = "<config>") -> Sections:
    """Parse INI text into typed values; only keys present in the text are returned."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), default_section="__none__")
    parser.optionxform = str  # keys are case-sensitive (period_N_l)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    out: Sections = {}
    for name in parser.sections():
        out[name] = {}
        for key, value in parser.items(name):
            _check_key(name, key)
            out[name][key] = _parse_value(name, key, value)
    return out


def load(path) -> Sections:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def apply_overrides(sections: Sections, overrides: list[str]) -> Sections:
    out = {name: dict(values) for name, values in sections.items()}
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        _check_key(section, key)
        out.setdefault(section, {})[key] = _parse_value(section, key, value)
    return out


def section(sections: Sections, name: str) -> dict[str, Any]:
    """Typed values of ``name`` with schema defaults filled in."""
    given = sections.get(name, {})
    return {key: given.get(key, spec.default) for key, spec in SCHEMA[name].items()}


def require_section(sections: Sections, name: str) -> dict[str, Any]:
    if name not in sections:
        raise ConfigError(f"missing required section [{name}]")
    return section(sections, name)


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------


def build_space(sections: Sections) -> SearchSpace:
    s = section(sections, "space")
    lo, hi = s["reduction_min_nodes"], s["reduction_max_nodes"]
    if (lo is None) != (hi is None):
        raise ConfigError("[space] reduction_min_nodes and reduction_max_nodes go together")
    return SearchSpace(min_nodes=s["min_nodes"], max_nodes=s["max_nodes"], ops=s["ops"],
                       reduction_nodes=None if lo is None else (lo, hi))


def build_macro(sections: Sections) -> MacroConfig:
    m = section(sections, "macro")
    if len(m["input_shape"]) != 3:
        raise ConfigError("[macro] input_shape needs three integers h,w,c")
    return MacroConfig(num_cells=m["num_cells"], channels=m["channels"],
                       input_shape=m["input_shape"], num_classes=m["num_classes"],
                       reduction_positions=m["reduction_positions"])


def build_dataset_spec(sections: Sections) -> SyntheticSpec | IdxSpec:
    d = section(sections, "dataset")
    if d["kind"] == "synthetic":
        return SyntheticSpec(classes=d["classes"], samples=d["samples"],
                             image_size=d["image_size"], noise=d["noise"], seed=d["seed"])
    if d["kind"] == "idx":
        if not d["images"] or not d["labels"]:
            raise ConfigError("[dataset] kind=idx needs images and labels")
        return IdxSpec(images=d["images"], labels=d["labels"], limit=d["limit"],
                       num_classes=d["classes"])
    raise ConfigError(f"[dataset] unknown kind {d['kind']!r}")


def build_search_config(sections: Sections) -> SearchConfig:
    s = section(sections, "search")
    m = section(sections, "mutation")
    c = section(sections, "crossover")
    sp = section(sections, "space")
    fixed = (m["fixed_link_rate"], m["fixed_op_rate"])
    if (fixed[0] is None) != (fixed[1] is None):
        raise ConfigError("[mutation] fixed_link_rate and fixed_op_rate go together")
    try:
        return SearchConfig(
            population_size=s["population_size"], generations=s["generations"],
            early_epochs=s["early_epochs"], full_epochs=s["full_epochs"],
            mutation=MutationConfig(period_N_l=m["period_N_l"], window_N_h=m["window_N_h"],
                                    literal_eq8=m["literal_eq8"],
                                    node_add_remove_prob=m["node_add_remove_prob"],
                                    periodic=s["period_mutation"], p_hi=m["p_hi"],
                                    fixed_rates=None if fixed[0] is None else fixed),
            crossover=CrossoverConfig(swap_prob=c["swap_prob"], intra_prob=c["intra_prob"]),
            init=InitConfig(space=build_space(sections), p_hi=sp["p_hi"]),
            macro=build_macro(sections),
            c_target=s["c_target"], complexity_max=s["complexity_max"],
            evaluator=s["evaluator"], seed=s["seed"],
            use_surrogate=s["surrogate"], use_metalr=s["metalr"],
            fixed_lr=s["fixed_lr"], param_scale=s["param_scale"],
            dataset=build_dataset_spec(sections), batch_size=s["batch_size"],
            schedule_path=s["schedule"], controller_path=s["controller"],
        )
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def build_task(sections: Sections) -> QuadraticBowlTask:
    t = require_section(sections, "task")
    if t["kind"] != "quadratic":
        raise ConfigError(f"[task] unknown kind {t['kind']!r}")
    return QuadraticBowlTask(dim=t["dim"], lam_min=t["lam_min"], seed=t["seed"])


def build_es(sections: Sections) -> EsConfig:
    e = section(sections, "es")
    try:
        return EsConfig(population=e["population"], sigma=e["sigma"], meta_steps=e["meta_steps"],
                        inner_steps=e["inner_steps"], learning_rate=e["learning_rate"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
