"""Experiment configuration: YAML documents with ``include`` and dotted overrides.

A document may name other documents under ``include`` (a path or a list of
paths, relative to the including file).  Included documents are merged first,
in order, and the including document's own keys win.  ``network`` accepts
either the full form written into checkpoints (``stages: [...]``) or the
shorthand understood by :meth:`NetworkPlan.stacked` (``depths``, ``channels``,
``link``, ``variant``, ...).
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from spgnet.engine import TrainConfig
from spgnet.evaluate import EvalStrategy
from spgnet.model import NetworkPlan

DATA_ROOT_ENV = "SPGNET_DATA_ROOT"


class ConfigError(ValueError):
    pass


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def read_document(path, _seen=()) -> dict:
    path = Path(path).resolve()
    if path in _seen:
        raise ConfigError(f"include cycle through {path}")
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{path}: {err}") from err
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    includes = doc.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    for inc in includes:
        merged = merge(merged, read_document(path.parent / inc, _seen + (path,)))
    return merge(merged, doc)


def parse_override(text: str) -> tuple[list[str], object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    return key.split("."), yaml.safe_load(value)


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` overrides left to right (later ones win)."""
    doc = copy.deepcopy(doc)
    for text in overrides:
        keys, value = parse_override(text)
        node = doc
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-mapping")
        node[keys[-1]] = value
    return doc


def plan_from_dict(d: dict) -> NetworkPlan:
    if "stages" in d:
        return NetworkPlan.from_dict(d)
    return NetworkPlan.stacked(**d)


@dataclass
class ExperimentConfig:
    network: NetworkPlan
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalStrategy = field(default_factory=EvalStrategy)
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = copy.deepcopy(doc)
        known = {"network", "train", "eval", "paths", "seed"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        if "network" not in doc:
            raise ConfigError("config has no 'network' section")
        train = doc.get("train", {}) or {}
        if "seed" in doc:
            train["seed"] = doc["seed"]
        paths = dict(doc.get("paths", {}) or {})
        if not paths.get("data_uri") and os.environ.get(DATA_ROOT_ENV):
            paths["data_uri"] = os.environ[DATA_ROOT_ENV]
        try:
            return cls(
                network=plan_from_dict(doc["network"]),
                train=TrainConfig(**train),
                eval=EvalStrategy(**(doc.get("eval", {}) or {})),
                paths=paths,
            )
        except (TypeError, ValueError) as err:
            raise ConfigError(str(err)) from err

    def to_dict(self) -> dict:
        return {
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
            "paths": dict(self.paths),
        }

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


def load_config(path, overrides=(), seed: int | None = None) -> ExperimentConfig:
    doc = apply_overrides(read_document(path), overrides)
    if seed is not None:
        doc["seed"] = seed
    return ExperimentConfig.from_dict(doc)
