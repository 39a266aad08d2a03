"""Run configuration: every module config in one JSON document.

Sections are ``model``, ``train``, ``refine`` and ``synth`` plus a top-level
``seed``.  Keys that are not fields of the section are rejected.  Command-line
``--set section.key=value`` overrides are applied after the file is read, so
the precedence is defaults < config file < overrides.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .data import SynthSpec
from .featmap import FeatMapConfig
from .graph import RangeBoxSpec
from .model import ModelConfig
from .refine import RefineConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    seed: int = 0

    def __post_init__(self):
        if self.synth.num_classes != self.model.num_classes:
            raise ConfigError(f"synth.num_classes={self.synth.num_classes} but "
                              f"model.num_classes={self.model.num_classes}")

    def to_dict(self) -> dict:
        m = self.model
        model = {f.name: getattr(m, f.name) for f in dataclasses.fields(m)}
        model["featmap"] = m.featmap.to_dict()
        model["relations"] = [{"kind": r.kind, "box_fraction": r.box_fraction} for r in m.relations]
        return {"model": model, "train": self.train.to_dict(), "refine": self.refine.to_dict(),
                "synth": dataclasses.asdict(self.synth), "seed": self.seed}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _check_keys(section, data, cls):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


def _build(section, cls, data, **converted):
    _check_keys(section, data, cls)
    try:
        return cls(**{**data, **converted})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config document must be an object")
    _check_keys("<root>", doc, RunConfig)
    model = doc.get("model", {})
    _check_keys("model", model, ModelConfig)
    model = dict(model)
    converted = {}
    if "featmap" in model:
        converted["featmap"] = _build("model.featmap", FeatMapConfig, model["featmap"])
    if "relations" in model:
        rels = model["relations"]
        if not isinstance(rels, list):
            raise ConfigError("model.relations must be a list")
        converted["relations"] = tuple(_build("model.relations", RangeBoxSpec, r) for r in rels)
    try:
        return RunConfig(
            model=_build("model", ModelConfig, model, **converted),
            train=_build("train", TrainConfig, doc.get("train", {})),
            refine=_build("refine", RefineConfig, doc.get("refine", {})),
            synth=_build("synth", SynthSpec, doc.get("synth", {})),
            seed=int(doc.get("seed", 0)))
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def loads(text: str) -> RunConfig:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return from_dict(doc)


def load(path) -> RunConfig:
    with open(path) as fh:
        return loads(fh.read())


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` strings to a config dict; values parse as JSON, else as text."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        *path, last = key.split(".")
        node = doc
        for part in path:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"override {key!r}: {part!r} is not a section")
            node = node[part]
        node[last] = value
    return doc
