"""Pipeline configuration: JSON file -> validated dataclasses.

Every key has a default, so ``{}`` is a valid config that runs the synthetic
fixture with the documented model defaults. Module seeds fall back to the
top-level ``seed``; the CLI's ``--seed`` overrides all of them.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import jsonschema

from .dualcnn import ModelConfig, ModelError, TrainConfig
from .evaluation import DEFAULT_CUTOFFS
from .labels import MODES
from .synth import SynthError, SynthSpec


class ConfigError(ValueError):
    pass


_POS_INT = {"type": "integer", "minimum": 1}
_NONNEG_INT = {"type": "integer", "minimum": 0}
_SEED = {"type": ["integer", "null"], "minimum": 0}
_PATH = {"type": ["string", "null"]}
_UNIT = {"type": "number", "minimum": 0, "maximum": 1}

SCHEMA: dict = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": _SEED,
        "paths": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"corpus": _PATH, "cache_dir": {"type": "string"}, "output_dir": {"type": "string"}},
        },
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_skills": _POS_INT, "tags_per_skill": _POS_INT,
                "num_t_shaped": _NONNEG_INT, "num_c_shaped": _NONNEG_INT, "num_non_expert": _NONNEG_INT,
                "answers_per_user": {"type": "object", "additionalProperties": _NONNEG_INT},
                "accepted_rates": {"type": "object", "additionalProperties": {"type": "array", "items": _UNIT}},
                "focus": {"type": "object", "additionalProperties": {"type": "array", "items": _UNIT}},
                "vocab_per_skill": _NONNEG_INT, "words_per_answer": _NONNEG_INT,
                "common_word_share": _UNIT, "questions_per_skill": _NONNEG_INT, "seed": _SEED,
            },
        },
        "skills": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"tag_limit": _POS_INT, "threshold": _UNIT, "override_file": _PATH, "min_size": _POS_INT},
        },
        "labels": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": list(MODES)},
                "negative_ratio": {"type": "number", "minimum": 0},
                "seed": _SEED,
            },
        },
        "embedding": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "num_topics": {"type": "integer", "minimum": 2},
                "alpha": {"type": ["number", "null"], "exclusiveMinimum": 0},
                "beta": {"type": "number", "exclusiveMinimum": 0},
                "iterations": _POS_INT,
                "fold_in_sweeps": {"type": "integer", "minimum": 2},
                "seed": _SEED,
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": _POS_INT, "k": _POS_INT, "f": _POS_INT, "p": _POS_INT, "m_c": _POS_INT, "m_q": _POS_INT,
                "activation": {"enum": ["relu", "tanh"]}, "seed": _SEED,
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "learning_rate": {"type": "number", "exclusiveMinimum": 0},
                "epochs": _POS_INT, "batch_size": _POS_INT, "patience": _POS_INT,
                "loss": {"enum": ["mse"]}, "seed": _SEED,
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "cutoffs": {"type": "array", "items": _POS_INT, "minItems": 1, "uniqueItems": True},
                "dba_lambda": _UNIT,
                "random_permutations": _POS_INT,
                "mrr_min_grade": {"enum": [1, 2]},
                "candidates": {"enum": ["all", "heldout"]},
                "seed": _SEED,
            },
        },
        "sweep": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "parameter": {"enum": ["n", "R"]},
                "values": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
            },
        },
    },
}


@dataclass(frozen=True)
class PathsConfig:
    corpus: str | None = None  # None -> generate the synthetic corpus
    cache_dir: str = "cache"
    output_dir: str = "out"


@dataclass(frozen=True)
class SkillsConfig:
    tag_limit: int = 200
    threshold: float = 0.1
    override_file: str | None = None
    min_size: int = 1


@dataclass(frozen=True)
class LabelsConfig:
    mode: str = "t_ranking"
    negative_ratio: float = 2.0
    seed: int = 0


@dataclass(frozen=True)
class EmbeddingConfig:
    num_topics: int = 100
    alpha: float | None = None
    beta: float = 0.01
    iterations: int = 1000
    fold_in_sweeps: int = 50
    seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    cutoffs: tuple[int, ...] = DEFAULT_CUTOFFS
    dba_lambda: float = 0.5
    random_permutations: int = 100
    mrr_min_grade: int = 2
    candidates: str = "all"
    seed: int = 0


@dataclass(frozen=True)
class SweepConfig:
    parameter: str = "n"
    values: tuple[int, ...] = (1, 50, 500)


@dataclass(frozen=True)
class PipelineConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    skills: SkillsConfig = field(default_factory=SkillsConfig)
    labels: LabelsConfig = field(default_factory=LabelsConfig)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def check_paths(self) -> None:
        """Inputs named by the config must exist before any stage runs."""
        for label, p in (("paths.corpus", self.paths.corpus), ("skills.override_file", self.skills.override_file)):
            if p is not None and not Path(p).is_file():
                raise ConfigError(f"{label}: file not found: {p}")


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b=value``; the value is read as JSON when it parses, else kept as a string."""
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw: dict, items: Sequence[str]) -> dict:
    out = copy.deepcopy(raw)
    for item in items:
        keys, value = parse_override(item)
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {item!r}: {k} is not a section")
        node[keys[-1]] = value
    return out


def _section_seed(section: dict, top: int | None, forced: int | None) -> dict:
    section = dict(section)
    if forced is not None:
        section["seed"] = forced
    elif section.get("seed") is None:
        section["seed"] = 0 if top is None else top
    return section


def build_config(raw: dict, seed: int | None = None) -> PipelineConfig:
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        where = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{where}: {exc.message}") from None

    top = raw.get("seed")
    sec = {name: _section_seed(raw.get(name, {}), top, seed)
           for name in ("synth", "labels", "embedding", "model", "training", "eval")}
    emb = EmbeddingConfig(**sec["embedding"])
    try:
        synth_defaults = SynthSpec().to_dict()
        synth = SynthSpec.from_dict({**synth_defaults, **sec["synth"]})
        # the document-vector width is owned by the embedding section
        model = ModelConfig(m_d=emb.num_topics, **sec["model"])
        training = TrainConfig(**sec["training"])
    except (SynthError, ModelError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    ev = dict(sec["eval"])
    if "cutoffs" in ev:
        ev["cutoffs"] = tuple(sorted(ev["cutoffs"]))
    sw = dict(raw.get("sweep", {}))
    if "values" in sw:
        if min(sw["values"]) < 1:
            raise ConfigError("sweep.values must be positive")
        sw["values"] = tuple(sw["values"])
    return PipelineConfig(
        paths=PathsConfig(**raw.get("paths", {})),
        synth=synth,
        skills=SkillsConfig(**raw.get("skills", {})),
        labels=LabelsConfig(**sec["labels"]),
        embedding=emb,
        model=model,
        training=training,
        eval=EvalConfig(**ev),
        sweep=SweepConfig(**sw),
    )


def load_config(path: str | Path | None, overrides: Sequence[str] = (), seed: int | None = None,
                check_paths: bool = True) -> PipelineConfig:
    raw: dict = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    cfg = build_config(apply_overrides(raw, overrides), seed)
    if check_paths:
        cfg.check_paths()
    return cfg
