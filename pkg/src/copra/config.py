"""Unified run configuration and per-stage digests.

A run is described by one document with sections ``dataset``, ``backbone``,
``pretrain``, ``lora``, ``generator``, ``grpo`` and ``pipeline`` plus the
top-level ``adaptation_mode`` and ``seed``. Files may be YAML or JSON.

Each pipeline stage has a digest covering exactly the settings it depends on
(its own section and those of every upstream stage). Artifacts record the
digest of the stage that wrote them, and a downstream stage refuses inputs
whose digest differs from the one the current config resolves to.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .backbone import BackboneConfig
from .generator import GeneratorConfig
from .grpo import GrpoConfig
from .numeric import ContractViolation
from .pipeline import SamplingConfig
from .policy import MODES
from .pretrain import PretrainConfig
from .synthdata import SynthConfig

STAGES = ("synth", "pretrain", "train", "infer")


class _Loader(yaml.SafeLoader):
    """Safe YAML loader that also reads ``1e-4``-style floats (YAML 1.1 wants a dot)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                  |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                  |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                  |[-+]?\.(?:inf|Inf|INF)
                  |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."))


@dataclass
class LoraConfig:
    rank: int = 8
    alpha: float = 16.0

    def __post_init__(self):
        if self.rank < 1:
            raise ContractViolation("lora rank must be >= 1")


@dataclass
class RunConfig:
    dataset: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    pipeline: SamplingConfig = field(default_factory=SamplingConfig)
    adaptation_mode: str = "copra"
    seed: int = 0

    def __post_init__(self):
        if self.adaptation_mode not in MODES:
            raise ContractViolation(f"adaptation_mode must be one of {MODES}, got {self.adaptation_mode!r}")
        # single sources of truth
        self.generator.rank, self.generator.alpha = self.lora.rank, self.lora.alpha
        self.dataset.seed = self.seed
        self.dataset.n_frames_conditioning = self.backbone.n_frames
        if self.pipeline.n_frames != self.backbone.n_frames:
            raise ContractViolation("pipeline.n_frames must equal backbone.n_frames")

    # -- (de)serialisation -------------------------------------------------

    def to_dict(self) -> dict:
        d = json.loads(json.dumps(dataclasses.asdict(self)))
        for k in ("rank", "alpha"):
            d["generator"].pop(k)
        return d

    @classmethod
    def from_dict(cls, doc: dict | None) -> "RunConfig":
        doc = dict(doc or {})
        sections = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = set(doc) - set(sections)
        if unknown:
            raise ContractViolation(f"unknown config keys {sorted(unknown)}")
        kwargs = {}
        for name, typ in [("dataset", SynthConfig), ("backbone", BackboneConfig), ("pretrain", PretrainConfig),
                          ("lora", LoraConfig), ("generator", GeneratorConfig), ("grpo", GrpoConfig),
                          ("pipeline", SamplingConfig)]:
            sec = dict(doc.get(name) or {})
            if name == "generator" and {"rank", "alpha"} & set(sec):
                raise ContractViolation("set rank/alpha in the lora section, not generator")
            if name == "pipeline" and "n_frames" not in sec and "n_frames" in (doc.get("backbone") or {}):
                sec["n_frames"] = doc["backbone"]["n_frames"]
            kwargs[name] = _build(typ, sec, name)
        for key in ("adaptation_mode", "seed"):
            if key in doc:
                kwargs[key] = doc[key]
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise FileNotFoundError(f"config file not readable: {path}") from e
        try:
            doc = yaml.load(text, Loader=_Loader)
        except yaml.YAMLError as e:
            raise ContractViolation(f"config {path} is not valid YAML/JSON: {e}") from e
        return cls.from_dict(doc)

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))

    def replace(self, **changes) -> "RunConfig":
        doc = self.to_dict()
        for key, value in changes.items():
            sec, _, sub = key.partition(".")
            if sub:
                doc[sec][sub] = value
            else:
                doc[sec] = value
        return RunConfig.from_dict(doc)

    # -- digests -------------------------------------------------------------

    def stage_doc(self, stage: str) -> dict:
        if stage not in STAGES:
            raise ContractViolation(f"unknown stage {stage!r}")
        d = self.to_dict()
        doc = {"seed": self.seed, "dataset": d["dataset"]}
        if stage in ("pretrain", "train", "infer"):
            doc.update(backbone=d["backbone"], pretrain=d["pretrain"])
        if stage in ("train", "infer"):
            doc.update(lora=d["lora"], generator=d["generator"], grpo=d["grpo"], adaptation_mode=self.adaptation_mode)
        if stage == "infer":
            # granularity is recorded per score set so one run can hold a sweep
            doc.update(pipeline={k: v for k, v in d["pipeline"].items() if k != "granularity"})
        return doc

    def stage_digest(self, stage: str) -> str:
        return _digest(self.stage_doc(stage))

    def digest(self) -> str:
        return _digest(self.to_dict())


def _digest(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def _build(typ, sec: dict, name: str):
    names = {f.name for f in dataclasses.fields(typ)}
    unknown = set(sec) - names
    if unknown:
        raise ContractViolation(f"unknown keys in {name} section: {sorted(unknown)}")
    try:
        return typ(**sec)
    except TypeError as e:
        raise ContractViolation(f"bad {name} section: {e}") from e
