"""Run configuration: one TOML file drives every command.

Unknown keys are rejected so that typos cannot silently fall back to
defaults. ``RunConfig.hash`` covers every field and is stamped into each
artifact the CLI writes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import tomli

from .diffusion import PretrainConfig
from .errors import ConfigError
from .numerics import stable_hash
from .scene_corpus import HELD_OUT_CONCEPTS, PRETRAIN_CONCEPTS, SUPERCLASS, CorpusConfig, concept
from .semantic import InversionConfig
from .spatial import LayoutTrainConfig


@dataclass
class SamplingConfig:
    steps: int = 50
    guidance_scale: float = 7.5
    batch: int = 25


@dataclass
class GateConfig:
    seeds: int = 100
    min_likelihood: float = 0.8


@dataclass
class SpatialConfig:
    step_size: float = 50.0
    inner_steps: int = 3
    per_pair: int = 10
    min_yield: float = 0.3
    min_records: int = 100
    # "generated": detector-annotated generations of the pretrained model;
    # "corpus": ground-truth boxes of two-object training scenes (plumbing runs)
    source: str = "generated"
    layout: LayoutTrainConfig = field(default_factory=LayoutTrainConfig)


@dataclass
class EvaluationConfig:
    concepts: list[str] = field(default_factory=lambda: list(HELD_OUT_CONCEPTS))
    partners: int = 6
    seeds: int = 25
    attention_seeds: int = 20


@dataclass
class SweepConfig:
    lambdas: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 0.95, 1.0])
    seeds: int = 25
    partners: int = 1


@dataclass
class RunConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    gate: GateConfig = field(default_factory=GateConfig)
    inversion: InversionConfig = field(default_factory=InversionConfig)
    spatial: SpatialConfig = field(default_factory=SpatialConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def hash(self) -> str:
        return stable_hash(json.dumps(self.to_dict(), sort_keys=True).encode())[:16]

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with the master seed pushed into every seeded section."""
        d = self.to_dict()
        d["seed"] = seed
        for section in ("corpus", "pretrain", "inversion"):
            d[section]["seed"] = seed
        d["spatial"]["layout"]["seed"] = seed
        return from_dict(d)

    def validate(self) -> "RunConfig":
        self.inversion.validate()
        self.corpus.grammar.validate()
        for name in self.evaluation.concepts:
            if name not in SUPERCLASS:
                raise ConfigError(f"evaluation concept {name!r} is not a held-out concept")
        if not 1 <= self.sampling.steps <= self.pretrain.T:
            raise ConfigError(f"sampling.steps must lie in 1..{self.pretrain.T}")
        if self.pretrain.dim % 4:
            raise ConfigError("pretrain.dim must be divisible by the 4 refiner heads")
        for name in self.evaluation.concepts:
            for n in (self.evaluation.partners, self.sweep.partners):
                if not 0 < n <= len(partner_pool(name)):
                    raise ConfigError(f"partner count {n} out of range for {name}")
        if self.spatial.source not in ("generated", "corpus"):
            raise ConfigError(f"spatial.source must be 'generated' or 'corpus', got {self.spatial.source!r}")
        for lam in self.sweep.lambdas:
            if not 0.0 <= lam <= 1.0:
                raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
        return self


def partner_pool(concept_name: str) -> list[str]:
    """Pretrained nouns whose colour differs from the concept.

    Ordered round-robin over colours with alternating shapes, so any prefix
    of the list covers as many colours as it can.
    """
    own = concept(concept_name).color
    colours = []
    for n in PRETRAIN_CONCEPTS:
        c = concept(n).color
        if c != own and c not in colours:
            colours.append(c)
    by = {(concept(n).color, concept(n).shape_kind): n for n in PRETRAIN_CONCEPTS}
    first, second = [], []
    for i, c in enumerate(colours):
        a, b = ("square", "circle") if i % 2 == 0 else ("circle", "square")
        first.append(by[(c, a)])
        second.append(by[(c, b)])
    return first + second


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"[{where}] must be a table")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown key {where + '.' if where else ''}{key}")
        f = names[key]
        default = f.default_factory() if f.default_factory is not dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{where}.{key}" if where else key)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            kwargs[key] = float(value)
        else:
            if default is not None and not isinstance(value, type(default)):
                raise ConfigError(f"{where}.{key}: expected {type(default).__name__}, got {type(value).__name__}")
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{where or 'root'}] {exc}") from exc


def from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    return cfg.validate()


def load_config(path: str | Path | None) -> RunConfig:
    """Load a TOML run config; ``None`` or a bare profile name selects a packaged profile."""
    if path is None or str(path) in PROFILES:
        text = resources.files("compinv.profiles").joinpath(f"{path or 'default'}.toml").read_text()
        source = f"profile {path or 'default'}"
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        text, source = p.read_text(), str(p)
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    return from_dict(data)


PROFILES = ("default", "smoke")
