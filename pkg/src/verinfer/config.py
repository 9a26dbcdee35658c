"""Experiment configuration: one structured file, one seed, named random substreams."""

from __future__ import annotations

import dataclasses
import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .labeling import LabelerConfig
from .models import ModelSpec, default_roster, validate_roster
from .proxy import ProxyConfig


class ConfigError(ValueError):
    pass


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named purpose (``corpus``, ``init:spec-a``, ``secrets``...)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def substream_seed(seed: int, name: str) -> int:
    return int(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]).generate_state(1)[0])


@dataclass
class CorpusConfig:
    path: str | None = None
    n_prompts: int = 5000
    T: int = 16
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    n_topics: int = 12


@dataclass
class SessionConfig:
    n_queries: int = 30
    tau: float = 0.5
    n_sessions: int = 200
    strategies: list[str] = field(
        default_factory=lambda: ["honest", "substitute:alt-small", "substitute:alt-mid",
                                 "substitute:alt-matched", "random", "replay-cache"]
    )
    replay_cache_size: int = 16
    adapter_budget: int = 400


@dataclass
class AttackSuiteConfig:
    direct_steps: int = 100
    direct_lr: float = 0.1
    direct_prompts: int = 500
    guessed_secrets: int = 30
    adapter_alt: str = "alt-small"
    adapter_budgets: list[int] = field(default_factory=lambda: [25, 50, 100, 200, 400])
    adapter_seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    adapter_secrets: int = 30
    adapter_epochs: int = 5
    adapter_batch_size: int = 128
    adapter_lr: float = 1e-3
    adapter_test_prompts: int = 500
    inverse_budgets: list[int] = field(default_factory=lambda: [1, 100, 500, 2000, 10000])
    inverse_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    inverse_epochs: int = 100
    # fine enough to resolve rates near 1e-5 at d_s=48
    inverse_test_pairs: int = 100_000
    # simple-protocol adapter-label and fine-tuning attacks; labels are public there
    simple_prompts: int = 400
    label_adapter_epochs: int = 100
    label_adapter_batch_size: int = 16
    finetune_epochs: int = 5
    finetune_batch_size: int = 8


@dataclass
class ExperimentConfig:
    seed: int = 0
    d_s: int = 16
    d_g: int = 64
    d_y: int = 32
    percentile: float = 0.95
    eval_secrets: int = 30
    m_star: int = 50
    n_star: int = 20
    rate_limit: int = 1
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    labeler: LabelerConfig = field(default_factory=LabelerConfig)
    proxy: ProxyConfig = field(default_factory=ProxyConfig)
    roster: list[ModelSpec] = field(default_factory=default_roster)
    session: SessionConfig = field(default_factory=SessionConfig)
    attacks: AttackSuiteConfig = field(default_factory=AttackSuiteConfig)

    def __post_init__(self):
        # the top-level dimensions are authoritative
        self.labeler.d_s = self.d_s
        self.labeler.d_y = self.d_y
        self.proxy.d_g = self.d_g
        self.validate()

    def validate(self) -> None:
        if min(self.d_s, self.d_g, self.d_y, self.corpus.T) < 1:
            raise ConfigError("d_s, d_g, d_y and T must be positive")
        if not 0.0 < self.percentile <= 1.0:
            raise ConfigError(f"percentile must lie in (0, 1], got {self.percentile}")
        if abs(sum(self.corpus.ratios) - 1.0) > 1e-9 or len(self.corpus.ratios) != 3:
            raise ConfigError(f"corpus ratios must be three numbers summing to 1, got {self.corpus.ratios}")
        if self.m_star < 1 or self.n_star < 1 or self.rate_limit < 0:
            raise ConfigError("m_star and n_star must be positive, rate_limit non-negative")
        if not 0.0 < self.session.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.session.tau}")
        try:
            validate_roster(self.roster)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        for m in self.roster:
            if m.max_len < self.corpus.T + 1:
                raise ConfigError(f"{m.name}: max_len {m.max_len} cannot hold T={self.corpus.T} plus a task token")

    def spec(self, name: str) -> ModelSpec:
        for m in self.roster:
            if m.name == name:
                return m
        raise ConfigError(f"no model named {name!r} in the roster")

    @property
    def specified(self) -> list[ModelSpec]:
        return [m for m in self.roster if m.role == "specified"]

    @property
    def alternatives(self) -> list[ModelSpec]:
        return [m for m in self.roster if m.role == "alternative"]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["corpus"]["ratios"] = list(self.corpus.ratios)
        return d


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from e


def config_from_dict(data: dict) -> ExperimentConfig:
    data = dict(data or {})
    nested = {
        "corpus": CorpusConfig,
        "labeler": LabelerConfig,
        "proxy": ProxyConfig,
        "session": SessionConfig,
        "attacks": AttackSuiteConfig,
    }
    kw = {}
    for key, cls in nested.items():
        if key in data:
            kw[key] = _build(cls, data.pop(key), key)
    if "corpus" in kw:
        kw["corpus"].ratios = tuple(kw["corpus"].ratios)
    if "roster" in data:
        roster = data.pop("roster")
        if not isinstance(roster, list):
            raise ConfigError("roster must be a list")
        kw["roster"] = [_build(ModelSpec, m, f"roster[{i}]") for i, m in enumerate(roster)]
    cfg = _build(ExperimentConfig, {**data, **kw}, "config")
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read config {p}: {e}") from e
    try:
        if p.suffix in (".yaml", ".yml"):
            import yaml

            data = yaml.safe_load(text)
        else:
            data = json.loads(text)
    except Exception as e:  # parse errors from either library
        raise ConfigError(f"cannot parse config {p}: {e}") from e
    return config_from_dict(data or {})
