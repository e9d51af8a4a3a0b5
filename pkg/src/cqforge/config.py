"""Run configuration.

Every knob has a dotted key (``merge.tau``, ``sample.mix``, ...). Values are
resolved with precedence flag > environment > config file > default.
Environment variables use the ``CQFORGE_`` prefix with ``__`` for the dot,
e.g. ``CQFORGE_SAMPLE__CUTOFF=5``.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from cqforge.queries import QueryKind, parse_mix

ENV_PREFIX = "CQFORGE_"


@dataclass
class MergeConfig:
    enabled: bool = True
    rules: bool = True
    tau: float = 0.95
    provider: str = "jaccard"  # jaccard | file | http
    embeddings: Optional[str] = None
    endpoint: Optional[str] = None
    blocking: str = "auto"  # auto | exact | tokens
    missing: str = "error"  # error | skip


@dataclass
class PlausibilityConfig:
    enabled: bool = True
    threshold: float = 0.5
    provider: str = "graph"  # graph (scores in the input file) | constant | file | http
    scores: Optional[str] = None
    endpoint: Optional[str] = None
    default_score: float = 1.0


@dataclass
class SampleConfig:
    cutoff: int = 10
    mix: dict = field(default_factory=lambda: {"2i": 10, "2p": 10})
    seed: int = 0
    retries: int = 20


@dataclass
class DistractorConfig:
    random_count: int = 2
    adversarial_count: int = 2
    stopwords: Optional[str] = None


@dataclass
class VerbalizeConfig:
    mode: str = "rule"  # rule | llm | llm-with-rule-fallback
    endpoint: Optional[str] = None
    max_inflight: int = 4
    retries: int = 2
    names: Optional[str] = None


@dataclass
class CurationConfig:
    enabled: bool = True
    k: int = 20


@dataclass
class EmitConfig:
    generative_mode: str = "auto"  # auto | compact | verbalized


@dataclass
class RunConfig:
    input: Optional[str] = None
    output: str = "out"
    workers: int = 1
    merge: MergeConfig = field(default_factory=MergeConfig)
    plausibility: PlausibilityConfig = field(default_factory=PlausibilityConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    distractors: DistractorConfig = field(default_factory=DistractorConfig)
    verbalize: VerbalizeConfig = field(default_factory=VerbalizeConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    emit: EmitConfig = field(default_factory=EmitConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["sample"]["mix"] = {k.value: v for k, v in parse_mix(d["sample"]["mix"]).items()}
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True, allow_unicode=True)

    @property
    def mix(self) -> dict[QueryKind, int]:
        return parse_mix(self.sample.mix)


class ConfigError(ValueError):
    pass


def config_keys() -> dict[str, type]:
    """Every dotted key with its value type."""
    out: dict[str, type] = {}

    def walk(cls, prefix: str):
        hints = typing.get_type_hints(cls)
        for f in dataclasses.fields(cls):
            tp = hints[f.name]
            if dataclasses.is_dataclass(tp):
                walk(tp, f"{prefix}{f.name}.")
            else:
                out[prefix + f.name] = tp

    walk(RunConfig, "")
    return out


def _coerce(key: str, tp: Any, value: Any) -> Any:
    args = typing.get_args(tp)
    if type(None) in args:
        if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
            return None
        tp = next(a for a in args if a is not type(None))
    try:
        if tp is bool:
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
        if tp is dict:
            if key == "sample.mix":
                return {k.value: v for k, v in parse_mix(value).items()}
            if isinstance(value, str):
                value = yaml.safe_load(value)
            return dict(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def _flatten(d: Mapping, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, Mapping) and key != "sample.mix":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def set_key(cfg: RunConfig, key: str, value: Any) -> None:
    keys = config_keys()
    if key not in keys:
        raise ConfigError(f"unknown config key {key!r}")
    *path, last = key.split(".")
    obj = cfg
    for p in path:
        obj = getattr(obj, p)
    setattr(obj, last, _coerce(key, keys[key], value))


def load_config(
    path: Optional[str | Path] = None,
    env: Optional[Mapping[str, str]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> RunConfig:
    """Resolve a RunConfig from defaults, a YAML/JSON file, env and overrides."""
    cfg = RunConfig()
    if path is not None:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        if not isinstance(data, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        for key, value in _flatten(data).items():
            set_key(cfg, key, value)
    env = os.environ if env is None else env
    for key in config_keys():
        name = ENV_PREFIX + key.upper().replace(".", "__")
        if name in env:
            set_key(cfg, key, env[name])
    for key, value in (overrides or {}).items():
        set_key(cfg, key, value)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    checks = [
        (0.0 < cfg.merge.tau <= 1.0, "merge.tau must be in (0, 1]"),
        (cfg.merge.provider in ("jaccard", "file", "http"), "merge.provider must be jaccard|file|http"),
        (cfg.merge.blocking in ("auto", "exact", "tokens"), "merge.blocking must be auto|exact|tokens"),
        (0.0 <= cfg.plausibility.threshold <= 1.0, "plausibility.threshold must be in [0, 1]"),
        (cfg.plausibility.provider in ("graph", "constant", "file", "http"),
         "plausibility.provider must be graph|constant|file|http"),
        (cfg.sample.cutoff >= 1, "sample.cutoff must be >= 1"),
        (cfg.sample.retries >= 1, "sample.retries must be >= 1"),
        (cfg.verbalize.mode in ("rule", "llm", "llm-with-rule-fallback"),
         "verbalize.mode must be rule|llm|llm-with-rule-fallback"),
        (cfg.curation.k >= 1, "curation.k must be >= 1"),
        (cfg.emit.generative_mode in ("auto", "compact", "verbalized"),
         "emit.generative_mode must be auto|compact|verbalized"),
        (cfg.workers >= 1, "workers must be >= 1"),
        (cfg.distractors.random_count >= 0 and cfg.distractors.adversarial_count >= 0,
         "distractor counts must be >= 0"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)
    if cfg.merge.provider == "file" and cfg.merge.enabled and not cfg.merge.embeddings:
        raise ConfigError("merge.provider=file needs merge.embeddings")
    if cfg.plausibility.provider == "file" and cfg.plausibility.enabled and not cfg.plausibility.scores:
        raise ConfigError("plausibility.provider=file needs plausibility.scores")
    if cfg.verbalize.mode != "rule" and not cfg.verbalize.endpoint:
        raise ConfigError(f"verbalize.mode={cfg.verbalize.mode} needs verbalize.endpoint")
    parse_mix(cfg.sample.mix)
