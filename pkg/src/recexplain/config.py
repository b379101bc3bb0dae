"""Pipeline configuration: TOML file, dotted CLI overrides, validation, digests.

Every config key lives in a section dataclass; the TOML file mirrors them
one-to-one and ``--set section.key=value`` overrides any of them. Template
references are either file paths (resolved relative to the config file) or
``builtin:<name>`` for the packaged defaults. The config digest excludes the
output directory, so two runs of the same experiment into different
directories produce identical stage digests.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Bad config file, unknown key, or invalid value."""


@dataclass
class DataSection:
    reviews: str = "reviews.jsonl"
    allow_duplicates: bool = False


@dataclass
class SplitSection:
    train_fraction: float = 0.8
    seed: int = 7


@dataclass
class ProfilerSection:
    arity: int = 4
    shuffle_seed: int = 11
    mode: str = "hierarchical"
    sample_size: int = 4
    max_concurrency: int = 1
    retries: int = 3
    backoff: float = 0.5
    opinion_template: str = "builtin:opinion"
    merge_template: str = "builtin:merge"
    include_item_profiles: bool = False


@dataclass
class GcnSection:
    d_gcn: int = 32
    d_llm: int = 64
    hidden: int = 64
    layers: int = 2
    learning_rate: float = 1e-3
    batch_size: int = 1024
    epochs: int = 1
    seed: int = 3
    per_token_normalization: bool = False
    vocab_size: int = 256
    head_seed: int = 17


@dataclass
class RetrievalSection:
    top_q: int = 8
    temperature: float = 0.07
    adapter_learning_rate: float = 1.0
    adapter_steps: int = 300
    adapter_batch_size: int = 8
    adapter_seed: int = 5
    negatives: str = "anchor"
    query_type: str = "latent"  # latent | profile
    embed_batch_size: int = 64


@dataclass
class GeneratorSection:
    temperature: float = 0.0
    max_output_tokens: int = 128
    template: str = "builtin:explain"
    # generator fine-tuning settings, recorded for documentation; no in-repo
    # computation consumes them
    finetune_learning_rate: float = 8e-4
    finetune_epochs: int = 2
    finetune_batch_size: int = 12


@dataclass
class EvalSection:
    judge_template: str = "builtin:judge"
    standard_orientation: bool = False


@dataclass
class PortsSection:
    mode: str = "mock"  # mock | http
    embed_dim: int = 64
    budget: int = 16000
    retries: int = 3
    backoff: float = 0.5
    model: str = ""
    summarizer_url: str = ""
    embedder_url: str = ""
    generator_url: str = ""
    judge_url: str = ""


@dataclass
class RunSection:
    out_dir: str = "runs/out"
    generate: bool = True
    evaluate: bool = True
    threads: int = 1
    seed: int = 0


_SECTIONS = {
    "data": DataSection,
    "split": SplitSection,
    "profiler": ProfilerSection,
    "gcn": GcnSection,
    "retrieval": RetrievalSection,
    "generator": GeneratorSection,
    "eval": EvalSection,
    "ports": PortsSection,
    "run": RunSection,
}


@dataclass
class PipelineConfig:
    data: DataSection = field(default_factory=DataSection)
    split: SplitSection = field(default_factory=SplitSection)
    profiler: ProfilerSection = field(default_factory=ProfilerSection)
    gcn: GcnSection = field(default_factory=GcnSection)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    eval: EvalSection = field(default_factory=EvalSection)
    ports: PortsSection = field(default_factory=PortsSection)
    run: RunSection = field(default_factory=RunSection)
    base_dir: Path = field(default_factory=Path.cwd)

    # -- paths ------------------------------------------------------------
    def resolve(self, path: str) -> Path:
        candidate = Path(path)
        return candidate if candidate.is_absolute() else self.base_dir / candidate

    @property
    def reviews_path(self) -> Path:
        return self.resolve(self.data.reviews)

    @property
    def out_dir(self) -> Path:
        return self.resolve(self.run.out_dir)

    def template_text(self, reference: str) -> str:
        return load_template(reference, self.base_dir)

    # -- integrity ---------------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            out[name] = dataclasses.asdict(getattr(self, name))
        return out

    def digest(self) -> str:
        """Digest of the semantic config; the output directory is excluded."""
        payload = self.to_dict()
        payload["run"] = dict(payload["run"])
        payload["run"].pop("out_dir")
        blob = json.dumps(payload, sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    def validate(self) -> None:
        if not (0.0 < self.split.train_fraction < 1.0):
            raise ConfigError("split.train_fraction must be in (0, 1)")
        if self.retrieval.query_type not in ("latent", "profile"):
            raise ConfigError(
                f"retrieval.query_type must be 'latent' or 'profile', "
                f"got {self.retrieval.query_type!r}"
            )
        if self.retrieval.top_q < 1:
            raise ConfigError("retrieval.top_q must be >= 1")
        if self.retrieval.temperature <= 0:
            raise ConfigError("retrieval.temperature must be positive")
        if self.retrieval.negatives not in ("paired", "anchor"):
            raise ConfigError("retrieval.negatives must be 'paired' or 'anchor'")
        if self.profiler.arity < 2:
            raise ConfigError("profiler.arity must be >= 2")
        if self.gcn.layers < 0:
            raise ConfigError("gcn.layers must be >= 0")
        if self.generator.max_output_tokens < 1:
            raise ConfigError("generator.max_output_tokens must be >= 1")
        if self.ports.mode not in ("mock", "http"):
            raise ConfigError("ports.mode must be 'mock' or 'http'")
        if self.ports.mode == "http":
            for key in ("summarizer_url", "embedder_url"):
                if not getattr(self.ports, key):
                    raise ConfigError(f"ports.{key} required in http mode")
        if self.run.threads < 1:
            raise ConfigError("run.threads must be >= 1")
        # referenced template files must exist before any stage runs
        for reference in (
            self.profiler.opinion_template,
            self.profiler.merge_template,
            self.generator.template,
            self.eval.judge_template,
        ):
            load_template(reference, self.base_dir)


def load_template(reference: str, base_dir: Path) -> str:
    """Template text from ``builtin:<name>`` package data or a file path."""
    if reference.startswith("builtin:"):
        name = reference.split(":", 1)[1]
        try:
            return (
                resources.files("recexplain")
                .joinpath(f"templates/{name}.txt")
                .read_text(encoding="utf-8")
            )
        except (FileNotFoundError, ModuleNotFoundError) as exc:
            raise ConfigError(f"no builtin template {name!r}") from exc
    path = Path(reference)
    if not path.is_absolute():
        path = base_dir / path
    if not path.exists():
        raise ConfigError(f"template file not found: {path}")
    return path.read_text(encoding="utf-8")


def _apply_section(config: PipelineConfig, name: str, values: dict) -> None:
    section = getattr(config, name)
    valid = {f.name: f.type for f in dataclasses.fields(type(section))}
    for key, value in values.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {name}.{key}")
        current = getattr(section, key)
        if isinstance(current, bool) and not isinstance(value, bool):
            raise ConfigError(f"{name}.{key} expects a boolean")
        if isinstance(current, float) and isinstance(value, int):
            value = float(value)
        if type(value) is not type(current):
            raise ConfigError(
                f"{name}.{key} expects {type(current).__name__}, "
                f"got {type(value).__name__}"
            )
        setattr(section, key, value)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> PipelineConfig:
    """Config from a TOML file plus ``section.key=value`` overrides."""
    config = PipelineConfig()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with path.open("rb") as handle:
            try:
                raw = tomllib.load(handle)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigError(f"{path}: invalid TOML ({exc})") from exc
        config.base_dir = path.parent.resolve()
        for name, values in raw.items():
            if name not in _SECTIONS:
                raise ConfigError(f"unknown config section [{name}]")
            if not isinstance(values, dict):
                raise ConfigError(f"config section [{name}] must be a table")
            _apply_section(config, name, values)
    for override in overrides or []:
        if "=" not in override:
            raise ConfigError(f"override {override!r} is not section.key=value")
        dotted, _, raw_value = override.partition("=")
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} is not section.key")
        section_name, _, key = dotted.partition(".")
        if section_name not in _SECTIONS:
            raise ConfigError(f"unknown config section {section_name!r}")
        section = getattr(config, section_name)
        if not hasattr(section, key):
            raise ConfigError(f"unknown config key {dotted}")
        current = getattr(section, key)
        _apply_section(config, section_name, {key: _parse_override(raw_value, current)})
    config.validate()
    return config


def _parse_override(raw: str, current: Any) -> Any:
    if isinstance(current, bool):
        lowered = raw.strip().lower()
        if lowered in ("true", "1", "yes"):
            return True
        if lowered in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw
