"""Experiment configuration: the YAML file as a tree of dataclasses."""

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml

from modules.agents import AgentConfig
from modules.state_hashing import SCHEMES
from utils import ConfigError, get_logger, load_config, stable_digest

logger = get_logger("experiment")

NETWORK_KINDS = ("full", "tiny")


@dataclass
class EnvConfig:
    layout: str = "data/layouts/original.txt"
    slippery: bool = False
    slip_probability: float = 0.1
    noisy: bool = False
    step_limit: int = 10000


@dataclass
class NetworkConfig:
    kind: str = "full"
    conv_channels: List[int] = field(default_factory=lambda: [32, 64])
    dense: int = 1024
    tiny_hidden: int = 64


@dataclass
class HashingConfig:
    scheme: str = "exact"
    bits: int = 64
    code_size: int = 512
    projection_seed: int = 0
    autoencoder_warmup_states: int = 50000
    autoencoder_epochs: int = 5
    autoencoder_batch_size: int = 32
    autoencoder_learning_rate: float = 0.0001
    binarization_noise: float = 0.3
    conv_channels: List[int] = field(default_factory=lambda: [32, 64])
    dense: int = 1024


@dataclass
class RunConfig:
    episodes: int = 5000
    seed: int = 0
    output_dir: str = "runs"
    record_wall_time: bool = False
    eval_trials: int = 20
    log_every: int = 100
    metrics_window: int = 100
    save_checkpoints: bool = True


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    hashing: HashingConfig = field(default_factory=HashingConfig)
    run: RunConfig = field(default_factory=RunConfig)
    logging: Dict[str, Any] = field(default_factory=lambda: {
        "level": "INFO", "log_dir": "logs", "console_enabled": True})

    SECTIONS = {"env": EnvConfig, "agent": AgentConfig, "network": NetworkConfig,
                "hashing": HashingConfig, "run": RunConfig}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentConfig":
        """Build from a (possibly partial) dict; omitted fields take their defaults."""
        data = data or {}
        unknown = set(data) - set(cls.SECTIONS) - {"logging"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown configuration section")
        sections = {}
        for name, section_cls in cls.SECTIONS.items():
            values = data.get(name) or {}
            if not isinstance(values, dict):
                raise ConfigError(name, "section must be a mapping")
            allowed = {f.name for f in fields(section_cls)}
            for key in values:
                if key not in allowed:
                    raise ConfigError(f"{name}.{key}", "unknown field")
            sections[name] = section_cls(**values)
        logging_section = dict(cls().logging)
        logging_section.update(data.get("logging") or {})
        config = cls(logging=logging_section, **sections)
        config.validate()
        return config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def validate(self) -> None:
        self.agent.validate()
        if self.env.step_limit < 1:
            raise ConfigError("env.step_limit", "must be at least 1")
        if not 0 <= self.env.slip_probability <= 1:
            raise ConfigError("env.slip_probability", "must be in [0, 1]")
        if self.network.kind not in NETWORK_KINDS:
            raise ConfigError("network.kind", f"must be one of {NETWORK_KINDS}")
        if self.hashing.scheme not in SCHEMES:
            raise ConfigError("hashing.scheme", f"must be one of {SCHEMES}")
        if not isinstance(self.run.episodes, int) or self.run.episodes < 0:
            raise ConfigError("run.episodes", "must be a non-negative integer")
        if self.run.eval_trials < 0:
            raise ConfigError("run.eval_trials", "must be non-negative")
        if self.run.metrics_window < 1:
            raise ConfigError("run.metrics_window", "must be at least 1")

    def digest(self) -> str:
        """Hash of everything that shapes the run except its seed and output location."""
        payload = self.to_dict()
        payload["run"] = {k: v for k, v in payload["run"].items() if k not in ("seed", "output_dir")}
        payload.pop("logging")
        return stable_digest(payload)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with `section.field` style overrides given as section__field keyword arguments."""
        data = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, name = dotted.split("__", 1)
            data.setdefault(section, {})[name] = value
        return ExperimentConfig.from_dict(data)

    def save(self, filepath: str) -> None:
        path = Path(filepath)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)

    @classmethod
    def load(cls, filepath: str, defaults_path: Optional[str] = None) -> "ExperimentConfig":
        return cls.from_dict(load_config(filepath, defaults_path))
