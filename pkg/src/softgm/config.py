"""Run configuration: one INI file fully determines a training or evaluation run.

Every section maps onto a parameter dataclass; keys that do not name a field
are rejected.  The resolved configuration serialises back to canonical INI
text, whose SHA-256 is the config hash stamped on checkpoints and reports.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from softgm.actuation import ActuationParams
from softgm.env import (DisturbanceConfig, EnvConfig, NoiseConfig, PerturbationConfig, RewardWeights,
                        SoftArmEnv)
from softgm.errors import ConfigError
from softgm.policy import GatConfig
from softgm.rod import ContactParams, RodParams
from softgm.scenario import LayoutConfig, ScenarioKind, build_scenario
from softgm.trainer import TrainConfig

__all__ = ["RunSettings", "EnvSettings", "EvalSettings", "RunConfig", "load_config", "parse_config"]


@dataclass(frozen=True)
class RunSettings:
    scenario: str = "basic"
    variant: str = "full"
    seed: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        ScenarioKind.parse(self.scenario)
        GatConfig.variant(self.variant)


@dataclass(frozen=True)
class EnvSettings:
    control_substeps: int = 50
    segment_length: float = 0.1
    sensing_radius: float = 0.15
    n_obs_max: int = 32
    divergence_penalty: float = -50.0


@dataclass(frozen=True)
class EvalSettings:
    episodes: int = 100
    seed: int = 10_000
    failed_agent_index: int = 2

    def __post_init__(self):
        if self.episodes < 1:
            raise ConfigError("eval episodes must be at least 1")


SECTIONS = {
    "run": RunSettings,
    "rod": RodParams,
    "actuation": ActuationParams,
    "contact": ContactParams,
    "env": EnvSettings,
    "reward": RewardWeights,
    "layout": LayoutConfig,
    "gat": GatConfig,
    "train": TrainConfig,
    "eval": EvalSettings,
    "noise": NoiseConfig,
    "disturbance": DisturbanceConfig,
}


def _parse_value(kind: str, raw: str, where: str):
    text = raw.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "tuple":
            return tuple(float(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"{where}: cannot read {raw!r} as {kind}") from None


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    rod: RodParams = field(default_factory=RodParams)
    actuation: ActuationParams = field(default_factory=ActuationParams)
    contact: ContactParams = field(default_factory=ContactParams)
    env: EnvSettings = field(default_factory=EnvSettings)
    reward: RewardWeights = field(default_factory=RewardWeights)
    layout: LayoutConfig = field(default_factory=LayoutConfig)
    gat: GatConfig = field(default_factory=GatConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalSettings = field(default_factory=EvalSettings)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    disturbance: DisturbanceConfig = field(default_factory=DisturbanceConfig)

    def with_overrides(self, section: str, **values) -> "RunConfig":
        block = dataclasses.replace(getattr(self, section), **values)
        out = dataclasses.replace(self, **{section: block})
        return out.resolved()

    def resolved(self) -> "RunConfig":
        """Propagate the run seed and ablation variant into the blocks that consume them."""
        gat = dataclasses.replace(self.gat, use_stage1=True, use_stage2=True)
        variant = GatConfig.variant(self.run.variant)
        gat = dataclasses.replace(gat, use_stage1=variant.use_stage1, use_stage2=variant.use_stage2)
        train = dataclasses.replace(self.train, seed=self.run.seed)
        return dataclasses.replace(self, gat=gat, train=train)

    def to_ini(self, include_output: bool = True) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            block = getattr(self, name)
            values = {}
            for f in dataclasses.fields(block):
                if name == "run" and f.name == "output_dir" and not include_output:
                    continue
                values[f.name] = _format_value(getattr(block, f.name))
            parser[name] = values
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @property
    def hash(self) -> str:
        """Content hash of everything that affects results (the output directory is excluded)."""
        return hashlib.sha256(self.to_ini(include_output=False).encode()).hexdigest()

    @property
    def scenario(self) -> ScenarioKind:
        return ScenarioKind.parse(self.run.scenario)

    def env_config(self) -> EnvConfig:
        return EnvConfig(rod=self.rod, actuation=self.actuation, contact=self.contact, reward=self.reward,
                         **dataclasses.asdict(self.env))

    def make_env(self, seed: int, scenario=None) -> SoftArmEnv:
        kind = self.scenario if scenario is None else ScenarioKind.parse(scenario)
        return SoftArmEnv(build_scenario(kind, seed, self.layout), self.env_config(), seed=seed)

    def env_factory(self, scenario=None):
        return lambda seed: self.make_env(seed, scenario)

    def perturbation(self, name: str | None) -> PerturbationConfig:
        if name is None or name == "none":
            return PerturbationConfig()
        if name == "noise":
            return PerturbationConfig(obs_noise=self.noise)
        if name == "fail":
            if not 0 <= self.eval.failed_agent_index < self.actuation.n_agents:
                raise ConfigError("failed_agent_index is outside the agent range")
            return PerturbationConfig(failed_agent_index=self.eval.failed_agent_index)
        if name == "disturb":
            return PerturbationConfig(disturbance=self.disturbance)
        raise ConfigError(f"unknown perturbation {name!r}; expected none, noise, fail or disturb")


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    # keep key case as written so typos are reported verbatim
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    blocks = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{source}: unknown section [{section}]; known: {', '.join(SECTIONS)}")
        cls = SECTIONS[section]
        kinds = {f.name: str(f.type) for f in dataclasses.fields(cls)}
        values = {}
        for key, raw in parser[section].items():
            if key not in kinds:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]; "
                                  f"known keys: {', '.join(kinds)}")
            values[key] = _parse_value(kinds[key], raw, f"{source} [{section}] {key}")
        try:
            blocks[section] = cls(**values)
        except TypeError as exc:
            raise ConfigError(f"{source} [{section}]: {exc}") from None
    return RunConfig(**blocks).resolved()


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config(path.read_text(), str(path))
