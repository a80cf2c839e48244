# app/config.py - experiment configuration file and its schema
import configparser
import logging
from pathlib import Path
from typing import Annotated, Any, Dict, List, Literal, Optional, Union

import orjson
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError, model_validator

from app.errors import ConfigError

logger = logging.getLogger(__name__)

Algorithm = Literal["lisp", "mpc-action-long", "mpc-action-short", "sac", "lisp-no-practice", "lisp-frozen"]
EnvironmentName = Literal["locomotion", "volcano", "minecraft", "point"]


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        value = value.strip()
        if not value:
            return []
        return [item.strip() for item in value.split(",")]
    return value


FloatList = Annotated[List[float], BeforeValidator(_split_csv)]
IntList = Annotated[List[int], BeforeValidator(_split_csv)]


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RunSection(Section):
    algorithm: Algorithm = "lisp"
    environment: EnvironmentName = "locomotion"
    seeds: IntList = Field(default_factory=lambda: [0])
    online_steps: int = Field(default=5000, ge=0)
    pretrain_iterations: int = Field(default=0, ge=0)
    dataset: Optional[str] = None
    dataset_fraction: float = Field(default=1.0, gt=0.0, le=1.0)
    out: str = "runs"
    tasks: FloatList = Field(default_factory=list)
    eval_steps: int = Field(default=1000, ge=1)
    model_error_probes: int = Field(default=1000, ge=1)


class EnvSection(Section):
    schedule: FloatList = Field(default_factory=lambda: [0.0, 1.0, -1.0, 2.0, -1.0])
    named_schedule: Optional[Literal["hopper", "ant"]] = None
    segment_length: Optional[int] = Field(default=None, ge=1)
    arena_size: int = Field(default=8, ge=4)
    step_scale: float = Field(default=0.5, gt=0.0)
    pitfalls: int = Field(default=1, ge=0)
    lava_penalty: float = 1.0
    performance_window: int = Field(default=100, ge=1)


class ModelSection(Section):
    ensemble_size: int = Field(default=4, ge=1)
    hidden_sizes: IntList = Field(default_factory=lambda: [256, 256, 256])
    activation: Literal["tanh", "relu"] = "tanh"
    learning_rate: float = Field(default=1e-3, gt=0.0)
    batch_size: int = Field(default=256, ge=1)
    train_every: int = Field(default=250, ge=1)
    train_steps: int = Field(default=200, ge=0)
    pretrain_max_steps: int = Field(default=20000, ge=0)
    eval_every: int = Field(default=100, ge=1)
    plateau_tolerance: float = Field(default=1e-3, ge=0.0)
    plateau_window: int = Field(default=10, ge=1)
    holdout_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    exact_disagreement: bool = True


class SkillsSection(Section):
    skill_dim: Optional[int] = Field(default=None, ge=1)
    policy_hidden: IntList = Field(default_factory=lambda: [256, 256])
    discriminator_hidden: IntList = Field(default_factory=lambda: [512, 512])
    learning_rate: float = Field(default=3e-4, gt=0.0)
    batch_size: int = Field(default=256, ge=1)
    gamma: float = Field(default=0.99, ge=0.0, le=1.0)
    tau: float = Field(default=0.005, gt=0.0, le=1.0)
    rollouts: int = Field(default=400, ge=0)
    generated_buffer_size: int = Field(default=5000, ge=1)
    prior_samples: int = Field(default=16, ge=1)
    discriminator_steps: int = Field(default=4, ge=0)
    policy_steps: int = Field(default=8, ge=0)
    practice_steps: int = Field(default=4, ge=0)
    reward_scale: float = 5.0
    disagreement_threshold: Optional[float] = Field(default=None, gt=0.0)
    disagreement_penalty: float = Field(default=30.0, gt=0.0)
    use_disagreement_penalty: bool = True
    use_practice: bool = True
    discriminator_dims: IntList = Field(default_factory=list)


class PlannerSection(Section):
    population: int = Field(default=400, ge=1)
    horizon: int = Field(default=180, ge=1)
    iterations: int = Field(default=10, ge=0)
    gamma: float = Field(default=0.99, ge=0.0, le=1.0)
    temperature: float = Field(default=0.01, gt=0.0)
    noise_std: float = Field(default=1.0, gt=0.0)
    repeat: int = Field(default=3, ge=1)
    particles: int = Field(default=20, ge=1)
    std_min: float = Field(default=0.1, gt=0.0)

    @model_validator(mode="after")
    def horizon_divisible_by_repeat(self):
        if self.horizon % self.repeat != 0:
            raise ValueError(f"horizon {self.horizon} is not divisible by repeat {self.repeat}")
        return self


class LoopSection(Section):
    replay_size: int = Field(default=10**6, ge=1)
    policy_iterations_per_step: int = Field(default=1, ge=0)
    updates_enabled: bool = True
    sac_updates_per_step: int = Field(default=1, ge=0)
    sac_warmup: int = Field(default=1000, ge=0)
    collect_episode_length: int = Field(default=1000, ge=1)
    collect_noise: float = Field(default=0.1, ge=0.0)


class AgentConfig(BaseModel):
    """Every hyperparameter of a run; serialized verbatim into each run directory."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    run: RunSection = Field(default_factory=RunSection)
    env: EnvSection = Field(default_factory=EnvSection)
    model: ModelSection = Field(default_factory=ModelSection)
    skills: SkillsSection = Field(default_factory=SkillsSection)
    planner: PlannerSection = Field(default_factory=PlannerSection)
    loop: LoopSection = Field(default_factory=LoopSection)

    @property
    def skill_dim(self) -> int:
        if self.skills.skill_dim is not None:
            return self.skills.skill_dim
        return 4 if self.run.environment == "locomotion" else 2

    @property
    def disagreement_threshold(self) -> float:
        if self.skills.disagreement_threshold is not None:
            return self.skills.disagreement_threshold
        return 0.05 if self.run.environment == "locomotion" else 0.1

    def update(self, section: str, **values: Any) -> "AgentConfig":
        """Copy with some keys of one section replaced, re-validated."""
        data = self.model_dump()
        data[section].update(values)
        return validate_config(data)

    def to_json(self) -> bytes:
        return orjson.dumps(self.model_dump(), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS)


def validate_config(data: Dict[str, Any]) -> AgentConfig:
    try:
        return AgentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config: {e}")


def parse_config(text: str, source: str = "<string>") -> AgentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"Cannot parse {source}: {e}")

    known = set(AgentConfig.model_fields)
    data: Dict[str, Dict[str, str]] = {}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"Unknown section [{section}] in {source}")
        data[section] = dict(parser.items(section))
    return validate_config(data)


def load_config(path: Union[str, Path, None]) -> AgentConfig:
    if path is None:
        return AgentConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except FileNotFoundError:
        raise ConfigError(f"Config file not found: {path}")
    config = parse_config(text, source=str(path))
    logger.info(f"Loaded config {path}: algorithm={config.run.algorithm} environment={config.run.environment}")
    return config


def dump_config(config: AgentConfig) -> str:
    """Render back to the key = value format; parse_config(dump_config(c)) == c."""
    lines = []
    for section, values in config.model_dump().items():
        lines.append(f"[{section}]")
        for key, value in values.items():
            if value is None:
                continue
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
