"""
Declarative pipeline configuration
"""

from __future__ import annotations

import dataclasses
import logging
import os
import pathlib
from typing import Any, Dict, Tuple, Type

import tomlkit
from tomlkit.exceptions import TOMLKitError
from tomlkit.items import Table

from proofpipe.buffers import BufferConfig
from proofpipe.curriculum import CurriculumConfig, SftConfig
from proofpipe.exceptions import ConfigParseError, ConfigValidationError, ReportIOError
from proofpipe.objective import ClipConfig, MixConfig
from proofpipe.rewards import RewardChainConfig
from proofpipe.sampler import SamplerConfig
from proofpipe.training import SeedConfig, TaskConfig, TrainConfig
from proofpipe.tts import TtsConfig

logger = logging.getLogger(__name__)

CONFIG_ENVVAR = "PROOFPIPE_CONFIG"


@dataclasses.dataclass(frozen=True)
class PipelineConfig:
    """
    Every component's settings; defaults reproduce the full-scale regime
    """

    curriculum: CurriculumConfig = dataclasses.field(default_factory=CurriculumConfig)
    sft: SftConfig = dataclasses.field(default_factory=SftConfig)
    sampler: SamplerConfig = dataclasses.field(default_factory=SamplerConfig)
    buffers: BufferConfig = dataclasses.field(default_factory=BufferConfig)
    clip: ClipConfig = dataclasses.field(default_factory=ClipConfig)
    mix: MixConfig = dataclasses.field(default_factory=MixConfig)
    rewards: RewardChainConfig = dataclasses.field(default_factory=RewardChainConfig)
    tts: TtsConfig = dataclasses.field(default_factory=TtsConfig)
    task: TaskConfig = dataclasses.field(default_factory=TaskConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    seeds: SeedConfig = dataclasses.field(default_factory=SeedConfig)

    def __post_init__(self) -> None:
        if self.mix.replay_ratio != self.buffers.replay_ratio:
            msg = f"must equal buffers.replay_ratio ({self.buffers.replay_ratio})"
            raise ConfigValidationError("objective.replay_ratio", msg)
        if self.task.response_length > self.sampler.max_response_tokens:
            msg = "must not be longer than sampler.max_response_tokens"
            raise ConfigValidationError("task.target", msg)


# TOML table -> (PipelineConfig attribute, dataclass) for every single-class table
SIMPLE_TABLES: Dict[str, Tuple[str, Type[Any]]] = {
    "curriculum": ("curriculum", CurriculumConfig),
    "sft": ("sft", SftConfig),
    "sampler": ("sampler", SamplerConfig),
    "buffers": ("buffers", BufferConfig),
    "rewards": ("rewards", RewardChainConfig),
    "tts": ("tts", TtsConfig),
    "task": ("task", TaskConfig),
    "train": ("train", TrainConfig),
    "seeds": ("seeds", SeedConfig),
}
OBJECTIVE_TABLE = "objective"
OBJECTIVE_KEYS = {"epsilon": "clip", "replay_ratio": "mix"}
TABLE_ORDER = (
    "curriculum",
    "sft",
    "sampler",
    "buffers",
    OBJECTIVE_TABLE,
    "rewards",
    "tts",
    "task",
    "train",
    "seeds",
)


def _coerce(cls: Type[Any], table: str, values: dict[str, Any]) -> dict[str, Any]:
    """
    Match TOML values to the dataclass field types
    """
    fields = {field.name: field for field in dataclasses.fields(cls)}
    coerced: dict[str, Any] = {}
    for key, value in values.items():
        if key not in fields:
            msg = f"unknown key, expected one of {', '.join(sorted(fields))}"
            raise ConfigValidationError(f"{table}.{key}", msg)
        default = fields[key].default
        if isinstance(value, list):
            value = tuple(value)
        elif isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        elif (
            default is not dataclasses.MISSING
            and not isinstance(value, type(default))
            and not (isinstance(default, tuple) and isinstance(value, tuple))
        ):
            msg = f"expected {type(default).__name__}, got {type(value).__name__}"
            raise ConfigValidationError(f"{table}.{key}", msg)
        coerced[key] = value
    return coerced


def _build(cls: Type[Any], table: str, values: dict[str, Any]) -> Any:
    try:
        return cls(**_coerce(cls, table, values))
    except ConfigValidationError as e:
        if e.key.startswith(f"{table}."):
            raise
        raise e.with_prefix(table) from e


def config_from_dict(data: dict[str, Any]) -> PipelineConfig:
    """
    Build a :class:`PipelineConfig` from parsed TOML, defaults filling the gaps

    Raises
    ------
    ConfigValidationError
        For unknown tables or keys and for invariant violations, naming
        the offending ``table.key``
    """
    components: dict[str, Any] = {}
    for table, values in data.items():
        if not isinstance(values, dict):
            msg = "must be a table"
            raise ConfigValidationError(table, msg)
        if table == OBJECTIVE_TABLE:
            for key in values:
                if key not in OBJECTIVE_KEYS:
                    msg = f"unknown key, expected one of {', '.join(sorted(OBJECTIVE_KEYS))}"
                    raise ConfigValidationError(f"{table}.{key}", msg)
            if "epsilon" in values:
                components["clip"] = _build(
                    ClipConfig, table, {"epsilon": values["epsilon"]}
                )
            if "replay_ratio" in values:
                components["mix"] = _build(
                    MixConfig, table, {"replay_ratio": values["replay_ratio"]}
                )
            continue
        if table not in SIMPLE_TABLES:
            known = sorted([*SIMPLE_TABLES, OBJECTIVE_TABLE])
            msg = f"unknown table, expected one of {', '.join(known)}"
            raise ConfigValidationError(table, msg)
        attribute, cls = SIMPLE_TABLES[table]
        components[attribute] = _build(cls, table, values)
    # one replay_ratio drives both batch mixing and the objective weight
    if "mix" not in components and "buffers" in components:
        components["mix"] = MixConfig(replay_ratio=components["buffers"].replay_ratio)
    elif "mix" in components and "buffers" not in components:
        components["buffers"] = _build(
            BufferConfig, "buffers", {"replay_ratio": components["mix"].replay_ratio}
        )
    return PipelineConfig(**components)


def load_config(path: pathlib.Path | None) -> PipelineConfig:
    """
    Read a TOML config file; ``None`` gives every default

    Raises
    ------
    ConfigParseError
        When the file cannot be read or is not valid TOML
    ConfigValidationError
        When a value is unknown or out of range
    """
    if path is None:
        return PipelineConfig()
    path = pathlib.Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        msg = f"Could not read config {path}: {e}"
        raise ConfigParseError(msg) from e
    try:
        document = tomlkit.parse(text)
    except TOMLKitError as e:
        msg = f"{path}: invalid TOML ({e})"
        raise ConfigParseError(msg) from e
    logger.debug("[proofpipe] Loaded config from %s", path)
    return config_from_dict(document.unwrap())


def _table(component: Any) -> Table:
    table = tomlkit.table()
    for field in dataclasses.fields(component):
        value = getattr(component, field.name)
        table.add(field.name, list(value) if isinstance(value, tuple) else value)
    return table


def config_to_document(cfg: PipelineConfig) -> tomlkit.TOMLDocument:
    """
    Every field of ``cfg`` as a TOML document
    """
    document = tomlkit.document()
    for table in TABLE_ORDER:
        if table == OBJECTIVE_TABLE:
            objective = tomlkit.table()
            objective.add("epsilon", cfg.clip.epsilon)
            objective.add("replay_ratio", cfg.mix.replay_ratio)
            document.add(table, objective)
        else:
            document.add(table, _table(getattr(cfg, SIMPLE_TABLES[table][0])))
    return document


def save_config(cfg: PipelineConfig, path: pathlib.Path) -> pathlib.Path:
    """
    Write ``cfg`` so that :func:`load_config` returns an equal config
    """
    path = pathlib.Path(path)
    try:
        path.write_text(tomlkit.dumps(config_to_document(cfg)), encoding="utf-8")
    except OSError as e:
        msg = f"Could not write config {path}: {e}"
        raise ReportIOError(msg) from e
    return path


def resolve_config_path(option: pathlib.Path | None) -> pathlib.Path | None:
    """
    The ``--config`` path, else ``$PROOFPIPE_CONFIG``, else ``None``
    """
    if option is not None:
        return pathlib.Path(option)
    value = os.environ.get(CONFIG_ENVVAR)
    return pathlib.Path(value) if value else None
