"""Job configuration: TOML files plus ``--section.key=value`` overrides."""

from __future__ import annotations

import dataclasses
import sys
import typing
from dataclasses import dataclass, field, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w


class ConfigError(ValueError):
    pass


@dataclass
class JobSection:
    world_size: int = 1
    dump_folder: str = "./outputs"
    description: str = ""


@dataclass
class ModelSection:
    dim: int = 64
    n_layers: int = 2
    n_heads: int = 2
    vocab_size: int = 256
    seq_len: int = 128
    ffn_hidden: int = 128
    norm_eps: float = 1e-5
    rope_theta: float = 10000.0


@dataclass
class TrainingSection:
    steps: int = 20
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    local_batch: int = 2
    param_compute_dtype: str = "F64"
    reduce_dtype: str = "F64"
    log_interval: int = 10


@dataclass
class DataSection:
    task: str = "bigram"
    token_file: str = ""


@dataclass
class ParallelismSection:
    data_parallel_shard_degree: int = -1
    data_parallel_replicate_degree: int = 1
    tensor_parallel_degree: int = 1
    enable_loss_parallel: bool = False
    enable_async_tensor_parallel: bool = False
    async_tensor_parallel_chunks: int = 4
    context_parallel_degree: int = 1
    context_parallel_rotate_method: str = "allgather"
    pipeline_parallel_degree: int = 1
    pipeline_parallel_split_points: list[str] = field(default_factory=list)
    pipeline_parallel_schedule: str = "1f1b"
    pipeline_parallel_microbatches: int = 1


@dataclass
class ActivationCheckpointSection:
    mode: str = "none"
    selective_ac_type: str = "op"


@dataclass
class Float8Section:
    enabled: bool = False
    strategy: str = "dynamic"
    static_scale: float = 1.0
    amax_history_len: int = 16


@dataclass
class CheckpointSection:
    interval: int = 0
    async_mode: bool = False
    dir: str = "./checkpoints"
    resume: bool = False


@dataclass
class JobConfig:
    job: JobSection = field(default_factory=JobSection)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    data: DataSection = field(default_factory=DataSection)
    parallelism: ParallelismSection = field(default_factory=ParallelismSection)
    activation_checkpoint: ActivationCheckpointSection = field(default_factory=ActivationCheckpointSection)
    float8: Float8Section = field(default_factory=Float8Section)
    checkpoint: CheckpointSection = field(default_factory=CheckpointSection)


# TOML key ``async`` is a Python keyword
_ALIASES = {("checkpoint", "async"): "async_mode"}
_REVERSE = {(s, v): k for (s, k), v in _ALIASES.items()}


def _sections() -> dict[str, type]:
    hints = typing.get_type_hints(JobConfig)
    return {f.name: hints[f.name] for f in fields(JobConfig)}


def _coerce(section: str, key: str, tp, value, from_cli: bool):
    name = f"{section}.{key}"
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            if isinstance(value, bool):
                return value
            if from_cli and str(value).lower() in ("true", "1", "yes"):
                return True
            if from_cli and str(value).lower() in ("false", "0", "no"):
                return False
            raise ValueError
        if tp is int:
            if isinstance(value, bool):
                raise ValueError
            if isinstance(value, int):
                return value
            if from_cli:
                return int(value)
            raise ValueError
        if tp is float:
            if isinstance(value, bool):
                raise ValueError
            if isinstance(value, (int, float)):
                return float(value)
            if from_cli:
                return float(value)
            raise ValueError
        if tp is str:
            if isinstance(value, str):
                return value
            if from_cli:
                return str(value)
            raise ValueError
        if origin is list:
            if isinstance(value, list):
                return [str(v) for v in value]
            if from_cli:
                return [v.strip() for v in str(value).split(",") if v.strip()]
            raise ValueError
    except (TypeError, ValueError):
        pass
    raise ConfigError(f"{name}: cannot use {value!r} as {getattr(tp, '__name__', tp)}")


def _apply(cfg: JobConfig, section: str, key: str, value, from_cli: bool) -> None:
    sections = _sections()
    if section not in sections:
        raise ConfigError(f"unknown config section {section!r} (key {section}.{key})")
    attr = _ALIASES.get((section, key), key)
    hints = typing.get_type_hints(sections[section])
    if attr not in hints or (section, attr) in _REVERSE and key == attr:
        raise ConfigError(f"unknown config key {section}.{key}")
    setattr(getattr(cfg, section), attr, _coerce(section, key, hints[attr], value, from_cli))


def parse_config(toml_text: str | None = None, overrides: typing.Sequence[str] = ()) -> JobConfig:
    """Parse TOML text and apply ``--section.key=value`` overrides (overrides win)."""
    cfg = JobConfig()
    if toml_text:
        try:
            data = tomllib.loads(toml_text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"invalid TOML: {e}") from None
        for section, items in data.items():
            if not isinstance(items, dict):
                raise ConfigError(f"unknown config key {section!r} (expected a [section])")
            for key, value in items.items():
                _apply(cfg, section, key, value, from_cli=False)
    for item in overrides:
        if not item.startswith("--") or "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like --section.key=value")
        lhs, value = item[2:].split("=", 1)
        section, key = lhs.split(".", 1)
        _apply(cfg, section, key, value, from_cli=True)
    validate(cfg)
    return cfg


def validate(cfg: JobConfig) -> None:
    p, t = cfg.parallelism, cfg.training
    for name in ("data_parallel_replicate_degree", "tensor_parallel_degree", "context_parallel_degree",
                 "pipeline_parallel_degree", "pipeline_parallel_microbatches", "async_tensor_parallel_chunks"):
        if getattr(p, name) < 1:
            raise ConfigError(f"parallelism.{name} must be >= 1")
    if p.data_parallel_shard_degree == 0 or p.data_parallel_shard_degree < -1:
        raise ConfigError("parallelism.data_parallel_shard_degree must be -1 or >= 1")
    if cfg.job.world_size < 1:
        raise ConfigError("job.world_size must be >= 1")
    others = (p.data_parallel_replicate_degree * p.tensor_parallel_degree * p.context_parallel_degree
              * p.pipeline_parallel_degree)
    shard = p.data_parallel_shard_degree
    if shard == -1:
        if cfg.job.world_size % others:
            raise ConfigError(f"product dp_replicate*tp*cp*pp = {others} does not divide "
                              f"job.world_size = {cfg.job.world_size}")
        shard = cfg.job.world_size // others
    if shard * others != cfg.job.world_size:
        raise ConfigError(f"product dp_replicate*dp_shard*cp*tp*pp = {shard * others} != "
                          f"job.world_size = {cfg.job.world_size}")
    for name in ("steps", "local_batch", "log_interval"):
        if getattr(t, name) < 1:
            raise ConfigError(f"training.{name} must be >= 1")
    if t.local_batch % p.pipeline_parallel_microbatches:
        raise ConfigError("training.local_batch must be divisible by parallelism.pipeline_parallel_microbatches")
    if cfg.activation_checkpoint.mode not in ("none", "full", "selective"):
        raise ConfigError(f"activation_checkpoint.mode: unknown value {cfg.activation_checkpoint.mode!r}")
    if cfg.float8.strategy not in ("dynamic", "delayed", "static"):
        raise ConfigError(f"float8.strategy: unknown value {cfg.float8.strategy!r}")
    if p.context_parallel_rotate_method not in ("allgather", "alltoall_p2p_ring"):
        raise ConfigError(f"parallelism.context_parallel_rotate_method: unknown value "
                          f"{p.context_parallel_rotate_method!r}")
    if p.pipeline_parallel_schedule not in ("gpipe", "1f1b", "interleaved_1f1b", "zero_bubble"):
        raise ConfigError(f"parallelism.pipeline_parallel_schedule: unknown value {p.pipeline_parallel_schedule!r}")
    if cfg.data.task not in ("bigram", "uniform", "file"):
        raise ConfigError(f"data.task: unknown value {cfg.data.task!r}")
    if cfg.data.task == "file" and not cfg.data.token_file:
        raise ConfigError("data.token_file is required when data.task = 'file'")
    for dt in ("param_compute_dtype", "reduce_dtype"):
        if getattr(t, dt) not in ("F64", "F32"):
            raise ConfigError(f"training.{dt} must be F64 or F32")


def to_dict(cfg: JobConfig) -> dict:
    out = {}
    for f in fields(cfg):
        section = dataclasses.asdict(getattr(cfg, f.name))
        out[f.name] = {_REVERSE.get((f.name, k), k): v for k, v in section.items()}
    return out


def serialize(cfg: JobConfig) -> str:
    return tomli_w.dumps(to_dict(cfg))
