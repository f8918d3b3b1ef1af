"""Simulated multi-dimensional parallel training of a small decoder transformer."""

from .config import ConfigError, JobConfig, parse_config
from .dtensor import DTensor, Partial, Replicate, Shard
from .model import ModelConfig
from .parallelize import ACConfig, DataParallelConfig, Float8Config, ParallelDims
from .pipeline import PipelineConfig
from .simruntime import DeviceMesh, WorldError, spawn_world
from .trainer import RankTrainer, TrainSpec, oracle_losses

__all__ = [
    "ACConfig", "ConfigError", "DTensor", "DataParallelConfig", "DeviceMesh", "Float8Config", "JobConfig",
    "ModelConfig", "ParallelDims", "Partial", "PipelineConfig", "RankTrainer", "Replicate", "Shard",
    "TrainSpec", "WorldError", "oracle_losses", "parse_config", "spawn_world",
]
__version__ = "0.1.0"
