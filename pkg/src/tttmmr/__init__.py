"""Test-time training with multimodal reconstruction on synthetic geospatial tiles."""

from .datamodel import Dataset, ModalitySchema, Task, Tile, WorldConfig, default_schema, generate_world
from .model import ModelConfig, ModelParams, init_params
from .splits import SplitSet, geographic_partition, make_splits, random_partition
from .train import TrainConfig, joint_train
from .ttt import TttConfig, normalized_mean_gradient, run_ttt, select_iterations, ttt_update

__version__ = "0.1.0"

__all__ = [
    "Dataset", "ModalitySchema", "Task", "Tile", "WorldConfig", "default_schema", "generate_world",
    "ModelConfig", "ModelParams", "init_params",
    "SplitSet", "geographic_partition", "make_splits", "random_partition",
    "TrainConfig", "joint_train",
    "TttConfig", "normalized_mean_gradient", "run_ttt", "select_iterations", "ttt_update",
]
