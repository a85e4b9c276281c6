from .config import Stage, TrainConfig, parse_config, parse_config_text
from .optim import AdamWState, adamw_step, lr_at
from .checkpoint import (
    CheckpointError,
    read_container,
    write_container,
    load_checkpoint,
    save_checkpoint,
)
from .builders import (
    build_dense_model,
    build_samoe_model,
    fresh_expert,
    load_model,
    save_model,
)
from .loop import TrainResult, train

__all__ = [
    "AdamWState",
    "CheckpointError",
    "Stage",
    "TrainConfig",
    "TrainResult",
    "adamw_step",
    "build_dense_model",
    "build_samoe_model",
    "fresh_expert",
    "load_checkpoint",
    "load_model",
    "lr_at",
    "parse_config",
    "parse_config_text",
    "read_container",
    "save_checkpoint",
    "save_model",
    "train",
    "write_container",
]
