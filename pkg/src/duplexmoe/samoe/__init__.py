from .routing import ExpertId, ModalityTag, route
from .config import GQAError, SAMoEConfig, SpecialTokens
from .params import (
    ExpertParams,
    LoraAdapter,
    init_expert_params,
    lora_apply,
    lora_merge,
    start_touch_log,
    stop_touch_log,
)
from .cache import SequencingError, UnifiedKVCache
from .model import (
    SAMoEModel,
    dense_oracle_forward,
    forward_batch,
    forward_sequence,
    forward_token,
    sample_segment,
    sequence_loss,
)

__all__ = [
    "ExpertId",
    "ExpertParams",
    "GQAError",
    "LoraAdapter",
    "ModalityTag",
    "SAMoEConfig",
    "SAMoEModel",
    "SequencingError",
    "SpecialTokens",
    "UnifiedKVCache",
    "dense_oracle_forward",
    "forward_batch",
    "forward_sequence",
    "forward_token",
    "init_expert_params",
    "lora_apply",
    "lora_merge",
    "route",
    "sample_segment",
    "sequence_loss",
    "start_touch_log",
    "stop_touch_log",
]
