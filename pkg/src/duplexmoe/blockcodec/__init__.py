from .vocab import VocabLayout, Color, COLORS
from .codec import (
    Block,
    CodecError,
    DecodedStream,
    Mode,
    Segment,
    block_from_text,
    block_to_text,
    decode_stream,
    encode_block,
    encode_stream,
    prompt_prefix,
)
from .history import HistoryPolicy, policy_attention_mask, truncate_history

__all__ = [
    "Block",
    "COLORS",
    "CodecError",
    "Color",
    "DecodedStream",
    "HistoryPolicy",
    "Mode",
    "Segment",
    "VocabLayout",
    "block_from_text",
    "block_to_text",
    "decode_stream",
    "encode_block",
    "encode_stream",
    "policy_attention_mask",
    "prompt_prefix",
    "truncate_history",
]
