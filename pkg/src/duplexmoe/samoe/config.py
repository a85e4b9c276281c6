"""Model geometry and token-space configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .routing import ExpertId


class GQAError(ValueError):
    """Head counts incompatible with grouped-query attention."""


@dataclass(frozen=True)
class SpecialTokens:
    """Global ids of the structural tokens the sampler must emit/consume."""

    bos: int = 0
    eos: int = 1
    boi: int = 2
    eoi: int = 3
    bot: int = 4
    eot: int = 5
    boa: int = 6
    eoa: int = 7
    bop: int = 8
    eop: int = 9
    silence: int = -1
    noop: int = -1


@dataclass(frozen=True)
class SAMoEConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 4
    n_kv_heads: int = 2
    d_head: int = 16
    d_ff: int = 128
    vocab_size: int = 16
    # per-expert output vocab ranges as half-open global-id intervals
    speech_out: tuple[int, int] = (0, 16)
    action_out: tuple[int, int] = (0, 16)
    # per-expert rotary base; equal by default, configurable to differ
    speech_rope_theta: float = 10000.0
    action_rope_theta: float = 10000.0
    # block geometry: speech/image/text/action slots and image segment count
    slots_speech: int = 5
    slots_image: int = 4
    slots_text: int = 8
    slots_action: int = 2
    n_image_segments: int = 1
    max_context_blocks: int = 96
    precision: str = "f64"
    specials: SpecialTokens = field(default_factory=SpecialTokens)
    # payload id ranges used to restrict sampling to the active segment
    text_payload: tuple[int, int] = (0, 0)
    action_payload: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.n_heads % self.n_kv_heads != 0:
            raise GQAError(
                f"n_heads={self.n_heads} not divisible by "
                f"n_kv_heads={self.n_kv_heads}")
        if self.d_head % 2 != 0:
            raise GQAError(f"d_head={self.d_head} must be even for rotary embedding")
        if self.precision not in ("f64", "f32"):
            raise ValueError(f"precision must be f64 or f32, got {self.precision}")

    @property
    def dtype(self):
        import numpy as np
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def group_size(self) -> int:
        return self.n_heads // self.n_kv_heads

    def rope_theta(self, expert: ExpertId) -> float:
        return (self.speech_rope_theta if expert == ExpertId.SPEECH_EXPERT
                else self.action_rope_theta)

    def out_range(self, expert) -> tuple[int, int]:
        if expert == ExpertId.ACTION_EXPERT:
            return self.action_out
        return self.speech_out

    def tokens_per_block(self, speech_only: bool) -> int:
        per_img = 2 + (0 if speech_only else self.slots_image)
        return (2 + self.slots_speech
                + self.n_image_segments * per_img
                + 2 + self.slots_text
                + 2 + self.slots_action)

    def to_kv(self) -> dict[str, str]:
        """Flat key=value snapshot (specials/payload ranges are derived from
        the vocabulary and not stored)."""
        skip = {"specials", "text_payload", "action_payload",
                "speech_out", "action_out", "vocab_size"}
        out = {}
        for f in fields(self):
            if f.name in skip:
                continue
            out[f"model.{f.name}"] = str(getattr(self, f.name))
        return out
