"""The unified per-layer key/value cache shared by all experts."""

from __future__ import annotations

import numpy as np

from .config import SAMoEConfig
from .routing import ExpertId, ModalityTag


class SequencingError(RuntimeError):
    """Token positions arrived out of order or overflowed the context."""


class UnifiedKVCache:
    """Per-layer K/V rows plus one metadata row per consumed position.

    Whichever expert processes a position writes that position's K/V at
    every layer; attention later reads all rows regardless of producer.
    Rows are append-only; the history policy may delete rows but never
    rewrites one, and surviving rows keep their absolute position indices.
    """

    def __init__(self, cfg: SAMoEConfig, capacity: int | None = None):
        self.cfg = cfg
        if capacity is None:
            capacity = (cfg.max_context_blocks * cfg.tokens_per_block(False)
                        + 4 * cfg.slots_speech + 64)
        self.capacity = capacity
        dt = cfg.dtype
        kv, dh = cfg.n_kv_heads, cfg.d_head
        self.k = [np.empty((capacity, kv, dh), dtype=dt)
                  for _ in range(cfg.n_layers)]
        self.v = [np.empty((capacity, kv, dh), dtype=dt)
                  for _ in range(cfg.n_layers)]
        self.positions = np.empty(capacity, dtype=np.int64)
        self.experts = np.empty(capacity, dtype=np.int8)
        self.tags = np.empty(capacity, dtype=np.int8)
        self.ticks = np.empty(capacity, dtype=np.int64)
        self.length = 0
        self.next_position = 0
        self.current_tick = -1

    def begin_block(self, tick: int) -> None:
        """Stamp subsequent appends with the active block index."""
        self.current_tick = tick

    def check_position(self, position: int) -> None:
        if position != self.next_position:
            raise SequencingError(
                f"position {position} does not continue the stream "
                f"(expected {self.next_position})")
        if self.length >= self.capacity:
            raise SequencingError(
                f"context overflow: capacity {self.capacity} reached")

    def append_meta(self, position: int, expert: ExpertId, tag: ModalityTag) -> None:
        i = self.length
        self.positions[i] = position
        self.experts[i] = int(expert)
        self.tags[i] = int(tag)
        self.ticks[i] = self.current_tick
        self.length = i + 1
        self.next_position = position + 1

    def write(self, layer: int, k_row: np.ndarray, v_row: np.ndarray) -> None:
        # rows for the position announced by the preceding append_meta
        i = self.length - 1
        self.k[layer][i] = k_row
        self.v[layer][i] = v_row

    def keep(self, mask: np.ndarray) -> None:
        """Retain only masked-in rows (the history policy's delete primitive)."""
        n = int(mask.sum())
        for layer in range(self.cfg.n_layers):
            self.k[layer][:n] = self.k[layer][:self.length][mask]
            self.v[layer][:n] = self.v[layer][:self.length][mask]
        self.positions[:n] = self.positions[:self.length][mask]
        self.experts[:n] = self.experts[:self.length][mask]
        self.tags[:n] = self.tags[:self.length][mask]
        self.ticks[:n] = self.ticks[:self.length][mask]
        self.length = n

    def entries(self) -> list[tuple[int, ExpertId, ModalityTag, int]]:
        """(position, producing expert, tag, tick) per surviving row."""
        return [(int(self.positions[i]), ExpertId(int(self.experts[i])),
                 ModalityTag(int(self.tags[i])), int(self.ticks[i]))
                for i in range(self.length)]
