"""Asymmetric history retention: full speech/text, windowed vision/action."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..samoe.cache import UnifiedKVCache
from ..samoe.routing import ModalityTag

# tags subject to the retention window; everything else is kept forever
VA_TAGS = (int(ModalityTag.IMAGE_IN), int(ModalityTag.B_IMAGE_IN),
           int(ModalityTag.ACTION_OUT), int(ModalityTag.B_ACTION_OUT))


@dataclass(frozen=True)
class HistoryPolicy:
    """Vision/action rows older than ``horizon`` blocks are dropped.

    ``horizon=None`` disables truncation. Speech, text, and prompt rows are
    never dropped.
    """

    horizon: int | None = 2


def truncate_history(cache: UnifiedKVCache, current_tick: int,
                     policy: HistoryPolicy) -> UnifiedKVCache:
    """Drop vision/action cache rows with tick < current_tick - horizon.

    Boundary rows fall with their segment. Surviving rows keep their order
    and absolute position indices, so rotary offsets stay untouched.
    """
    if policy.horizon is None or cache.length == 0:
        return cache
    tags = cache.tags[:cache.length]
    ticks = cache.ticks[:cache.length]
    stale = (np.isin(tags, VA_TAGS)
             & (ticks < current_tick - policy.horizon))
    if stale.any():
        cache.keep(~stale)
    return cache


def policy_attention_mask(tags: np.ndarray, ticks: np.ndarray,
                          policy: HistoryPolicy) -> np.ndarray:
    """Visibility mask reproducing streaming truncation in one full pass.

    With truncation applied at the end of every block, a query in block t
    still sees vision/action rows from blocks >= t - horizon - 1 (the last
    truncation ran with current = t - 1). Entry [i, j] says whether key j is
    visible to query i; intersect with causality before use.
    """
    t = len(tags)
    if policy.horizon is None:
        return np.ones((t, t), dtype=bool)
    tags = np.asarray(tags)
    ticks = np.asarray(ticks)
    windowed = np.isin(tags, VA_TAGS)
    stale = ticks[None, :] < (ticks[:, None] - policy.horizon - 1)
    return ~(windowed[None, :] & stale)
