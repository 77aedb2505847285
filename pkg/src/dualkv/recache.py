"""Proximity-weighted recache of the KV cache at a prompt switch.

Each cached frame is blended as ``(1 - a) * old + a * new`` where ``a`` decays
linearly with the frame's distance from the generation frontier, capped at
``alpha_max`` and floored at 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .generator import ConditionVector, ToyBlock, project_kv
from .memory import CacheEntry, DualMemoryCache

MODES = ("proximity", "uniform", "flush")


@dataclass(frozen=True)
class RecachePolicy:
    alpha_max: float = 0.8
    recache_window: int = 9
    mode: str = "proximity"

    def __post_init__(self):
        if not 0.0 <= self.alpha_max <= 1.0:
            raise ValueError(f"alpha_max must lie in [0, 1], got {self.alpha_max}")
        if self.recache_window < 1:
            raise ValueError(f"recache_window must be >= 1, got {self.recache_window}")
        if self.mode not in MODES:
            raise ValueError(f"unknown recache mode {self.mode!r}; expected one of {MODES}")


def alpha(d_t: int, policy: RecachePolicy) -> float:
    if d_t < 0:
        raise ValueError("distance to the frontier must be non-negative")
    if policy.mode == "uniform":
        return 1.0
    return max(0.0, min(policy.alpha_max, 1.0 - d_t / policy.recache_window))


def blend(old: np.ndarray, new: np.ndarray, a: float) -> np.ndarray:
    if a == 0.0 or np.array_equal(old, new):
        return old
    if a == 1.0:
        return new
    return (1.0 - a) * old + a * new


def recompute_new_entries(
    cache: DualMemoryCache, new_prompt: ConditionVector, block: ToyBlock
) -> dict[int, CacheEntry]:
    """Keys/values of every cached frame re-projected under ``new_prompt``, keyed by abs_step."""
    out: dict[int, CacheEntry] = {}
    for e in cache.entries():
        if e.abs_step in out:
            continue
        k, v = project_kv(e.tokens, new_prompt, block)
        out[e.abs_step] = CacheEntry(e.tokens, k, v, e.latent, e.abs_step, e.shot_id, new_prompt.prompt_id)
    return out


def recache(
    cache: DualMemoryCache,
    new_entries: dict[int, CacheEntry],
    policy: RecachePolicy,
    current_step: int,
) -> int:
    """Blend every cached frame toward its recomputed counterpart; returns frames changed."""
    cached = {e.abs_step: e for e in cache.entries()}
    if set(new_entries) != set(cached):
        missing = sorted(set(cached) - set(new_entries))
        extra = sorted(set(new_entries) - set(cached))
        raise ValueError(f"recomputed entries misaligned with cache: missing={missing} extra={extra}")
    blended: dict[int, CacheEntry] = {}
    for step, old in cached.items():
        a = alpha(current_step - step, policy)
        if a == 0.0:
            continue
        new = new_entries[step]
        blended[step] = CacheEntry(
            old.tokens,
            blend(old.raw_key, new.raw_key, a),
            blend(old.value, new.value, a),
            blend(old.latent, new.latent, a),
            old.abs_step,
            old.shot_id,
            new.prompt_id,
        )
    cache.replace_entries(blended)
    return len(blended)
