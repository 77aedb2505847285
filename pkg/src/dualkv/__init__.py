"""Streaming dual-memory KV cache with dual-reference rotary injection and proximity recache."""

__version__ = "0.1.0"

from ._accel import BACKEND
from .generator import ConditionVector, LatentFrame, ToyBlock, encode_prompt, project_kv, step
from .memory import CacheEntry, DualMemoryCache, UpdateOutcome, importance, redundancy_scores
from .numerics import DomainError, cosine_similarity, scaled_dot_attention, softmax
from .recache import RecachePolicy, alpha, recache, recompute_new_entries
from .rope import InjectionAudit, RotaryTable, apply_rope, inject_global, inject_local
from .simulator import MetricsRecord, ScheduleEvent, StreamConfig, compare_policies, emit_metrics, run_stream

__all__ = [
    "BACKEND", "CacheEntry", "ConditionVector", "DomainError", "DualMemoryCache", "InjectionAudit",
    "LatentFrame", "MetricsRecord", "RecachePolicy", "RotaryTable", "ScheduleEvent", "StreamConfig",
    "ToyBlock", "UpdateOutcome", "alpha", "apply_rope", "compare_policies", "cosine_similarity",
    "emit_metrics", "encode_prompt", "importance", "inject_global", "inject_local", "project_kv",
    "recache", "recompute_new_entries", "redundancy_scores", "run_stream", "scaled_dot_attention",
    "softmax", "step",
]
