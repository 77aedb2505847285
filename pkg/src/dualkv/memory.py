"""Dual memory KV cache.

A sliding local window (LTM) holds the most recent frames. A small global
memory (GCM) holds anchor frames that the window never evicts; it changes only
through the diversity-aware replacement rule in ``DualMemoryCache.gcm_update``.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .numerics import DomainError, as_vector, cosine_matrix, mean_pool
from .rope import InjectionAudit, RotaryTable, rotate_rows


@dataclass(frozen=True, eq=False)
class CacheEntry:
    """One cached frame. ``raw_key`` is stored without any positional rotation."""

    tokens: np.ndarray
    raw_key: np.ndarray
    value: np.ndarray
    latent: np.ndarray
    abs_step: int
    shot_id: int = 0
    prompt_id: int = 0

    @classmethod
    def from_frame(cls, tokens, raw_key, value, abs_step, shot_id=0, prompt_id=0) -> "CacheEntry":
        tokens = np.asarray(tokens, dtype=np.float64)
        raw_key = np.asarray(raw_key, dtype=np.float64)
        value = np.asarray(value, dtype=np.float64)
        if not (tokens.shape[0] == raw_key.shape[0] == value.shape[0]):
            raise ValueError("tokens, raw_key and value must have the same token count")
        return cls(tokens, raw_key, value, mean_pool(tokens), int(abs_step), int(shot_id), int(prompt_id))

    @property
    def n_tokens(self) -> int:
        return self.raw_key.shape[0]

    def to_dict(self) -> dict:
        return {
            "abs_step": self.abs_step,
            "shot_id": self.shot_id,
            "prompt_id": self.prompt_id,
            "tokens": self.tokens.tolist(),
            "raw_key": self.raw_key.tolist(),
            "value": self.value.tolist(),
            "latent": self.latent.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CacheEntry":
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        return cls(arr("tokens"), arr("raw_key"), arr("value"), arr("latent"),
                   int(d["abs_step"]), int(d["shot_id"]), int(d["prompt_id"]))

    def same_as(self, other: "CacheEntry") -> bool:
        return (
            self.abs_step == other.abs_step
            and self.shot_id == other.shot_id
            and self.prompt_id == other.prompt_id
            and all(
                np.array_equal(getattr(self, f), getattr(other, f))
                for f in ("tokens", "raw_key", "value", "latent")
            )
        )


@dataclass(frozen=True)
class UpdateOutcome:
    """Audit record for one GCM update decision.

    ``importance``/``target_redundancy`` are None when no comparison was made
    (fill phase, disabled or frozen GCM).
    """

    replaced: bool
    evicted_step: int | None = None
    importance: float | None = None
    target_redundancy: float | None = None
    filled: bool = False


# --- replacement rule -----------------------------------------------------------

def importance(z, anchors: Iterable) -> float:
    """1 - max cosine similarity between ``z`` and any anchor latent."""
    lat = _latents(anchors)
    if lat.shape[0] == 0:
        raise DomainError("importance needs at least one anchor; use the fill path for an empty GCM")
    z = as_vector(z, "z")
    return 1.0 - float(cosine_matrix(z[None, :], lat)[0].max())


def redundancy_scores(anchors) -> list[tuple[object, float]]:
    """Leave-one-out redundancy: for each anchor, max similarity to the *other* anchors."""
    anchors = list(anchors)
    if len(anchors) < 2:
        raise DomainError("leave-one-out redundancy needs at least two anchors")
    sims = cosine_matrix(_latents(anchors), _latents(anchors))
    np.fill_diagonal(sims, -np.inf)
    return [(a, float(r)) for a, r in zip(anchors, sims.max(axis=1))]


def _latents(anchors) -> np.ndarray:
    rows = [a.latent if isinstance(a, CacheEntry) else np.asarray(a, dtype=np.float64) for a in anchors]
    if not rows:
        return np.empty((0, 0))
    return np.vstack(rows)


def _replacement_target(anchors: list[CacheEntry]) -> tuple[int, float]:
    if len(anchors) == 1:
        # leave-one-out is undefined for a single anchor; -1 lets any candidate in
        return 0, -1.0
    scores = [r for _, r in redundancy_scores(anchors)]
    best = max(scores)
    ties = [i for i, r in enumerate(scores) if r == best]
    i = min(ties, key=lambda j: anchors[j].abs_step)
    return i, best


# --- gathered view ----------------------------------------------------------------

@dataclass(frozen=True)
class Gathered:
    keys: np.ndarray
    values: np.ndarray
    is_gcm: np.ndarray
    abs_steps: np.ndarray
    positions: np.ndarray

    @property
    def provenance(self) -> list[tuple[str, int]]:
        return [("GCM" if g else "LTM", int(s)) for g, s in zip(self.is_gcm, self.abs_steps)]

    def __len__(self) -> int:
        return self.keys.shape[0]


class DualMemoryCache:
    """GCM of capacity ``gcm_capacity`` plus an LTM sliding window of ``ltm_window`` frames.

    ``gcm_frozen`` turns off replacement once the GCM is full (single-sink baseline).
    """

    def __init__(self, gcm_capacity: int = 3, ltm_window: int = 6, gcm_frozen: bool = False):
        if gcm_capacity < 0:
            raise ValueError("gcm_capacity must be >= 0")
        if ltm_window < 1:
            raise ValueError("ltm_window must be >= 1")
        self.gcm_capacity = gcm_capacity
        self.ltm_window = ltm_window
        self.gcm_frozen = gcm_frozen
        self.gcm: list[CacheEntry] = []
        self.ltm: deque[CacheEntry] = deque()
        self.shot_id = 0
        self.step = -1

    def __repr__(self) -> str:
        return (f"DualMemoryCache(gcm={[e.abs_step for e in self.gcm]}, "
                f"ltm={[e.abs_step for e in self.ltm]}, shot_id={self.shot_id})")

    @property
    def n_frames(self) -> int:
        """Distinct cached frames (a frame may sit in both memories)."""
        return len({e.abs_step for e in self.gcm} | {e.abs_step for e in self.ltm})

    @property
    def newest_local_index(self) -> int:
        return max(len(self.ltm) - 1, 0)

    def is_empty(self) -> bool:
        return not self.gcm and not self.ltm

    def ltm_push(self, entry: CacheEntry) -> CacheEntry | None:
        if self.ltm and entry.abs_step <= self.ltm[-1].abs_step:
            raise ValueError(
                f"out-of-order push: step {entry.abs_step} after {self.ltm[-1].abs_step}"
            )
        self.ltm.append(entry)
        self.step = max(self.step, entry.abs_step)
        if len(self.ltm) > self.ltm_window:
            return self.ltm.popleft()
        return None

    def gcm_update(self, entry: CacheEntry) -> UpdateOutcome:
        if self.gcm_capacity == 0:
            return UpdateOutcome(replaced=False)
        if any(a.abs_step == entry.abs_step for a in self.gcm):
            raise ValueError(f"step {entry.abs_step} already anchored in the GCM")
        if len(self.gcm) < self.gcm_capacity:
            self.gcm.append(entry)
            return UpdateOutcome(replaced=False, filled=True)
        if self.gcm_frozen:
            return UpdateOutcome(replaced=False)
        imp = importance(entry.latent, self.gcm)
        i, red = _replacement_target(self.gcm)
        if imp > red:
            evicted = self.gcm.pop(i)
            self.gcm.append(entry)
            return UpdateOutcome(True, evicted.abs_step, imp, red)
        return UpdateOutcome(False, None, imp, red)

    def ltm_reset(self, new_shot_id: int) -> int:
        if new_shot_id <= self.shot_id:
            raise ValueError(f"shot id must increase: {new_shot_id} <= {self.shot_id}")
        n = len(self.ltm)
        self.ltm.clear()
        self.shot_id = new_shot_id
        return n

    def entries(self) -> list[CacheEntry]:
        return list(self.gcm) + list(self.ltm)

    def replace_entries(self, mapping: dict[int, CacheEntry]) -> None:
        """Swap entries by abs_step in both memories (used by recache)."""
        self.gcm = [mapping.get(e.abs_step, e) for e in self.gcm]
        self.ltm = deque(mapping.get(e.abs_step, e) for e in self.ltm)

    def gather(self, table: RotaryTable, audit: InjectionAudit | None = None) -> Gathered:
        """Rotated keys and raw values: GCM tokens at index 0, then LTM tokens at 0..len-1."""
        if self.is_empty():
            raise DomainError("gather on an empty cache")
        table.check_window(len(self.ltm))
        gcm = list(self.gcm)
        ltm = list(self.ltm)
        raw = np.vstack([e.raw_key for e in gcm + ltm])
        values = np.vstack([e.value for e in gcm + ltm])
        positions = np.concatenate(
            [np.zeros(e.n_tokens, dtype=np.int64) for e in gcm]
            + [np.full(e.n_tokens, i, dtype=np.int64) for i, e in enumerate(ltm)]
        )
        is_gcm = np.concatenate(
            [np.ones(e.n_tokens, dtype=bool) for e in gcm]
            + [np.zeros(e.n_tokens, dtype=bool) for e in ltm]
        )
        steps = np.concatenate([np.full(e.n_tokens, e.abs_step, dtype=np.int64) for e in gcm + ltm])
        keys = raw.copy()
        n_gcm = int(is_gcm.sum())
        if ltm:
            keys[n_gcm:] = rotate_rows(raw[n_gcm:], positions[n_gcm:], table)
        if audit is not None:
            if n_gcm:
                audit.note_global(0, n_gcm)
            if ltm:
                audit.note_local(len(ltm) - 1, len(keys) - n_gcm)
        return Gathered(keys, values, is_gcm, steps, positions)

    # --- snapshots ---------------------------------------------------------------

    def to_snapshot(self) -> dict:
        return {
            "gcm": [e.to_dict() for e in self.gcm],
            "ltm": [e.to_dict() for e in self.ltm],
            "shot_id": self.shot_id,
            "step": self.step,
            "gcm_capacity": self.gcm_capacity,
            "ltm_window": self.ltm_window,
            "gcm_frozen": self.gcm_frozen,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_snapshot(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_snapshot(cls, data: dict) -> "DualMemoryCache":
        cache = cls(int(data["gcm_capacity"]), int(data["ltm_window"]), bool(data.get("gcm_frozen", False)))
        cache.gcm = [CacheEntry.from_dict(d) for d in data["gcm"]]
        cache.ltm = deque(CacheEntry.from_dict(d) for d in data["ltm"])
        cache.shot_id = int(data["shot_id"])
        cache.step = int(data["step"])
        return cache

    @classmethod
    def from_json(cls, text: str) -> "DualMemoryCache":
        return cls.from_snapshot(json.loads(text))


def window_only_cache(ltm_window: int = 6) -> DualMemoryCache:
    return DualMemoryCache(0, ltm_window)


def single_sink_cache(ltm_window: int = 6) -> DualMemoryCache:
    return DualMemoryCache(1, ltm_window, gcm_frozen=True)
