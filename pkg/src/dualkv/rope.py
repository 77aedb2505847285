"""Rotary position embedding on the temporal axis, with dual-reference injection.

Keys are cached un-rotated. At attention time global anchors are rotated at
index 0 and local-window frames at small relative indices in ``[0, max_index]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .numerics import as_rows


class PositionalRangeError(ValueError):
    pass


@dataclass(frozen=True)
class RotaryTable:
    dim: int
    base: float = 10000.0
    max_index: int = 21
    frequencies: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dim <= 0 or self.dim % 2:
            raise ValueError(f"rotary dim must be a positive even integer, got {self.dim}")
        if self.base <= 0:
            raise ValueError("rotary base must be positive")
        if self.max_index < 0:
            raise ValueError("max_index must be non-negative")
        freqs = self.base ** (-np.arange(0, self.dim, 2, dtype=np.float64) / self.dim)
        freqs.setflags(write=False)
        object.__setattr__(self, "frequencies", freqs)

    def check_window(self, window: int) -> None:
        if window > self.max_index + 1:
            raise PositionalRangeError(
                f"window exceeds positional range: W={window} > max_index+1={self.max_index + 1}"
            )


@dataclass
class InjectionAudit:
    """Counts every rotation index handed out by ``inject_global``/``inject_local``."""

    global_calls: int = 0
    local_calls: int = 0
    max_global_index: int = 0
    max_local_index: int = -1
    step_max_local: int = -1
    step_max_global: int = 0

    def begin_step(self) -> None:
        self.step_max_local = -1
        self.step_max_global = 0

    def note_global(self, index: int, count: int = 1) -> None:
        self.global_calls += count
        self.max_global_index = max(self.max_global_index, index)
        self.step_max_global = max(self.step_max_global, index)

    def note_local(self, index: int, count: int = 1) -> None:
        self.local_calls += count
        self.max_local_index = max(self.max_local_index, index)
        self.step_max_local = max(self.step_max_local, index)


def rotate_rows(x, positions, table: RotaryTable) -> np.ndarray:
    """Rotate each row of ``x`` at its own integer position."""
    x = as_rows(x, "x")
    if x.shape[1] != table.dim:
        raise ValueError(f"dim {x.shape[1]} does not match rotary table dim {table.dim}")
    pos = np.broadcast_to(np.asarray(positions, dtype=np.float64), (x.shape[0],))
    if np.any(pos < 0):
        raise ValueError("rotary positions must be non-negative")
    return _accel.rope_rows(x, np.ascontiguousarray(pos), table.frequencies)


def apply_rope(x, position: int, table: RotaryTable) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if position < 0:
        raise ValueError("rotary position must be non-negative")
    if position == 0:
        if x.shape[-1] != table.dim:
            raise ValueError(f"dim {x.shape[-1]} does not match rotary table dim {table.dim}")
        return x.copy()
    out = rotate_rows(x, position, table)
    return out[0] if x.ndim == 1 else out


def inject_global(raw_key, table: RotaryTable, audit: InjectionAudit | None = None) -> np.ndarray:
    """Time-invariant injection: always index 0, i.e. the raw key itself."""
    raw_key = np.asarray(raw_key, dtype=np.float64)
    if audit is not None:
        audit.note_global(0, 1 if raw_key.ndim == 1 else raw_key.shape[0])
    return apply_rope(raw_key, 0, table)


def local_index(slot: int, newest_local_index: int, window_len: int) -> int:
    # oldest frame sits at newest - len + 1; the block is re-based so that is 0
    return newest_local_index - (window_len - 1 - slot)


def inject_local(
    raw_key,
    slot: int,
    newest_local_index: int,
    table: RotaryTable,
    window_len: int | None = None,
    audit: InjectionAudit | None = None,
) -> np.ndarray:
    if window_len is None:
        window_len = newest_local_index + 1
    if not 0 <= slot < window_len:
        raise PositionalRangeError(f"slot {slot} outside window of {window_len}")
    idx = local_index(slot, newest_local_index, window_len)
    if not 0 <= idx <= table.max_index:
        raise PositionalRangeError(f"local index {idx} outside [0, {table.max_index}]")
    raw_key = np.asarray(raw_key, dtype=np.float64)
    if audit is not None:
        audit.note_local(idx, 1 if raw_key.ndim == 1 else raw_key.shape[0])
    return apply_rope(raw_key, idx, table)
