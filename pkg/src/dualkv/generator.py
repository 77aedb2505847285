"""Deterministic single-layer causal attention block driving the stream.

Weights come from a counter-based splitmix64 stream, so a seed pins every
matrix bit for bit on any platform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .memory import CacheEntry, DualMemoryCache, Gathered, UpdateOutcome
from .numerics import attend, mean_pool
from .rope import InjectionAudit, RotaryTable, rotate_rows

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_PROMPT_TAG = 0x5052_4F4D_5054_0001
_MASK64 = (1 << 64) - 1


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of splitmix64 started at ``seed`` (uint64 array)."""
    with np.errstate(over="ignore"):
        state = np.uint64(seed & _MASK64) + _GOLDEN * np.arange(1, n + 1, dtype=np.uint64)
        z = state
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def uniform_from_seed(seed: int, n: int, low: float, high: float) -> np.ndarray:
    u = (splitmix64(seed, n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return low + (high - low) * u


@dataclass(frozen=True)
class LatentFrame:
    tokens: np.ndarray
    frame_index: int

    @property
    def latent(self) -> np.ndarray:
        return mean_pool(self.tokens)


@dataclass(frozen=True)
class ConditionVector:
    data: np.ndarray
    prompt_id: int


_WEIGHT_NAMES = ("w_q", "w_k", "w_v", "w_o", "w_c")


@dataclass(frozen=True)
class ToyBlock:
    """Single-head attention block with prompt conditioning.

    All five ``dim x dim`` matrices and the bootstrap token offsets are drawn
    uniformly from ``[-1/sqrt(dim), 1/sqrt(dim)]`` in a fixed order.
    """

    dim: int = 64
    tokens_per_frame: int = 4
    seed: int = 0
    w_q: np.ndarray = field(init=False, repr=False, compare=False)
    w_k: np.ndarray = field(init=False, repr=False, compare=False)
    w_v: np.ndarray = field(init=False, repr=False, compare=False)
    w_o: np.ndarray = field(init=False, repr=False, compare=False)
    w_c: np.ndarray = field(init=False, repr=False, compare=False)
    offsets: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.dim <= 0 or self.tokens_per_frame <= 0:
            raise ValueError("dim and tokens_per_frame must be positive")
        d, n = self.dim, self.tokens_per_frame
        bound = 1.0 / math.sqrt(d)
        flat = uniform_from_seed(self.seed, 5 * d * d + n * d, -bound, bound)
        for i, name in enumerate(_WEIGHT_NAMES):
            m = flat[i * d * d:(i + 1) * d * d].reshape(d, d)
            m.setflags(write=False)
            object.__setattr__(self, name, m)
        off = flat[5 * d * d:].reshape(n, d)
        off.setflags(write=False)
        object.__setattr__(self, "offsets", off)

    @property
    def scale(self) -> float:
        return 1.0 / math.sqrt(self.dim)


def encode_prompt(prompt_seed: int, block: ToyBlock) -> ConditionVector:
    seed = (prompt_seed * 0x2545F4914F6CDD1D) ^ _PROMPT_TAG
    v = uniform_from_seed(seed, block.dim, -1.0, 1.0)
    return ConditionVector(v / np.linalg.norm(v), prompt_seed)


def _cond(condition, block: ToyBlock) -> np.ndarray:
    c = condition.data if isinstance(condition, ConditionVector) else np.asarray(condition, dtype=np.float64)
    if c.shape != (block.dim,):
        raise ValueError(f"condition dim {c.shape} does not match block dim {block.dim}")
    return c


def _tokens(latent_tokens, block: ToyBlock) -> np.ndarray:
    t = np.asarray(latent_tokens, dtype=np.float64)
    if t.ndim != 2 or t.shape[1] != block.dim:
        raise ValueError(f"token array shape {t.shape} does not match block dim {block.dim}")
    return t


def project_kv(latent_tokens, condition, block: ToyBlock) -> tuple[np.ndarray, np.ndarray]:
    """Raw keys ``W_K (token + W_C c)`` and values ``W_V (token + W_C c)``.

    Values carry the condition too: a key offset shared by every cached frame
    cancels inside the softmax, so without it a prompt could not reach the output.
    """
    t = _tokens(latent_tokens, block)
    shifted = t + block.w_c @ _cond(condition, block)
    return shifted @ block.w_k.T, shifted @ block.w_v.T


def project_q(latent_tokens, condition, block: ToyBlock) -> np.ndarray:
    t = _tokens(latent_tokens, block)
    return (t + block.w_c @ _cond(condition, block)) @ block.w_q.T


def make_entry(frame: LatentFrame, condition: ConditionVector, block: ToyBlock, shot_id: int = 0) -> CacheEntry:
    k, v = project_kv(frame.tokens, condition, block)
    return CacheEntry.from_frame(frame.tokens, k, v, frame.frame_index, shot_id, condition.prompt_id)


def bootstrap_frame(condition: ConditionVector, block: ToyBlock) -> LatentFrame:
    """Frame 0: ``W_O W_C c`` plus fixed per-token offsets."""
    base = block.w_o @ (block.w_c @ _cond(condition, block))
    return LatentFrame(base[None, :] + block.offsets, 0)


@dataclass(frozen=True)
class StepTrace:
    frame: LatentFrame
    weights: np.ndarray
    gathered: Gathered | None
    query_position: int
    outcome: UpdateOutcome
    evicted: CacheEntry | None


def step_traced(
    prev_frame: LatentFrame,
    condition: ConditionVector,
    cache: DualMemoryCache,
    block: ToyBlock,
    table: RotaryTable,
    audit: InjectionAudit | None = None,
) -> StepTrace:
    """Generate the next frame from ``prev_frame`` attending over the cache, then cache it."""
    qpos = cache.newest_local_index
    q = rotate_rows(project_q(prev_frame.tokens, condition, block), qpos, table)
    if cache.is_empty():
        # no context at all (e.g. window-only cache right after a cut): attend to own tokens
        k, v = project_kv(prev_frame.tokens, condition, block)
        gathered = None
        keys, values = k, v
    else:
        gathered = cache.gather(table, audit)
        keys, values = gathered.keys, gathered.values
    attn, weights = attend(q, keys, values, block.scale)
    tokens = np.tanh(prev_frame.tokens + attn @ block.w_o.T)
    frame = LatentFrame(tokens, prev_frame.frame_index + 1)
    entry = make_entry(frame, condition, block, cache.shot_id)
    evicted = cache.ltm_push(entry)
    outcome = cache.gcm_update(entry)
    return StepTrace(frame, weights, gathered, qpos, outcome, evicted)


def step(prev_frame, condition, cache, block, table, audit=None) -> LatentFrame:
    return step_traced(prev_frame, condition, cache, block, table, audit).frame
