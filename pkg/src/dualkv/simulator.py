"""Stream orchestration, event schedules, policy comparison and metrics."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .generator import (
    LatentFrame,
    ToyBlock,
    bootstrap_frame,
    encode_prompt,
    make_entry,
    step_traced,
)
from .memory import DualMemoryCache, Gathered
from .numerics import attend, cosine_matrix
from .recache import MODES, RecachePolicy, recache, recompute_new_entries
from .rope import InjectionAudit, RotaryTable, rotate_rows

POLICIES = ("dual_memory", "sliding_only", "single_sink")
EVENT_KINDS = ("prompt_switch", "shot_cut")


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class InvariantError(AssertionError):
    """A runtime invariant of the stream was violated."""


class MetricsIOError(OSError):
    pass


@dataclass(frozen=True)
class ScheduleEvent:
    step: int
    kind: str
    prompt_seed: int | None = None

    def to_dict(self) -> dict:
        d = {"step": self.step, "kind": self.kind}
        if self.kind == "prompt_switch":
            d["prompt_seed"] = self.prompt_seed
        return d


@dataclass(frozen=True)
class RecacheSettings:
    alpha_max: float = 0.8
    recache_window: int | None = None  # None -> gcm_capacity + ltm_window
    mode: str = "proximity"


@dataclass(frozen=True)
class StreamConfig:
    seed: int = 0
    dim: int = 64
    tokens_per_frame: int = 4
    horizon: int = 100
    gcm_capacity: int = 3
    ltm_window: int = 6
    rope_max_index: int = 21
    policy: str = "dual_memory"
    recache: RecacheSettings = field(default_factory=RecacheSettings)
    schedule: tuple[ScheduleEvent, ...] = ()

    def recache_policy(self) -> RecachePolicy:
        window = self.recache.recache_window
        if window is None:
            window = self.gcm_capacity + self.ltm_window
        return RecachePolicy(self.recache.alpha_max, window, self.recache.mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = [e.to_dict() for e in self.schedule]
        return d

    @classmethod
    def from_dict(cls, raw) -> "StreamConfig":
        return parse_config(raw)

    def with_(self, **changes) -> "StreamConfig":
        return replace(self, **changes)


def _is_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def _is_num(x) -> bool:
    return (isinstance(x, (int, float)) and not isinstance(x, bool)) and math.isfinite(x)


def parse_config(raw) -> StreamConfig:
    """Build a StreamConfig from a JSON-like dict, collecting every violation before raising."""
    if not isinstance(raw, dict):
        raise ConfigError(["config must be a JSON object"])
    errors: list[str] = []
    defaults = StreamConfig()
    known = {f.name for f in fields(StreamConfig)}
    for k in sorted(set(raw) - known):
        errors.append(f"unknown key {k!r}")

    vals = {}
    int_rules = {
        "seed": lambda v: v >= 0,
        "dim": lambda v: v > 0 and v % 2 == 0,
        "tokens_per_frame": lambda v: v >= 1,
        "horizon": lambda v: v >= 1,
        "gcm_capacity": lambda v: v >= 0,
        "ltm_window": lambda v: v >= 1,
        "rope_max_index": lambda v: v >= 0,
    }
    int_msgs = {
        "seed": "must be a non-negative integer",
        "dim": "must be a positive even integer",
        "tokens_per_frame": "must be >= 1",
        "horizon": "must be >= 1",
        "gcm_capacity": "must be >= 0",
        "ltm_window": "must be >= 1",
        "rope_max_index": "must be >= 0",
    }
    for name, ok in int_rules.items():
        v = raw.get(name, getattr(defaults, name))
        if not _is_int(v) or not ok(v):
            errors.append(f"{name} {int_msgs[name]} (got {v!r})")
        vals[name] = v

    w, mi = vals["ltm_window"], vals["rope_max_index"]
    if _is_int(w) and _is_int(mi) and w > mi + 1:
        errors.append(f"window exceeds positional range: ltm_window={w} > rope_max_index+1={mi + 1}")

    policy = raw.get("policy", defaults.policy)
    if policy not in POLICIES:
        errors.append(f"policy must be one of {list(POLICIES)} (got {policy!r})")

    rc_raw = raw.get("recache", {})
    rc = RecacheSettings()
    if not isinstance(rc_raw, dict):
        errors.append("recache must be an object")
    else:
        for k in sorted(set(rc_raw) - {"alpha_max", "recache_window", "mode"}):
            errors.append(f"unknown key 'recache.{k}'")
        a = rc_raw.get("alpha_max", rc.alpha_max)
        if not _is_num(a) or not 0.0 <= a <= 1.0:
            errors.append(f"recache.alpha_max must lie in [0, 1] (got {a!r})")
        rw = rc_raw.get("recache_window", rc.recache_window)
        if rw is not None and (not _is_int(rw) or rw < 1):
            errors.append(f"recache.recache_window must be a positive integer or null (got {rw!r})")
        mode = rc_raw.get("mode", rc.mode)
        if mode not in MODES:
            errors.append(f"recache.mode must be one of {list(MODES)} (got {mode!r})")
        rc = RecacheSettings(float(a) if _is_num(a) else a, rw, mode)

    events: list[ScheduleEvent] = []
    sched = raw.get("schedule", [])
    if not isinstance(sched, list):
        errors.append("schedule must be a list")
        sched = []
    horizon = vals["horizon"]
    for i, ev in enumerate(sched):
        where = f"schedule[{i}]"
        if not isinstance(ev, dict):
            errors.append(f"{where} must be an object")
            continue
        kind = ev.get("kind")
        allowed = {"step", "kind"} | ({"prompt_seed"} if kind == "prompt_switch" else set())
        for k in sorted(set(ev) - allowed):
            errors.append(f"unknown key '{where}.{k}'")
        st = ev.get("step")
        if not _is_int(st) or st < 0:
            errors.append(f"{where}.step must be a non-negative integer (got {st!r})")
            continue
        if _is_int(horizon) and st >= horizon:
            errors.append(f"{where}: event at step {st} is beyond horizon {horizon}")
        if kind not in EVENT_KINDS:
            errors.append(f"{where}.kind must be one of {list(EVENT_KINDS)} (got {kind!r})")
            continue
        ps = ev.get("prompt_seed")
        if kind == "prompt_switch" and (not _is_int(ps) or ps < 0):
            errors.append(f"{where}.prompt_seed must be a non-negative integer (got {ps!r})")
            continue
        events.append(ScheduleEvent(st, kind, ps if kind == "prompt_switch" else None))

    steps = [e.step for e in events]
    dups = sorted({s for s in steps if steps.count(s) > 1})
    for s in dups:
        errors.append(f"duplicate event step {s}: at most one event per step")
    if steps != sorted(steps):
        errors.append("schedule events must be sorted by step")

    if errors:
        raise ConfigError(errors)
    return StreamConfig(recache=rc, schedule=tuple(events), policy=policy, **vals)


# --- metrics ------------------------------------------------------------------

@dataclass(frozen=True)
class MetricsRecord:
    step: int
    gcm_attention_mass: float
    max_injected_index: int
    cache_frames: int
    latent_drift: float
    gcm_min_pairwise_diversity: float | None
    event_flag: str | None


METRIC_FIELDS = tuple(f.name for f in fields(MetricsRecord))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.9g}"
    return str(v)


def emit_metrics(records: Iterable[MetricsRecord], path, format: str = "jsonl") -> None:
    path = Path(path)
    if format not in ("jsonl", "csv"):
        raise ValueError(f"unknown metrics format {format!r}")
    try:
        with open(path, "w", newline="") as fh:
            if format == "jsonl":
                for r in records:
                    fh.write(json.dumps(asdict(r)) + "\n")
            else:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(METRIC_FIELDS)
                for r in records:
                    w.writerow([_fmt(getattr(r, k)) for k in METRIC_FIELDS])
    except OSError as exc:
        raise MetricsIOError(f"cannot write metrics to {path}: {exc}") from exc


def read_metrics(path) -> list[MetricsRecord]:
    path = Path(path)
    try:
        with open(path) as fh:
            return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]
    except OSError as exc:
        raise MetricsIOError(f"cannot read metrics from {path}: {exc}") from exc


# --- stream -------------------------------------------------------------------

def make_cache(config: StreamConfig) -> DualMemoryCache:
    if config.policy == "dual_memory":
        return DualMemoryCache(config.gcm_capacity, config.ltm_window)
    if config.policy == "sliding_only":
        return DualMemoryCache(0, config.ltm_window)
    if config.policy == "single_sink":
        return DualMemoryCache(1, config.ltm_window, gcm_frozen=True)
    raise ValueError(f"unknown policy {config.policy!r}")


def _min_pairwise_diversity(cache: DualMemoryCache) -> float | None:
    if len(cache.gcm) < 2:
        return None
    lat = np.vstack([e.latent for e in cache.gcm])
    sims = cosine_matrix(lat, lat)
    np.fill_diagonal(sims, -np.inf)
    return 1.0 - float(sims.max())


class Stream:
    """One autoregressive stream. ``advance()`` applies the step's event then generates a frame."""

    def __init__(self, config: StreamConfig):
        self.config = config
        self.block = ToyBlock(config.dim, config.tokens_per_frame, config.seed)
        self.table = RotaryTable(config.dim, max_index=config.rope_max_index)
        self.table.check_window(config.ltm_window)
        self.cache = make_cache(config)
        self.policy = config.recache_policy()
        self.audit = InjectionAudit()
        self.condition = encode_prompt(config.seed, self.block)
        self.frame: LatentFrame | None = None
        self.t = 0
        self.records: list[MetricsRecord] = []
        self._events = {e.step: e for e in config.schedule}
        self.last_trace = None

    @property
    def done(self) -> bool:
        return self.t >= self.config.horizon

    def apply_event(self, event: ScheduleEvent) -> None:
        if event.kind == "shot_cut":
            self.cache.ltm_reset(self.cache.shot_id + 1)
            return
        new_cond = encode_prompt(event.prompt_seed, self.block)
        if self.policy.mode == "flush":
            self.cache.ltm_reset(self.cache.shot_id + 1)
        elif not self.cache.is_empty():
            fresh = recompute_new_entries(self.cache, new_cond, self.block)
            recache(self.cache, fresh, self.policy, self.cache.step)
        self.condition = new_cond

    def advance(self) -> MetricsRecord:
        if self.done:
            raise RuntimeError("stream already reached its horizon")
        t = self.t
        event = self._events.get(t)
        if event is not None:
            self.apply_event(event)
        self.audit.begin_step()
        prev = self.frame
        if prev is None:
            frame = bootstrap_frame(self.condition, self.block)
            entry = make_entry(frame, self.condition, self.block, self.cache.shot_id)
            self.cache.ltm_push(entry)
            self.cache.gcm_update(entry)
            mass, qpos = 0.0, 0
            self.last_trace = None
        else:
            trace = step_traced(prev, self.condition, self.cache, self.block, self.table, self.audit)
            frame, qpos = trace.frame, trace.query_position
            if trace.gathered is None:
                mass = 0.0
            else:
                mass = float(trace.weights[:, trace.gathered.is_gcm].sum(axis=1).mean())
            self.last_trace = trace
        drift = 0.0 if prev is None else float(np.linalg.norm(frame.tokens - prev.tokens))
        rec = MetricsRecord(
            step=t,
            gcm_attention_mass=mass,
            max_injected_index=max(self.audit.step_max_local, qpos, 0),
            cache_frames=self.cache.n_frames,
            latent_drift=drift,
            gcm_min_pairwise_diversity=_min_pairwise_diversity(self.cache),
            event_flag=event.kind if event is not None else None,
        )
        self._check(rec, frame)
        self.frame = frame
        self.records.append(rec)
        self.t += 1
        return rec

    def _check(self, rec: MetricsRecord, frame: LatentFrame) -> None:
        cap = self.cache.gcm_capacity + self.cache.ltm_window
        if rec.max_injected_index > self.table.max_index:
            raise InvariantError(f"step {rec.step}: local rotation index {rec.max_injected_index} > {self.table.max_index}")
        if self.audit.step_max_global != 0:
            raise InvariantError(f"step {rec.step}: global anchor rotated at index {self.audit.step_max_global}")
        if rec.cache_frames > cap:
            raise InvariantError(f"step {rec.step}: {rec.cache_frames} cached frames exceed bound {cap}")
        if not 0.0 <= rec.gcm_attention_mass <= 1.0 + 1e-12:
            raise InvariantError(f"step {rec.step}: GCM attention mass {rec.gcm_attention_mass} outside [0, 1]")
        if not np.all(np.isfinite(frame.tokens)):
            raise InvariantError(f"step {rec.step}: non-finite latent")

    def run_until(self, step: int) -> None:
        """Advance until the next call to ``advance`` would generate ``step``."""
        while self.t < step and not self.done:
            self.advance()

    def run(self) -> list[MetricsRecord]:
        while not self.done:
            self.advance()
        return self.records


def run_stream(config: StreamConfig) -> list[MetricsRecord]:
    return Stream(config).run()


# --- probes -------------------------------------------------------------------

@dataclass(frozen=True)
class Probe:
    weights: np.ndarray
    logits: np.ndarray
    gathered: Gathered

    def mass_on(self, abs_step: int) -> float:
        """Attention mass (averaged over query rows) on all cached tokens of one frame."""
        sel = self.gathered.abs_steps == abs_step
        return float(self.weights[:, sel].sum(axis=1).mean())

    @property
    def gcm_mass(self) -> float:
        return float(self.weights[:, self.gathered.is_gcm].sum(axis=1).mean())


def probe_attention(cache: DualMemoryCache, raw_queries, table: RotaryTable, position: int | None = None) -> Probe:
    """Attend with caller-supplied raw queries; rotated at ``position`` (default: newest local index)."""
    pos = cache.newest_local_index if position is None else position
    q = rotate_rows(raw_queries, pos, table)
    g = cache.gather(table)
    scale = 1.0 / math.sqrt(table.dim)
    _, w = attend(q, g.keys, g.values, scale)
    return Probe(w, (q @ g.keys.T) * scale, g)


def gcm_probe_scores(cache: DualMemoryCache, raw_queries, table: RotaryTable, position: int = 0) -> dict[int, np.ndarray]:
    """Scaled logits of fixed probe queries against each GCM anchor, keyed by abs_step."""
    q = rotate_rows(raw_queries, position, table)
    scale = 1.0 / math.sqrt(table.dim)
    return {e.abs_step: (q @ e.raw_key.T) * scale for e in cache.gcm}


def frame_query(stream: Stream, abs_step: int, gain: float = 1.0) -> np.ndarray:
    """Query rows aimed at a cached frame's raw keys (the adversarial probe)."""
    for e in stream.cache.entries():
        if e.abs_step == abs_step:
            return gain * e.raw_key
    raise KeyError(f"frame {abs_step} not cached")


# --- comparison ---------------------------------------------------------------

def parse_variant(variant: str, base: StreamConfig) -> StreamConfig:
    """``policy``, ``mode`` or ``policy:mode`` -> config variant."""
    variant = variant.strip()
    policy, _, mode = variant.partition(":")
    if policy in MODES and not mode:
        policy, mode = base.policy, policy
    if policy not in POLICIES:
        raise ConfigError([f"unknown policy {policy!r} in variant {variant!r}"])
    if mode and mode not in MODES:
        raise ConfigError([f"unknown recache mode {mode!r} in variant {variant!r}"])
    rc = replace(base.recache, mode=mode) if mode else base.recache
    return replace(base, policy=policy, recache=rc)


def _switch_stats(records: list[MetricsRecord], steps: list[int]) -> dict:
    drift = [r.latent_drift for r in records]
    at = [drift[s] for s in steps if s < len(drift)]
    around = [drift[j] for s in steps for j in range(max(1, s - 2), min(len(drift), s + 3))]
    return {
        "drift_at_switch": at,
        "mean_drift_at_switch": float(np.mean(at)) if at else None,
        "max_drift_at_switch": float(np.max(at)) if at else None,
        "mean_drift_around_switch": float(np.mean(around)) if around else None,
    }


def summarize(name: str, config: StreamConfig, records: list[MetricsRecord]) -> dict:
    switch_steps = [e.step for e in config.schedule if e.kind == "prompt_switch"]
    return {
        "variant": name,
        "policy": config.policy,
        "recache_mode": config.recache.mode,
        "steps": len(records),
        "mean_gcm_attention_mass": float(np.mean([r.gcm_attention_mass for r in records])),
        "max_injected_index": max(r.max_injected_index for r in records),
        "max_cache_frames": max(r.cache_frames for r in records),
        "mean_latent_drift": float(np.mean([r.latent_drift for r in records])),
        **_switch_stats(records, switch_steps),
    }


def compare_policies(base_config: StreamConfig, policies: list[str], max_workers: int | None = None) -> dict:
    variants = [(p, parse_variant(p, base_config)) for p in policies]
    with ThreadPoolExecutor(max_workers=max_workers or len(variants) or 1) as ex:
        results = list(ex.map(lambda v: run_stream(v[1]), variants))
    return {
        "seed": base_config.seed,
        "horizon": base_config.horizon,
        "variants": [summarize(n, c, r) for (n, c), r in zip(variants, results)],
    }
