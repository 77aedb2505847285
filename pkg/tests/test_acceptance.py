"""Exit criteria. Each test's first docstring line is echoed as a PASS/FAIL line."""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from dualkv.generator import ToyBlock, bootstrap_frame, encode_prompt, make_entry, step
from dualkv.memory import CacheEntry, DualMemoryCache
from dualkv.recache import RecachePolicy, alpha, recache, recompute_new_entries
from dualkv.rope import RotaryTable, apply_rope
from dualkv.simulator import (
    RecacheSettings,
    ScheduleEvent,
    Stream,
    StreamConfig,
    gcm_probe_scores,
    probe_attention,
    run_stream,
)
from oracles import full_attention_stream, gcm_rule

K, W, MAX_INDEX = 3, 6, 21


def test_ac01_rope_correctness():
    """AC1 RoPE: norm kept to 1e-9, identity at 0, shift invariance to 1e-6, < 5 s"""
    rng = np.random.default_rng(1)
    table = RotaryTable(64)
    t0 = time.perf_counter()
    for _ in range(1000):
        x, k = rng.normal(size=(2, 64))
        pos = int(rng.integers(0, 10**6 + 1))
        assert abs(np.linalg.norm(apply_rope(x, pos, table)) / np.linalg.norm(x) - 1.0) <= 1e-9
        assert np.array_equal(apply_rope(x, 0, table), x)
        m, n, s = (int(v) for v in rng.integers(0, 5 * 10**5, size=3))
        a = apply_rope(x, m, table) @ apply_rope(k, n, table)
        b = apply_rope(x, m + s, table) @ apply_rope(k, n + s, table)
        assert abs(a - b) <= 1e-6
    assert time.perf_counter() - t0 < 5.0


@pytest.fixture(scope="module")
def long_stream():
    s = Stream(StreamConfig(seed=0, dim=64, tokens_per_frame=4, horizon=10_000,
                            gcm_capacity=K, ltm_window=W, rope_max_index=MAX_INDEX))
    global_idx = []
    t0 = time.perf_counter()
    while not s.done:
        s.advance()
        global_idx.append(s.audit.step_max_global)
    return s, global_idx, time.perf_counter() - t0


def test_ac02_positional_bound(long_stream):
    """AC2 10k-step stream: local index <= 21 and GCM index == 0 every step, < 60 s"""
    s, global_idx, elapsed = long_stream
    assert len(s.records) == 10_000
    assert all(r.max_injected_index <= MAX_INDEX for r in s.records)
    assert all(g == 0 for g in global_idx)
    assert s.audit.global_calls > 0 and s.audit.max_local_index <= MAX_INDEX
    assert elapsed < 60.0


def test_ac03_constant_memory(long_stream):
    """AC3 cache_frames <= K+W = 9 at all 10,000 steps"""
    s, _, _ = long_stream
    assert max(r.cache_frames for r in s.records) == K + W
    assert all(r.cache_frames <= K + W for r in s.records)


def test_ac04_streaming_equals_full_recompute():
    """AC4 K=0, horizon 6: streaming equals from-scratch full attention to 1e-5 over 20 seeds"""
    table = RotaryTable(64)
    for seed in range(20):
        block = ToyBlock(64, 4, seed)
        cond = encode_prompt(seed, block)
        cache = DualMemoryCache(0, W)
        frame = bootstrap_frame(cond, block)
        cache.ltm_push(make_entry(frame, cond, block))
        got = [frame.tokens]
        for _ in range(5):
            frame = step(frame, cond, cache, block, table)
            got.append(frame.tokens)
        want = full_attention_stream(block, cond, 6)
        for g, w in zip(got, want):
            np.testing.assert_allclose(g, w, atol=1e-5, rtol=0)


def test_ac05_gcm_rule_oracle():
    """AC5 1000 randomized GCM trials match brute force; duplicate-vs-orthogonal boundary not replaced"""
    rng = np.random.default_rng(5)
    replaced = 0
    for trial in range(1000):
        k = int(rng.integers(2, 6))
        dim = int(rng.choice([2, 4, 16]))
        lat = rng.normal(size=(k, dim))
        if trial % 4 == 0:
            lat[int(rng.integers(1, k))] = lat[0]
        steps = [int(x) for x in rng.choice(10_000, size=k, replace=False)]
        cand = rng.normal(size=dim)
        cache = DualMemoryCache(k, W)
        for st, l in zip(steps, lat):
            cache.gcm_update(CacheEntry.from_frame(l[None], l[None], l[None], st))
        out = cache.gcm_update(CacheEntry.from_frame(cand[None], cand[None], cand[None], 20_000))
        assert (out.replaced, out.evicted_step) == gcm_rule(lat.tolist(), steps, cand.tolist())
        replaced += out.replaced
    assert 0 < replaced < 1000

    basis = np.eye(8)
    cache = DualMemoryCache(3, W)
    for st, l in enumerate((basis[0], basis[0], basis[1])):
        cache.gcm_update(CacheEntry.from_frame(l[None], l[None], l[None], st))
    out = cache.gcm_update(CacheEntry.from_frame(basis[2][None], basis[2][None], basis[2][None], 9))
    assert out.importance == 1.0 and out.target_redundancy == 1.0 and not out.replaced
    assert gcm_rule([basis[0], basis[0], basis[1]], [0, 1, 2], basis[2]) == (False, None)


def test_ac06_recache_schedule_fixed_points():
    """AC6 alpha(0)=0.8, alpha(D)=alpha(2D)=0; uniform = full replacement bit-exact; alpha_max=0 byte-identical"""
    D = 9
    p = RecachePolicy(0.8, D)
    assert alpha(0, p) == 0.8 and alpha(D, p) == 0.0 and alpha(2 * D, p) == 0.0

    s = Stream(StreamConfig(seed=3, horizon=40))
    s.run()
    new_cond = encode_prompt(123, s.block)
    before = s.cache.to_json()
    recache(s.cache, recompute_new_entries(s.cache, new_cond, s.block), RecachePolicy(0.0, D), s.cache.step)
    assert s.cache.to_json() == before

    fresh = recompute_new_entries(s.cache, new_cond, s.block)
    recache(s.cache, fresh, RecachePolicy(0.8, D, "uniform"), s.cache.step)
    for e in s.cache.entries():
        f = fresh[e.abs_step]
        assert np.array_equal(e.raw_key, f.raw_key) and np.array_equal(e.value, f.value)
        assert np.array_equal(e.latent, f.latent)


# seeds whose GCM still anchors frame 0 at step 500 (the diversity rule may evict it elsewhere)
FRAME0_ANCHORED = {0, 5, 6, 7, 11, 12, 13, 14, 15, 16, 18}


def test_ac07_forgetting_contrast():
    """AC7 frame-0 probe at step 500: sliding_only mass exactly 0, dual_memory (frame 0 anchored) mass > 0"""
    anchored = set()
    for seed in range(20):
        runs = {}
        for policy in ("sliding_only", "dual_memory"):
            s = Stream(StreamConfig(seed=seed, horizon=501, policy=policy))
            s.run_until(500)
            runs[policy] = s
        dual = runs["dual_memory"]
        if any(e.abs_step == 0 for e in dual.cache.gcm):
            anchored.add(seed)
        # frame 0 is identical in both runs; aim the probe at its raw keys
        query = 4.0 * make_entry(bootstrap_frame(dual.condition, dual.block), dual.condition, dual.block).raw_key
        for policy, s in runs.items():
            expect_mass = policy == "dual_memory" and seed in anchored
            probe = probe_attention(s.cache, query, s.table)
            assert (probe.mass_on(0) > 0.0) if expect_mass else (probe.mass_on(0) == 0.0)
            s.advance()
            tr = s.last_trace
            live = tr.weights[:, tr.gathered.abs_steps == 0].sum()
            assert (live > 0.0) if expect_mass else (live == 0.0)
    assert anchored == FRAME0_ANCHORED


def test_ac08_shot_cut_semantics():
    """AC8 shot cut at 50/100: LTM emptied (K+1 frames next record), GCM kept, probe scores equal to 1e-9"""
    cfg = StreamConfig(seed=0, horizon=100, schedule=(ScheduleEvent(50, "shot_cut"),))
    s = Stream(cfg)
    s.run_until(50)
    probe = np.random.default_rng(8).normal(size=(4, 64))
    steps_before = [e.abs_step for e in s.cache.gcm]
    scores_before = gcm_probe_scores(s.cache, probe, s.table, position=3)
    s.apply_event(cfg.schedule[0])
    assert len(s.cache.ltm) == 0
    assert [e.abs_step for e in s.cache.gcm] == steps_before
    scores_after = gcm_probe_scores(s.cache, probe, s.table, position=3)
    for st in steps_before:
        np.testing.assert_allclose(scores_after[st], scores_before[st], atol=1e-9, rtol=0)

    recs = run_stream(cfg)
    assert recs[50].cache_frames == K + 1 and recs[50].event_flag == "shot_cut"
    full = Stream(cfg)
    full.run_until(51)
    kept = {e.abs_step for e in full.cache.gcm} & set(steps_before)
    after_gen = gcm_probe_scores(full.cache, probe, full.table, position=3)
    for st in kept:
        np.testing.assert_allclose(after_gen[st], scores_before[st], atol=1e-9, rtol=0)


def test_ac09_end_to_end_determinism(tmp_path):
    """AC9 two CLI invocations, same config: byte-identical JSONL and manifests"""
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 11, "horizon": 300, "schedule": [
        {"step": 100, "kind": "prompt_switch", "prompt_seed": 4}, {"step": 200, "kind": "shot_cut"}]}))
    env = dict(os.environ, SOURCE_DATE_EPOCH="1700000000")
    outs = []
    for name in ("a", "b"):
        out = tmp_path / f"{name}.jsonl"
        subprocess.run([sys.executable, "-m", "dualkv", "run", "--config", str(cfg), "--out", str(out)],
                       env=env, check=True)
        outs.append((out.read_bytes(), (tmp_path / f"{name}.jsonl.manifest.json").read_bytes()))
    assert outs[0][0] == outs[1][0] and len(outs[0][0].splitlines()) == 300
    assert outs[0][1] == outs[1][1]


SWITCH_SEEDS = range(20)
# pinned from the first run over SWITCH_SEEDS: min ratio 1.0835, mean gap 0.1395
MIN_DRIFT_RATIO = 1.05
MIN_MEAN_GAP = 0.10


def test_ac10_recache_smoothness_regression():
    """AC10 drift at switch: proximity (alpha_max=0.8) below uniform; ratio >= 1.05 per seed, mean gap >= 0.10"""
    gaps = []
    for seed in SWITCH_SEEDS:
        drift = {}
        for mode in ("proximity", "uniform"):
            cfg = StreamConfig(seed=seed, horizon=40, recache=RecacheSettings(alpha_max=0.8, mode=mode),
                               schedule=(ScheduleEvent(20, "prompt_switch", 1000 + seed),))
            drift[mode] = run_stream(cfg)[20].latent_drift
        assert drift["proximity"] < drift["uniform"]
        assert drift["uniform"] >= MIN_DRIFT_RATIO * drift["proximity"], seed
        gaps.append(drift["uniform"] - drift["proximity"])
    assert float(np.mean(gaps)) >= MIN_MEAN_GAP
