"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Simulator criteria share one workload: 200 synthetic conversations (seed 0),
conversation arrivals at 4/s and a per-token cost high enough that stateless
serving saturates. The device tier holds 30% of the live working set, the
peak footprint of conversations that still have turns to come, measured on
an unconstrained run of the same workload; the host tier holds twice that.
"""
from __future__ import annotations

import functools
import random
from fractions import Fraction

from hypothesis import given, settings, strategies as st

from attn_cases import check_instances
from cache_fuzz import fuzz_cache
from convserve.cost_model import synthetic_profile
from convserve.eviction import retention_value, select_victims
from convserve.kv_cache import ChunkRecord, Location
from convserve.model_config import ModelConfig, get_preset, kv_token_bytes
from convserve.simulator import (
    RunConfig,
    audit_causal_arrivals,
    audit_layer_dependency,
    live_working_set,
    rows_to_csv,
    run,
    sweep,
)
from convserve.swap_engine import Direction, TransferTask, schedule_swap_in
from convserve.workload import ConversationTrace, synthetic_traces

N_CONVERSATIONS = 200
WORKLOAD_SEED = 0
# one millisecond of non-attention work per token; attention over 4096 tokens
# costs as much per chunk as the fixed part
PER_TOKEN = 1e-3
DEVICE_FRACTION = 0.30
HOST_MULTIPLE = 2
HIGH_RATE = 4.0

TRACES = synthetic_traces(N_CONVERSATIONS, WORKLOAD_SEED)
# (label, violations) for every simulated acceptance run, audited by criterion 8
AUDITS: list[tuple[str, int, int]] = []


def verdict(capsys, criterion: int, ok: bool, detail: str) -> None:
    with capsys.disabled():
        print(f"\n[acceptance] criterion {criterion:2d}: {'PASS' if ok else 'FAIL'} | {detail}")
    assert ok, detail


def workload_config(**overrides) -> RunConfig:
    base = RunConfig(
        request_rate=HIGH_RATE,
        seed=WORKLOAD_SEED,
        per_token_other=PER_TOKEN,
        c_other=32 * PER_TOKEN,
        k_attn=32 * PER_TOKEN / 4096,
    )
    return base.replace(**overrides)


@functools.cache
def tier_slots() -> tuple[int, int]:
    unconstrained = run(workload_config(device_slots=10**7, host_slots=10**7), TRACES)
    device = round(DEVICE_FRACTION * live_working_set(unconstrained.records))
    return device, HOST_MULTIPLE * device


@functools.cache
def simulate(**overrides):
    device, host = tier_slots()
    cfg = workload_config(device_slots=device, host_slots=host, **overrides)
    log: list[str] = []
    report = run(cfg, TRACES, event_log=log)
    label = ",".join(f"{k}={v}" for k, v in sorted(overrides.items())) or "default"
    AUDITS.append((label, len(audit_layer_dependency(log)), len(audit_causal_arrivals(log))))
    return report


# 1 ------------------------------------------------------------------------
def test_criterion_01_memory_arithmetic(capsys):
    opt13 = kv_token_bytes(get_preset("opt-13b"))
    llama13 = Fraction(kv_token_bytes(get_preset("llama2-13b")), opt13)
    opt66 = Fraction(kv_token_bytes(get_preset("opt-66b")), opt13)
    l70 = get_preset("llama2-70b")
    l70_mha = ModelConfig("mha", l70.n_layer, l70.hidden, l70.n_head, l70.n_head, l70.head_size)
    gqa = Fraction(kv_token_bytes(l70), kv_token_bytes(l70_mha))
    ok = opt13 == 819_200 and llama13 == Fraction(1, 4) and opt66 == Fraction(288, 100) and gqa == Fraction(1, 8)
    verdict(capsys, 1, ok, f"opt-13b={opt13} B, llama2-13b ratio={llama13}, opt-66b ratio={opt66}, 70b gqa={gqa}")


# 2 ------------------------------------------------------------------------
def test_criterion_02_attention_oracle(capsys):
    res = check_instances(100, seed=2024)
    ok = (
        res.paged_err <= 1e-5
        and res.copyout_err <= 1e-5
        and res.single_err <= 1e-5
        and res.single_checked > 0
        and res.softmax_err <= 1e-6
        and res.causal_ok
        and res.permutation_ok
    )
    verdict(
        capsys,
        2,
        ok,
        f"paged {res.paged_err:.1e}, copyout {res.copyout_err:.1e}, single {res.single_err:.1e} "
        f"({res.single_checked} cases), softmax {res.softmax_err:.1e}, "
        f"causal {res.causal_ok}, permutation {res.permutation_ok}",
    )


# 3 ------------------------------------------------------------------------
def _random_chunks(rng: random.Random) -> list[ChunkRecord]:
    chunks = []
    for cid in range(rng.randint(1, 40)):
        conv = f"c{rng.randint(0, 5)}"
        # coarse times make equal-T ties common
        last = float(rng.randint(0, 20))
        chunks.append(ChunkRecord(cid, conv, 32 * rng.randint(0, 200), rng.randint(1, 32), Location.DEVICE, cid, last))
    return chunks


def test_criterion_03_eviction_oracle(capsys):
    rng = random.Random(3)
    profile = synthetic_profile(1.5e-6, 6.4e-3, 2e-4)
    mismatches = leading_cases = leading_bad = scaling_bad = 0
    for _ in range(1000):
        chunks = _random_chunks(rng)
        now = 20.0 + rng.random() * 100.0
        needed = rng.randint(1, len(chunks))
        got = select_victims(chunks, profile, now, needed)
        want = sorted(chunks, key=lambda c: retention_value(c, profile, now).sort_key)[:needed]
        mismatches += [c.chunk_id for c in got] != [c.chunk_id for c in want]
        full = [c.chunk_id for c in select_victims(chunks, profile, now, len(chunks))]
        scaled = select_victims(chunks, profile.scaled(rng.uniform(0.01, 100.0)), now, len(chunks))
        scaling_bad += full != [c.chunk_id for c in scaled]
        rank = {cid: i for i, cid in enumerate(full)}
        for a in chunks:
            for b in chunks:
                if a.conv_id == b.conv_id and a.last_active == b.last_active and a.start_offset < b.start_offset:
                    leading_cases += 1
                    leading_bad += rank[a.chunk_id] > rank[b.chunk_id]
    ok = mismatches == 0 and leading_bad == 0 and leading_cases > 0 and scaling_bad == 0
    verdict(
        capsys,
        3,
        ok,
        f"brute-force mismatches {mismatches}/1000, leading-first {leading_cases - leading_bad}/{leading_cases}, "
        f"scaling changes {scaling_bad}",
    )


# 4 ------------------------------------------------------------------------
def test_criterion_04_eviction_ablation(capsys):
    cost_aware = simulate()
    lru = simulate(policy="lru")
    reduction = 1.0 - cost_aware.recomputed_kv_tokens / lru.recomputed_kv_tokens
    ok = reduction >= 0.05 and cost_aware.host_hit_rate >= lru.host_hit_rate
    verdict(
        capsys,
        4,
        ok,
        f"recomputed tokens pensieve {cost_aware.recomputed_kv_tokens} vs lru {lru.recomputed_kv_tokens} "
        f"(reduction {reduction:+.2%}, need >= 5%), host hit {cost_aware.host_hit_rate:.4f} vs {lru.host_hit_rate:.4f}",
    )


# 5 ------------------------------------------------------------------------
multi_turn = st.lists(
    st.lists(st.tuples(st.integers(1, 60), st.integers(1, 60)), min_size=2, max_size=4),
    min_size=1,
    max_size=4,
)


@settings(max_examples=40, deadline=None)
@given(multi_turn, st.integers(0, 2**16))
def test_criterion_05_stateful_fewer_input_tokens_property(convs, seed):
    traces = [ConversationTrace(f"c{i}", turns) for i, turns in enumerate(convs)]
    # every context fits on the device at once, with room for the admission reserve
    slots = 2 * (sum(-(-t.total_tokens // 32) for t in traces) + len(traces)) + 8
    cfg = RunConfig(device_slots=slots, host_slots=slots, seed=seed, request_rate=5.0, think_time_mean=1.0)
    kept = run(cfg, traces)
    full = run(cfg.replace(stateless=True), traces)
    assert kept.total_input_tokens < full.total_input_tokens


def test_criterion_05_statefulness(capsys):
    kept = simulate()
    full = simulate(stateless=True)
    ratio = kept.throughput / full.throughput
    ok = kept.total_input_tokens < full.total_input_tokens and ratio >= 1.1
    verdict(
        capsys,
        5,
        ok,
        f"input tokens {kept.total_input_tokens} vs {full.total_input_tokens}, "
        f"throughput {kept.throughput:.4f} vs {full.throughput:.4f} req/s (x{ratio:.2f}, need >= 1.1); "
        f"per-seed property checked by hypothesis",
    )


# 6 ------------------------------------------------------------------------
THINK_MEANS = (60.0, 120.0, 300.0, 600.0)


def test_criterion_06_think_time_sweep(capsys):
    reports = [simulate(think_time_mean=m) for m in THINK_MEANS]
    recomputed = [r.recomputed_kv_tokens for r in reports]
    throughput = [r.throughput for r in reports]
    stateless = simulate(think_time_mean=600.0, stateless=True)
    ok = (
        all(a <= b for a, b in zip(recomputed, recomputed[1:]))
        and all(a >= b for a, b in zip(throughput, throughput[1:]))
        and throughput[-1] >= stateless.throughput
    )
    verdict(
        capsys,
        6,
        ok,
        f"recomputed {recomputed}, throughput {[round(x, 4) for x in throughput]}, "
        f"stateless@600 {stateless.throughput:.4f}",
    )


# 7 ------------------------------------------------------------------------
def test_criterion_07_unified_vs_split(capsys):
    uni = simulate(mode="unified")
    split = simulate(mode="split")
    key = lambda rep: sorted((r.conv_id, r.turn, r.prompt_tokens, r.output_tokens) for r in rep.records)
    same = key(uni) == key(split)
    ok = same and uni.steps_per_request <= split.steps_per_request
    verdict(
        capsys,
        7,
        ok,
        f"steps/request unified {uni.steps_per_request:.3f} vs split {split.steps_per_request:.3f}, "
        f"identical outputs {same}",
    )


# 8 ------------------------------------------------------------------------
def test_criterion_08_pipelining(capsys):
    n = 40
    # 0.1 ms of transfer and 0.1 ms of compute per layer
    task = TransferTask([0], Direction.IN, bytes=int(n * 0.1e-3 * 25e9), issued_at=0.0)
    result = schedule_swap_in(task, 25e9, n, compute_start=0.0, layer_compute=[0.1e-3] * n)
    serial = task.done_at + n * 0.1e-3
    timing_ok = abs(result.end - 4.1e-3) <= 0.01 * 4.1e-3 and abs(serial - 8.0e-3) <= 0.01 * 8.0e-3
    default = simulate()
    layer_bad = sum(a[1] for a in AUDITS)
    causal_bad = sum(a[2] for a in AUDITS)
    aot_stall = default.stall_time["aot"]
    ok = timing_ok and layer_bad == 0 and causal_bad == 0 and aot_stall == 0.0
    verdict(
        capsys,
        8,
        ok,
        f"pipelined {result.end * 1e3:.3f} ms vs serial {serial * 1e3:.3f} ms, "
        f"layer-dependency violations {layer_bad} and causal violations {causal_bad} over {len(AUDITS)} runs, "
        f"default-policy swap-out stall {aot_stall:.3g} s",
    )


# 9 ------------------------------------------------------------------------
def test_criterion_09_determinism(capsys):
    device, host = tier_slots()
    cfg = workload_config(device_slots=device, host_slots=host)
    logs: list[list[str]] = [[], []]
    first = run(cfg, TRACES, event_log=logs[0]).to_json()
    second = run(cfg, TRACES, event_log=logs[1]).to_json()
    run_same = first == second and logs[0] == logs[1]
    small = RunConfig(synthetic_conversations=12, seed=1, device_slots=130, host_slots=50, think_time_mean=5.0)
    sweeps = [rows_to_csv(sweep(small, "request_rate", [1.0, 2.0, 4.0])) for _ in range(2)]
    sweep_same = sweeps[0] == sweeps[1]
    verdict(capsys, 9, run_same and sweep_same, f"run identical {run_same}, sweep identical {sweep_same}")


# 10 -----------------------------------------------------------------------
def test_criterion_10_cache_fuzz(capsys):
    applied, violations = fuzz_cache(10_000, seed=10)
    verdict(capsys, 10, applied == 10_000 and violations == 0, f"{applied} operations, {violations} violations")
