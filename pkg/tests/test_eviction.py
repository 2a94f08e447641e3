from __future__ import annotations

import random

import pytest
from hypothesis import given, settings, strategies as st

from convserve.cost_model import CostProfile, chunk_cost, synthetic_profile
from convserve.errors import NotEnoughEvictable
from convserve.eviction import T_FLOOR, lru_select_victims, make_policy, retention_value, select_victims
from convserve.kv_cache import ChunkRecord, Location

LINEAR = synthetic_profile(0.01, 1.0, 0.0)


def chunk(cid, conv, offset, last_active, n=32):
    return ChunkRecord(cid, conv, offset, n, Location.DEVICE, cid, last_active)


def brute_force(chunks, profile, now, needed):
    scored = sorted(chunks, key=lambda c: retention_value(c, profile, now).sort_key)
    return scored[:needed]


def test_retention_value_examples():
    prof = CostProfile(((32, 4.0), (64, 8.0)), c_other=1.0, per_token_other=0.0)
    c = chunk(0, "a", 0, last_active=0.0)
    assert retention_value(c, prof, 100.0).value == pytest.approx(0.05)
    assert retention_value(c, prof, 200.0).value == pytest.approx(0.025)


def test_leading_chunk_has_smaller_value():
    lead, tail = chunk(0, "a", 0, 0.0), chunk(1, "a", 960, 0.0)
    assert retention_value(lead, LINEAR, 50.0).value < retention_value(tail, LINEAR, 50.0).value


def test_just_finished_conversation_uses_floor():
    c = chunk(0, "a", 0, last_active=10.0)
    assert retention_value(c, LINEAR, 10.0).value == pytest.approx(chunk_cost(LINEAR, 32) / T_FLOOR)


def test_three_chunk_example():
    # chunk_cost(32) = 1.32, chunk_cost(1024) = 11.24 with k=0.01, c=1
    a = chunk(0, "A", 0, last_active=0.0)
    b = chunk(1, "B", 992, last_active=0.0)
    c = chunk(2, "C", 0, last_active=90.0)
    values = [retention_value(x, LINEAR, 100.0).value for x in (a, b, c)]
    assert values == pytest.approx([0.0132, 0.1124, 0.132])
    assert select_victims([c, b, a], LINEAR, 100.0, 2) == [a, b]


def test_identical_chunks_evict_leading_first():
    chunks = [chunk(i, "a", 32 * i, 0.0) for i in range(6)]
    random.Random(1).shuffle(chunks)
    victims = select_victims(chunks, LINEAR, 10.0, 3)
    assert [v.start_offset for v in victims] == [0, 32, 64]


def test_full_sort_when_all_needed():
    chunks = [chunk(i, f"c{i % 3}", 32 * (i // 3), float(i % 4)) for i in range(12)]
    assert select_victims(chunks, LINEAR, 20.0, 12) == brute_force(chunks, LINEAR, 20.0, 12)


def test_errors():
    chunks = [chunk(0, "a", 0, 0.0)]
    with pytest.raises(NotEnoughEvictable):
        select_victims(chunks, LINEAR, 1.0, 2)
    with pytest.raises(ValueError):
        select_victims(chunks, LINEAR, 1.0, 0)
    with pytest.raises(NotEnoughEvictable):
        lru_select_victims(chunks, 1.0, 2)


def test_lru_examples():
    chunks = [chunk(0, "x", 0, 0.0), chunk(1, "y", 0, 100.0), chunk(2, "z", 0, 200.0)]
    assert lru_select_victims(chunks, 300.0, 1) == [chunks[0]]
    single = [chunk(i, "a", 32 * i, 5.0) for i in (3, 1, 2, 0)]
    assert [c.start_offset for c in lru_select_victims(single, 10.0, 4)] == [0, 32, 64, 96]
    tie = [chunk(0, "b", 0, 1.0), chunk(1, "a", 0, 1.0)]
    assert [c.conv_id for c in lru_select_victims(tie, 2.0, 2)] == ["a", "b"]


def test_make_policy():
    chunks = [chunk(0, "x", 0, 0.0), chunk(1, "y", 3200, 1.0)]
    assert make_policy("lru", LINEAR)(chunks, 10.0, 1) == [chunks[0]]
    assert make_policy("pensieve", LINEAR)(chunks, 10.0, 2) == select_victims(chunks, LINEAR, 10.0, 2)
    with pytest.raises(ValueError):
        make_policy("mru", LINEAR)


def random_chunks(rng, n):
    out = []
    for i in range(n):
        conv = f"c{rng.randrange(8)}"
        out.append(chunk(i, conv, 32 * rng.randrange(200), float(rng.randrange(50)), n=rng.randint(1, 32)))
    return out


def test_matches_brute_force_on_random_sets():
    rng = random.Random(3)
    for _ in range(200):
        chunks = random_chunks(rng, rng.randint(1, 60))
        needed = rng.randint(1, len(chunks))
        assert select_victims(chunks, LINEAR, 60.0, needed) == brute_force(chunks, LINEAR, 60.0, needed)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_cost_scaling_preserves_order(seed, factor):
    rng = random.Random(seed)
    chunks = random_chunks(rng, 40)
    base = select_victims(chunks, LINEAR, 60.0, 40)
    assert select_victims(chunks, LINEAR.scaled(factor), 60.0, 40) == base


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_leading_first_within_conversation(seed):
    rng = random.Random(seed)
    chunks = [chunk(i, "a", 32 * i, 7.0) for i in range(20)] + random_chunks(rng, 20)
    for i, c in enumerate(chunks[20:]):
        c.chunk_id = 100 + i
    victims = select_victims(chunks, LINEAR, 60.0, len(chunks))
    offsets = [v.start_offset for v in victims if v.conv_id == "a" and v.last_active == 7.0]
    assert offsets == sorted(offsets)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_deterministic(seed):
    chunks = random_chunks(random.Random(seed), 30)
    assert select_victims(chunks, LINEAR, 60.0, 10) == select_victims(list(chunks), LINEAR, 60.0, 10)


def test_rounding_noise_ties_are_broken_by_tiebreak():
    # 23.16 / 12 and 30.88 / 16 are both 1.93 but differ in the last bit
    a = chunk(0, "b", 2976, last_active=44.0, n=12)
    b = chunk(1, "a", 2208, last_active=48.0, n=8)
    for factor in (1.0, 3.0, 0.1, 7.0):
        prof = LINEAR.scaled(factor)
        va, vb = (retention_value(c, prof, 60.0).value for c in (a, b))
        assert va == vb
        assert select_victims([b, a], prof, 60.0, 2) == [a, b]
