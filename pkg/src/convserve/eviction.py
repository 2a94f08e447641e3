"""Chunk eviction ordering.

The default policy ranks each chunk by its retention value, the cost of
recomputing it divided by how long its conversation has been idle, and
evicts in ascending order. Leading chunks of a context are cheaper to
recompute (they attend to fewer tokens), so they go first; long-idle
conversations go before recently active ones. ``lru`` is the classic
baseline used for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Hashable, Sequence

import numpy as np

from .cost_model import CostProfile, chunk_cost
from .errors import NotEnoughEvictable
from .kv_cache import ChunkRecord

# Floor on inactivity so a just-finished conversation does not divide by zero.
T_FLOOR = 1e-3
# Retention values equal to this many significant digits tie, so float
# rounding (e.g. from scaling every cost) cannot reorder equal values.
SIG_DIGITS = 10


def quantize(values: np.ndarray) -> np.ndarray:
    """Round positive values to ``SIG_DIGITS`` significant digits."""
    values = np.asarray(values, dtype=np.float64)
    out = values.copy()
    pos = values > 0
    if not pos.any():
        return out
    v = values[pos]
    shift = (SIG_DIGITS - 1 - np.floor(np.log10(v))).astype(np.int64)
    # q / 10**n with both exact is correctly rounded, so equal (q, n) give equal floats
    up = shift >= 0
    q = np.where(up, np.round(v * 10.0 ** np.abs(shift)), np.round(v / 10.0 ** np.abs(shift)))
    out[pos] = np.where(up, q / 10.0 ** np.abs(shift), q * 10.0 ** np.abs(shift))
    return out


@dataclass(frozen=True)
class RetentionScore:
    value: float
    chunk_id: int
    tiebreak_key: tuple[float, Hashable, int]

    @property
    def sort_key(self) -> tuple:
        return (self.value, *self.tiebreak_key)


def retention_value(chunk: ChunkRecord, profile: CostProfile, now: float) -> RetentionScore:
    idle = max(now - chunk.last_active, T_FLOOR)
    value = float(quantize(np.array([chunk_cost(profile, chunk.start_offset + chunk.n_tokens) / idle]))[0])
    return RetentionScore(value, chunk.chunk_id, (chunk.last_active, chunk.conv_id, chunk.start_offset))


def _check_needed(n_chunks: int, needed: int) -> None:
    if needed < 1:
        raise ValueError(f"needed_slots must be >= 1, got {needed}")
    if needed > n_chunks:
        raise NotEnoughEvictable(f"need {needed} victims, only {n_chunks} evictable chunks")


def _conv_rank(chunks: Sequence[ChunkRecord]) -> np.ndarray:
    # conv ids may be any orderable type; rank them so numpy can lexsort
    order = {c: i for i, c in enumerate(sorted({ch.conv_id for ch in chunks}))}
    return np.fromiter((order[ch.conv_id] for ch in chunks), dtype=np.int64, count=len(chunks))


def select_victims(
    chunks: Sequence[ChunkRecord],
    profile: CostProfile,
    now: float,
    needed_slots: int,
) -> list[ChunkRecord]:
    """The ``needed_slots`` chunks with the smallest retention value, ascending.

    Ties go to the older ``last_active``, then the smaller conversation id,
    then the smaller start offset.
    """
    chunks = list(chunks)
    _check_needed(len(chunks), needed_slots)
    n = len(chunks)
    last = np.fromiter((ch.last_active for ch in chunks), dtype=np.float64, count=n)
    offsets = np.fromiter((ch.start_offset for ch in chunks), dtype=np.int64, count=n)
    ends = offsets + np.fromiter((ch.n_tokens for ch in chunks), dtype=np.int64, count=n)
    # few distinct context lengths; evaluate the scalar cost once per length
    uniq, inverse = np.unique(ends, return_inverse=True)
    cost = np.array([chunk_cost(profile, int(l)) for l in uniq], dtype=np.float64)[inverse]
    value = quantize(cost / np.maximum(now - last, T_FLOOR))
    order = np.lexsort((offsets, _conv_rank(chunks), last, value))
    return [chunks[i] for i in order[:needed_slots]]


def lru_select_victims(
    chunks: Sequence[ChunkRecord],
    now: float,
    needed_slots: int,
) -> list[ChunkRecord]:
    """Oldest ``last_active`` first; leading chunks first within a conversation."""
    chunks = list(chunks)
    _check_needed(len(chunks), needed_slots)
    n = len(chunks)
    last = np.fromiter((ch.last_active for ch in chunks), dtype=np.float64, count=n)
    offsets = np.fromiter((ch.start_offset for ch in chunks), dtype=np.int64, count=n)
    order = np.lexsort((offsets, _conv_rank(chunks), last))
    return [chunks[i] for i in order[:needed_slots]]


Selector = Callable[[Sequence[ChunkRecord], float, int], list[ChunkRecord]]


def make_policy(name: str, profile: CostProfile) -> Selector:
    """Victim selector by run-config name: ``pensieve`` or ``lru``."""
    name = name.lower()
    if name == "pensieve":
        return lambda chunks, now, needed: select_victims(chunks, profile, now, needed)
    if name == "lru":
        return lru_select_victims
    raise ValueError(f"unknown eviction policy {name!r}; choose 'pensieve' or 'lru'")
