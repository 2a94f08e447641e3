"""Two-tier (device/host) chunk-granular KV-cache bookkeeping.

Only placement is tracked here, never KV payloads. Each conversation owns an
ordered list of chunks; a chunk lives in a device slot, a host slot, or has
been dropped (its raw tokens must be recomputed on the next turn).

Device slots freed by a swap-out are not released right away: they move to a
*reclaimable* pool and are only overwritten when the allocator runs out of
genuinely free slots. A reclaimable slot may still be waiting for its copy to
the host to finish; such slots carry the transfer task so callers can charge
the wait.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Protocol

from .errors import (
    InsufficientDeviceMemory,
    InsufficientHostMemory,
    InvalidChunkState,
    UnknownConversation,
)

DEFAULT_CHUNK_SIZE = 32


class Location(enum.Enum):
    DEVICE = "device"
    HOST = "host"
    DROPPED = "dropped"


class SegmentKind(enum.Enum):
    RECOMPUTE = "recompute"
    SWAP_IN = "swap_in"
    RESIDENT = "resident"


_KIND_OF = {
    Location.DROPPED: SegmentKind.RECOMPUTE,
    Location.HOST: SegmentKind.SWAP_IN,
    Location.DEVICE: SegmentKind.RESIDENT,
}


class _Pending(Protocol):
    done_at: float


@dataclass
class ChunkRecord:
    chunk_id: int
    conv_id: Hashable
    start_offset: int
    n_tokens: int
    location: Location
    slot: int | None
    last_active: float

    @property
    def end_offset(self) -> int:
        return self.start_offset + self.n_tokens


@dataclass
class Segment:
    kind: SegmentKind
    chunk_ids: list[int]
    start: int
    end: int

    @property
    def n_tokens(self) -> int:
        return self.end - self.start


@dataclass
class ContextLayout:
    conv_id: Hashable
    segments: list[Segment]
    total_context_tokens: int

    def tokens(self, kind: SegmentKind) -> int:
        return sum(s.n_tokens for s in self.segments if s.kind is kind)

    def chunks(self, kind: SegmentKind) -> list[int]:
        return [c for s in self.segments if s.kind is kind for c in s.chunk_ids]

    def spans(self) -> list[tuple[SegmentKind, int, int]]:
        return [(s.kind, s.start, s.end) for s in self.segments]


@dataclass
class _Reclaim:
    chunk_id: int
    task: _Pending | None


class TierState:
    """Slot pool of one tier.

    ``free_slots + len(allocated) + len(reclaimable) == capacity_slots`` holds
    after every public call.
    """

    def __init__(self, name: str, capacity_slots: int) -> None:
        if capacity_slots < 0:
            raise ValueError("capacity must be >= 0")
        self.name = name
        self.capacity_slots = capacity_slots
        # stack: pop() hands out the lowest slot ids first
        self._free: list[int] = list(range(capacity_slots - 1, -1, -1))
        self.allocated: dict[int, int] = {}
        # insertion-ordered; consumed oldest-first
        self.reclaimable: dict[int, _Reclaim] = {}

    @property
    def free_slots(self) -> int:
        return len(self._free)

    @property
    def available(self) -> int:
        return len(self._free) + len(self.reclaimable)

    def available_fraction(self) -> float:
        if self.capacity_slots == 0:
            return 0.0
        return self.available / self.capacity_slots

    def ready_available(self, now: float) -> int:
        """Free slots plus reclaimable slots whose outgoing copy is done by ``now``."""
        # outgoing copies finish in issue order, so only a suffix can be in flight
        busy = 0
        for r in reversed(self.reclaimable.values()):
            if r.task is None:
                continue
            if r.task.done_at <= now:
                break
            busy += 1
        return len(self._free) + len(self.reclaimable) - busy

    def take(self, chunk_id: int) -> tuple[int, _Reclaim | None]:
        """Assign a slot to ``chunk_id``; free slots first, then oldest reclaimable."""
        if self._free:
            slot = self._free.pop()
            reclaimed = None
        elif self.reclaimable:
            slot = next(iter(self.reclaimable))
            reclaimed = self.reclaimable.pop(slot)
        else:
            raise InsufficientDeviceMemory(f"{self.name} tier has no free slots")
        self.allocated[chunk_id] = slot
        return slot, reclaimed

    def release(self, chunk_id: int) -> int:
        slot = self.allocated.pop(chunk_id)
        self._free.append(slot)
        return slot

    def retire(self, chunk_id: int, task: _Pending | None = None) -> int:
        """Move ``chunk_id``'s slot to the reclaimable pool (data kept until overwritten)."""
        slot = self.allocated.pop(chunk_id)
        self.reclaimable[slot] = _Reclaim(chunk_id, task)
        return slot

    def check(self) -> None:
        total = self.free_slots + len(self.allocated) + len(self.reclaimable)
        if total != self.capacity_slots:
            raise AssertionError(
                f"{self.name}: free {self.free_slots} + allocated {len(self.allocated)} + "
                f"reclaimable {len(self.reclaimable)} != capacity {self.capacity_slots}"
            )
        seen = set(self._free)
        for slot in itertools.chain(self.allocated.values(), self.reclaimable):
            if slot in seen or not 0 <= slot < self.capacity_slots:
                raise AssertionError(f"{self.name}: slot {slot} duplicated or out of range")
            seen.add(slot)


class PagedKVCache:
    def __init__(self, device_slots: int, host_slots: int, chunk_size: int = DEFAULT_CHUNK_SIZE) -> None:
        if chunk_size < 1:
            raise ValueError("chunk_size must be >= 1")
        self.chunk_size = chunk_size
        self.device = TierState("device", device_slots)
        self.host = TierState("host", host_slots)
        self.chunks: dict[int, ChunkRecord] = {}
        self.convs: dict[Hashable, list[int]] = {}
        self._ids = itertools.count()
        # reclaimable entries overwritten since the last drain; see drain_reclaimed()
        self._reclaimed: list[_Reclaim] = []

    # ----------------------------------------------------------------- queries
    def _conv(self, conv_id: Hashable) -> list[int]:
        try:
            return self.convs[conv_id]
        except KeyError:
            raise UnknownConversation(conv_id) from None

    def has_conversation(self, conv_id: Hashable) -> bool:
        return conv_id in self.convs

    def context_tokens(self, conv_id: Hashable) -> int:
        ids = self._conv(conv_id)
        return self.chunks[ids[-1]].end_offset if ids else 0

    def conversation_chunks(self, conv_id: Hashable) -> list[ChunkRecord]:
        return [self.chunks[c] for c in self._conv(conv_id)]

    def chunks_in(self, location: Location) -> list[ChunkRecord]:
        tier = self.device if location is Location.DEVICE else self.host
        return [self.chunks[c] for c in tier.allocated]

    def layout(self, conv_id: Hashable) -> ContextLayout:
        segments: list[Segment] = []
        for cid in self._conv(conv_id):
            ch = self.chunks[cid]
            kind = _KIND_OF[ch.location]
            if segments and segments[-1].kind is kind:
                segments[-1].chunk_ids.append(cid)
                segments[-1].end = ch.end_offset
            else:
                segments.append(Segment(kind, [cid], ch.start_offset, ch.end_offset))
        return ContextLayout(conv_id, segments, self.context_tokens(conv_id))

    def slots_for_append(self, conv_id: Hashable, n_tokens: int) -> int:
        """New chunks (hence device slots) needed to append ``n_tokens``."""
        ids = self.convs.get(conv_id, [])
        room = 0
        if ids:
            room = self.chunk_size - self.chunks[ids[-1]].n_tokens
        return math.ceil(max(0, n_tokens - room) / self.chunk_size)

    def block_table(self, conv_id: Hashable) -> list[int]:
        table = []
        for cid in self._conv(conv_id):
            ch = self.chunks[cid]
            if ch.location is not Location.DEVICE:
                raise InvalidChunkState(f"chunk {cid} of {conv_id!r} is {ch.location.value}, not on device")
            table.append(ch.slot)
        return table

    # --------------------------------------------------------------- mutation
    def _take_device(self, chunk_id: int) -> int:
        slot, reclaimed = self.device.take(chunk_id)
        if reclaimed is not None:
            self._reclaimed.append(reclaimed)
        return slot

    def drain_reclaimed(self) -> list:
        """Reclaimable entries consumed since the last call (callers charge copy waits)."""
        out, self._reclaimed = self._reclaimed, []
        return out

    def allocate(self, conv_id: Hashable, n_new_tokens: int, now: float) -> list[int]:
        """Append tokens: fill the trailing partial chunk, then open new device chunks."""
        ids = self.convs.setdefault(conv_id, [])
        if n_new_tokens <= 0:
            return []
        need = self.slots_for_append(conv_id, n_new_tokens)
        if need > self.device.available:
            raise InsufficientDeviceMemory(
                f"{conv_id!r} needs {need} device slots, {self.device.available} available"
            )
        remaining = n_new_tokens
        if ids:
            last = self.chunks[ids[-1]]
            room = self.chunk_size - last.n_tokens
            if room and remaining:
                if last.location is not Location.DEVICE:
                    raise InvalidChunkState(f"trailing chunk {last.chunk_id} of {conv_id!r} is not on device")
                fill = min(room, remaining)
                last.n_tokens += fill
                last.last_active = now
                remaining -= fill
        offset = self.context_tokens(conv_id)
        new_ids = []
        while remaining > 0:
            n = min(self.chunk_size, remaining)
            cid = next(self._ids)
            slot = self._take_device(cid)
            self.chunks[cid] = ChunkRecord(cid, conv_id, offset, n, Location.DEVICE, slot, now)
            ids.append(cid)
            new_ids.append(cid)
            offset += n
            remaining -= n
        return new_ids

    def apply_evictions(
        self,
        victims: Iterable[int],
        target: Location,
        task: _Pending | None = None,
    ) -> None:
        """Swap device chunks out to the host, or drop device/host chunks.

        Device-to-host moves leave the device slot reclaimable (tagged with
        ``task``, the outgoing copy); drops free their slot at once.
        """
        victims = list(victims)
        if target is Location.HOST:
            for cid in victims:
                if self.chunks[cid].location is not Location.DEVICE:
                    raise InvalidChunkState(f"chunk {cid} is {self.chunks[cid].location.value}, not on device")
            if len(victims) > self.host.free_slots:
                raise InsufficientHostMemory(
                    f"{len(victims)} swap-outs but only {self.host.free_slots} free host slots"
                )
            for cid in victims:
                ch = self.chunks[cid]
                self.device.retire(cid, task)
                ch.slot, _ = self.host.take(cid)
                ch.location = Location.HOST
        elif target is Location.DROPPED:
            for cid in victims:
                if self.chunks[cid].location is Location.DROPPED:
                    raise InvalidChunkState(f"chunk {cid} already dropped")
            for cid in victims:
                ch = self.chunks[cid]
                tier = self.device if ch.location is Location.DEVICE else self.host
                tier.release(cid)
                ch.location, ch.slot = Location.DROPPED, None
        else:
            raise ValueError("eviction target must be HOST or DROPPED")

    def _to_device(self, chunk_ids: list[int], expected: Location) -> dict[int, int]:
        for cid in chunk_ids:
            loc = self.chunks[cid].location
            if loc is not expected:
                raise InvalidChunkState(f"chunk {cid} is {loc.value}, expected {expected.value}")
        if len(chunk_ids) > self.device.available:
            raise InsufficientDeviceMemory(
                f"{len(chunk_ids)} chunks but {self.device.available} device slots available"
            )
        placed = {}
        for cid in chunk_ids:
            ch = self.chunks[cid]
            if expected is Location.HOST:
                self.host.release(cid)
            ch.slot = self._take_device(cid)
            ch.location = Location.DEVICE
            placed[cid] = ch.slot
        return placed

    def restore(self, chunk_ids: Iterable[int]) -> dict[int, int]:
        """Assign device slots to host-resident chunks being swapped in."""
        return self._to_device(list(chunk_ids), Location.HOST)

    def rematerialize(self, chunk_ids: Iterable[int]) -> dict[int, int]:
        """Assign device slots to dropped chunks whose KV is being recomputed."""
        return self._to_device(list(chunk_ids), Location.DROPPED)

    def retain_on_finish(self, conv_id: Hashable, now: float, stateless: bool = False) -> None:
        """Keep a finished request's chunks cached; the stateless baseline frees them."""
        if stateless:
            self.release(conv_id)
            return
        for cid in self._conv(conv_id):
            self.chunks[cid].last_active = now

    def release(self, conv_id: Hashable) -> None:
        for cid in self._conv(conv_id):
            ch = self.chunks.pop(cid)
            if ch.location is Location.DEVICE:
                self.device.release(cid)
            elif ch.location is Location.HOST:
                self.host.release(cid)
        self.convs[conv_id] = []

    # ------------------------------------------------------------ inspection
    def snapshot(self) -> str:
        lines = []
        for conv_id, ids in self.convs.items():
            for cid in ids:
                ch = self.chunks[cid]
                loc = ch.location.value if ch.slot is None else f"{ch.location.value}:{ch.slot}"
                lines.append(f"{cid} {conv_id} {ch.start_offset} {loc} {ch.last_active!r}")
        return "\n".join(lines) + ("\n" if lines else "")

    def check_invariants(self, ordered: bool = False) -> None:
        self.device.check()
        self.host.check()
        both = self.device.allocated.keys() & self.host.allocated.keys()
        if both:
            raise AssertionError(f"chunks resident in both tiers: {sorted(both)}")
        rank = {Location.DROPPED: 0, Location.HOST: 1, Location.DEVICE: 2}
        for conv_id, ids in self.convs.items():
            offset = 0
            prev = 0
            for i, cid in enumerate(ids):
                ch = self.chunks[cid]
                if ch.start_offset != offset:
                    raise AssertionError(f"{conv_id!r}: chunk {cid} starts at {ch.start_offset}, expected {offset}")
                if not 1 <= ch.n_tokens <= self.chunk_size:
                    raise AssertionError(f"{conv_id!r}: chunk {cid} holds {ch.n_tokens} tokens")
                if ch.n_tokens < self.chunk_size and i != len(ids) - 1:
                    raise AssertionError(f"{conv_id!r}: partial chunk {cid} is not the last one")
                tier = {Location.DEVICE: self.device, Location.HOST: self.host}.get(ch.location)
                if tier is None:
                    if ch.slot is not None:
                        raise AssertionError(f"dropped chunk {cid} still has slot {ch.slot}")
                elif tier.allocated.get(cid) != ch.slot:
                    raise AssertionError(f"chunk {cid} slot mismatch in {tier.name} tier")
                if ordered and rank[ch.location] < prev:
                    raise AssertionError(f"{conv_id!r}: location order broken at chunk {cid}")
                prev = rank[ch.location]
                offset += ch.n_tokens
