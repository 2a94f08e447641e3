"""Iteration-level batch scheduling over the two-tier KV cache.

Each step the scheduler may swap idle chunks out ahead of time, admits
waiting requests first-come-first-serve, plans how every admitted request's
context gets back onto the device (swap in what is on the host, recompute
what was dropped), and forms the batch. Prefill and generation requests share
one batch in ``unified`` mode; ``split`` mode runs them as two sequential
batches.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Sequence

from .batch import BatchPlan, SubRequest
from .errors import CannotSuspendAll, TraceMissing
from .eviction import Selector
from .kv_cache import ContextLayout, Location, PagedKVCache, SegmentKind
from .swap_engine import TransferTask

OutIssuer = Callable[[list[int], float, str], TransferTask]


class Phase(enum.Enum):
    WAITING = "waiting"
    PREFILL = "prefill"
    GENERATING = "generating"
    SUSPENDED = "suspended"
    FINISHED = "finished"


@dataclass
class Request:
    req_id: int
    conv_id: Hashable
    arrival_time: float
    prompt_tokens: int
    output_tokens: int
    turn_index: int = 0
    state: Phase = Phase.WAITING
    tokens_generated: int = 0
    first_token_time: float | None = None
    finish_time: float | None = None
    # context position just past this step's last query token
    step_context: int = 0

    @property
    def pending_tokens(self) -> int:
        """Input tokens not yet in the KV cache: the prompt, or the last emitted token."""
        return self.prompt_tokens if self.tokens_generated == 0 else 1

    @property
    def finishes_this_step(self) -> bool:
        return self.tokens_generated + 1 >= self.output_tokens

    @property
    def step_append_tokens(self) -> int:
        # the final emitted token is cached too, so a finished turn's context
        # holds prompt + every output token
        return self.pending_tokens + (1 if self.finishes_this_step else 0)


@dataclass
class RequestPlan:
    req_id: int
    conv_id: Hashable
    history_tokens: int
    new_tokens: int
    recompute_chunks: list[int] = field(default_factory=list)
    recompute_tokens: int = 0
    swap_in_chunks: list[int] = field(default_factory=list)
    swap_in_tokens: int = 0
    resident_tokens: int = 0
    sub_requests: list[SubRequest] = field(default_factory=list)

    @property
    def input_tokens(self) -> int:
        return self.recompute_tokens + self.new_tokens


def empty_layout(conv_id: Hashable) -> ContextLayout:
    return ContextLayout(conv_id, [], 0)


def plan_request(
    req: Request,
    layout: ContextLayout,
    trace_store: Mapping[Hashable, int] | None = None,
) -> RequestPlan:
    """Work needed to bring ``req``'s context onto the device and process its input.

    Dropped ranges are re-fed as raw tokens ahead of the new input. A dropped
    range that is not adjacent to the new input becomes its own sub-request
    attending only to the context up to its end; the new input (merged with
    an adjacent dropped range, if any) attends to the whole context.
    ``trace_store`` maps conversation ids to how many raw tokens can be
    refetched.
    """
    history = layout.total_context_tokens
    new = req.pending_tokens
    plan = RequestPlan(req.req_id, req.conv_id, history, new)
    pos = 0
    merged_start: int | None = None
    for seg in layout.segments:
        if seg.kind is SegmentKind.RECOMPUTE:
            if trace_store is not None and trace_store.get(req.conv_id, 0) < seg.end:
                raise TraceMissing(
                    f"conversation {req.conv_id!r}: raw tokens up to {seg.end} needed, "
                    f"{trace_store.get(req.conv_id, 0)} stored"
                )
            plan.recompute_chunks += seg.chunk_ids
            plan.recompute_tokens += seg.n_tokens
            if seg.end == history:
                merged_start = seg.start
                continue
            plan.sub_requests.append(SubRequest(req.req_id, (pos, seg.n_tokens), seg.end))
            pos += seg.n_tokens
        elif seg.kind is SegmentKind.SWAP_IN:
            plan.swap_in_chunks += seg.chunk_ids
            plan.swap_in_tokens += seg.n_tokens
        else:
            plan.resident_tokens += seg.n_tokens
    tail = new + (history - merged_start if merged_start is not None else 0)
    if tail:
        plan.sub_requests.append(SubRequest(req.req_id, (pos, tail), history + new))
    return plan


@dataclass
class SchedulerConfig:
    mode: str = "unified"
    token_budget: int = 4096
    swap_threshold: float = 0.25
    reserve_fraction: float = 0.10
    stateless: bool = False

    def __post_init__(self) -> None:
        if self.mode not in ("unified", "split"):
            raise ValueError(f"mode must be 'unified' or 'split', got {self.mode!r}")
        if self.token_budget < 1:
            raise ValueError("token_budget must be >= 1")
        for name in ("swap_threshold", "reserve_fraction"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")


class Scheduler:
    def __init__(
        self,
        cache: PagedKVCache,
        policy: Selector,
        config: SchedulerConfig | None = None,
        trace_store: Mapping[Hashable, int] | None = None,
        issue_out: OutIssuer | None = None,
    ) -> None:
        self.cache = cache
        self.policy = policy
        self.config = config or SchedulerConfig()
        self.trace_store = trace_store
        # starts the device->host copy of a swap-out; None means copies are instant
        self.issue_out = issue_out
        self.dropped_chunks = 0

    # ------------------------------------------------------------- planning
    def layout_of(self, conv_id: Hashable) -> ContextLayout:
        if self.cache.has_conversation(conv_id):
            return self.cache.layout(conv_id)
        return empty_layout(conv_id)

    def plan(self, req: Request) -> RequestPlan:
        return plan_request(req, self.layout_of(req.conv_id), self.trace_store)

    def admission_slots(self, req: Request, plan: RequestPlan) -> int:
        return (
            len(plan.swap_in_chunks)
            + len(plan.recompute_chunks)
            + self.cache.slots_for_append(req.conv_id, req.step_append_tokens)
        )

    def generation_slots(self, generating: Iterable[Request]) -> int:
        return sum(self.cache.slots_for_append(r.conv_id, r.step_append_tokens) for r in generating)

    def admit(
        self,
        wait_queue: Sequence[Request],
        running: Sequence[Request],
        now: float,
        reserved_slots: int = 0,
    ) -> list[tuple[Request, RequestPlan]]:
        """FCFS admission under the token budget and the free-slot reserve.

        Stops at the first request that does not fit. A request whose input
        alone exceeds the budget may still run as the step's only prefill.
        ``reserved_slots`` are already promised to generating requests.
        """
        cfg = self.config
        dev = self.cache.device
        avail = dev.ready_available(now) - reserved_slots
        floor = cfg.reserve_fraction * dev.capacity_slots
        tokens = sum(1 for r in running if r.state is Phase.GENERATING)
        admitted: list[tuple[Request, RequestPlan]] = []
        for req in wait_queue:
            plan = self.plan(req)
            need = self.admission_slots(req, plan)
            n_in = plan.input_tokens
            if tokens + n_in > cfg.token_budget and not (not admitted and n_in > cfg.token_budget):
                break
            if avail - need <= floor:
                break
            admitted.append((req, plan))
            avail -= need
            tokens += n_in
        return admitted

    # ------------------------------------------------------------ allocation
    def allocate_step(
        self,
        prefills: Sequence[tuple[Request, RequestPlan]],
        generating: Sequence[Request],
        now: float,
    ) -> list[tuple[int, int]]:
        """Claim device slots for this step; returns swap-in ``(chunk, slot)`` pairs."""
        cache = self.cache
        swap_in: list[tuple[int, int]] = []
        for req, plan in prefills:
            if plan.swap_in_chunks:
                swap_in += list(cache.restore(plan.swap_in_chunks).items())
            if plan.recompute_chunks:
                cache.rematerialize(plan.recompute_chunks)
            cache.allocate(req.conv_id, req.step_append_tokens, now)
            req.step_context = plan.history_tokens + plan.new_tokens
        for req in generating:
            before = cache.context_tokens(req.conv_id)
            cache.allocate(req.conv_id, req.step_append_tokens, now)
            req.step_context = before + 1
        return swap_in

    def _table(self, conv_id: Hashable, context_len: int) -> list[int]:
        return self.cache.block_table(conv_id)[: math.ceil(context_len / self.cache.chunk_size)]

    def build_batch(
        self,
        prefills: Sequence[tuple[Request, RequestPlan]],
        generating: Sequence[Request],
        swap_in: Sequence[tuple[int, int]] = (),
        with_tables: bool = True,
    ) -> list[BatchPlan]:
        """One plan (unified) or prefill-then-generation plans (split).

        ``with_tables=False`` leaves block tables empty for callers that only
        need token counts and context lengths.
        """
        table = self._table if with_tables else (lambda conv_id, context_len: [])
        pre = BatchPlan(swap_in=list(swap_in))
        pos = 0
        for req, plan in prefills:
            for sr in plan.sub_requests:
                sub = sr.shifted(pos + sr.query_span[0])
                sub.block_table = table(req.conv_id, sub.context_len)
                pre.sub_requests.append(sub)
            pos += plan.input_tokens
            pre.recompute_token_count += plan.recompute_tokens
        gen = BatchPlan()
        gpos = pos if self.config.mode == "unified" else 0
        for req in generating:
            sub = SubRequest(req.req_id, (gpos, 1), req.step_context)
            sub.block_table = table(req.conv_id, sub.context_len)
            gen.sub_requests.append(sub)
            gpos += 1
        if self.config.mode == "split":
            return [pre, gen]
        pre.sub_requests += gen.sub_requests
        return [pre]

    # -------------------------------------------------------------- eviction
    def _evictable(self, location: Location, pinned: set) -> list:
        return [ch for ch in self.cache.chunks_in(location) if ch.conv_id not in pinned]

    def _out_task(self, chunk_ids: list[int], now: float, cause: str) -> TransferTask | None:
        if self.issue_out is None:
            return None
        return self.issue_out(chunk_ids, now, cause)

    def evict_to_host(self, victims: list, now: float, pinned: set, cause: str = "aot") -> list[int]:
        """Move ``victims`` (ascending retention order) from device to host.

        Host space is made by dropping unpinned host chunks under the same
        policy; if the host cannot take everything, the lowest-ranked victims
        are dropped outright. Returns the chunk ids that went to the host.
        """
        cache = self.cache
        victims = list(victims)
        if not victims:
            return []
        short = len(victims) - cache.host.free_slots
        if short > 0 and cache.host.capacity_slots:
            host_cands = self._evictable(Location.HOST, pinned)
            k = min(short, len(host_cands))
            if k:
                drops = self.policy(host_cands, now, k)
                cache.apply_evictions([c.chunk_id for c in drops], Location.DROPPED)
                self.dropped_chunks += k
            short -= k
        if short > 0:
            direct, victims = victims[:short], victims[short:]
            cache.apply_evictions([c.chunk_id for c in direct], Location.DROPPED)
            self.dropped_chunks += len(direct)
        ids = [c.chunk_id for c in victims]
        if ids:
            cache.apply_evictions(ids, Location.HOST, self._out_task(ids, now, cause))
        return ids

    def maybe_swap_out(self, now: float, pinned: set) -> list[int]:
        """Swap idle chunks out once available device slots fall below the threshold."""
        dev = self.cache.device
        cap = dev.capacity_slots
        if cap == 0 or dev.available / cap >= self.config.swap_threshold:
            return []
        needed = math.ceil(self.config.swap_threshold * cap) - dev.available
        cands = self._evictable(Location.DEVICE, pinned)
        needed = min(needed, len(cands))
        if needed <= 0:
            return []
        victims = self.policy(cands, now, needed)
        return self.evict_to_host(victims, now, pinned, cause="aot")

    def evict_for_demand(self, slots: int, now: float, pinned: set) -> int:
        """Evict up to ``slots`` idle device chunks regardless of the threshold."""
        cands = self._evictable(Location.DEVICE, pinned)
        n = min(slots, len(cands))
        if n <= 0:
            return 0
        self.evict_to_host(self.policy(cands, now, n), now, pinned, cause="demand")
        return n

    def suspend_for_memory(
        self,
        running: Sequence[Request],
        deficit_slots: int,
        now: float,
        pinned: set,
    ) -> list[Request]:
        """Suspend the latest arrivals until ``deficit_slots`` are covered.

        Their device chunks are swapped out; callers put the returned
        requests back at the head of the wait queue.
        """
        if deficit_slots <= 0:
            return []
        suspended = []
        for req in sorted(running, key=lambda r: (r.arrival_time, r.req_id), reverse=True):
            if deficit_slots <= 0:
                break
            chunks = [ch for ch in self.cache.conversation_chunks(req.conv_id) if ch.location is Location.DEVICE]
            deficit_slots -= len(chunks) + self.cache.slots_for_append(req.conv_id, req.step_append_tokens)
            pinned = pinned | {req.conv_id}
            self.evict_to_host(chunks, now, pinned, cause="suspend")
            req.state = Phase.SUSPENDED
            suspended.append(req)
        if deficit_slots > 0:
            raise CannotSuspendAll(f"{deficit_slots} slots short even with every request suspended")
        return suspended
