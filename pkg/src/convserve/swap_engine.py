"""Simulated host<->device transfer timelines.

Swap-ins are pipelined with compute one layer at a time: layer ``l`` of every
chunk in the task is copied before layer ``l + 1``, and a layer's attention
cannot start until its KV has landed. Swap-outs run on a separate FIFO lane
that, by default, yields to any active swap-in so the two directions never
share the link. With ``allow_duplex`` they overlap and both run at reduced
bandwidth.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

DEFAULT_BANDWIDTH = 25e9
DEFAULT_DUPLEX_PENALTY = 0.20


class Direction(enum.Enum):
    IN = "in"
    OUT = "out"


@dataclass
class TransferTask:
    chunk_ids: list[int]
    direction: Direction
    bytes: int
    issued_at: float
    per_layer_done: list[float] = field(default_factory=list)
    done_at: float = 0.0
    start_at: float = 0.0
    # swap-outs only: "aot" (ahead-of-time), "suspend", or "demand"
    cause: str = "aot"
    tag: object = None


def transfer_time(
    nbytes: float,
    bandwidth: float,
    contended: bool = False,
    duplex_penalty: float = DEFAULT_DUPLEX_PENALTY,
) -> float:
    if bandwidth <= 0:
        raise ValueError(f"bandwidth must be positive, got {bandwidth}")
    effective = bandwidth * (1.0 - duplex_penalty) if contended else bandwidth
    return nbytes / effective


@dataclass
class PipelineResult:
    layer_ready: list[float]
    attn_start: list[float]
    end: float
    stall: float


def pipeline(
    compute_start: float,
    layer_compute: Sequence[float],
    layer_ready: Sequence[float] | None = None,
) -> PipelineResult:
    """Run layers in order; layer ``l`` waits for ``layer_ready[l]`` when given."""
    t = compute_start
    starts = []
    stall = 0.0
    for i, dur in enumerate(layer_compute):
        if layer_ready is not None and layer_ready[i] > t:
            stall += layer_ready[i] - t
            t = layer_ready[i]
        starts.append(t)
        t += dur
    return PipelineResult(list(layer_ready or []), starts, t, stall)


def layer_ready_times(issued_at: float, total_transfer: float, n_layer: int) -> list[float]:
    per_layer = total_transfer / n_layer
    return [issued_at + (i + 1) * per_layer for i in range(n_layer)]


def schedule_swap_in(
    task: TransferTask,
    bandwidth: float,
    n_layer: int,
    compute_start: float,
    layer_compute: Sequence[float],
    contended: bool = False,
    duplex_penalty: float = DEFAULT_DUPLEX_PENALTY,
) -> PipelineResult:
    """Fill ``task``'s per-layer completion times and overlap them with compute."""
    total = transfer_time(task.bytes, bandwidth, contended, duplex_penalty)
    task.per_layer_done = layer_ready_times(task.issued_at, total, n_layer)
    task.start_at = task.issued_at
    task.done_at = task.per_layer_done[-1] if task.per_layer_done else task.issued_at
    return pipeline(compute_start, layer_compute, task.per_layer_done)


def schedule_swap_out(now: float, swap_in_done: Sequence[float], allow_duplex: bool = False) -> float:
    """Start time of a swap-out issued at ``now`` given in-flight swap-in completions."""
    if allow_duplex:
        return now
    return max([now, *swap_in_done])


class SwapEngine:
    """Stateful link model used by the simulator."""

    def __init__(
        self,
        bandwidth: float = DEFAULT_BANDWIDTH,
        n_layer: int = 1,
        duplex_penalty: float = DEFAULT_DUPLEX_PENALTY,
        allow_duplex: bool = False,
    ) -> None:
        if bandwidth <= 0:
            raise ValueError("bandwidth must be positive")
        self.bandwidth = bandwidth
        self.n_layer = max(1, n_layer)
        self.duplex_penalty = duplex_penalty
        self.allow_duplex = allow_duplex
        self._in_busy: list[tuple[float, float]] = []
        self._in_free_at = 0.0
        self._out_pending: list[TransferTask] = []
        self._out_floor = 0.0
        self.bytes_in = 0
        self.bytes_out = 0

    def swap_in(
        self,
        chunk_ids: list[int],
        nbytes: int,
        issued_at: float,
        compute_start: float,
        layer_compute: Sequence[float],
        tag: object = None,
    ) -> tuple[TransferTask, PipelineResult]:
        issued = max(issued_at, self._in_free_at)
        contended = self.allow_duplex and any(t.done_at > issued for t in self._out_pending)
        task = TransferTask(list(chunk_ids), Direction.IN, nbytes, issued, tag=tag)
        result = schedule_swap_in(
            task, self.bandwidth, self.n_layer, compute_start, layer_compute, contended, self.duplex_penalty
        )
        self._in_free_at = task.done_at
        self.bytes_in += nbytes
        if task.done_at > task.issued_at:
            self._in_busy.append((task.issued_at, task.done_at))
            self._reschedule()
        return task, result

    def swap_in_done(self, now: float) -> list[float]:
        return [b for _, b in self._in_busy if b > now]

    def swap_out(self, chunk_ids: list[int], nbytes: int, now: float, cause: str = "aot", tag: object = None) -> TransferTask:
        task = TransferTask(list(chunk_ids), Direction.OUT, nbytes, now, cause=cause, tag=tag)
        task.start_at = schedule_swap_out(now, self.swap_in_done(now), self.allow_duplex)
        self._out_pending.append(task)
        self.bytes_out += nbytes
        self._reschedule()
        return task

    def out_done_at(self) -> float:
        return max([self._out_floor, *(t.done_at for t in self._out_pending)])

    def next_out_completion(self, now: float) -> float | None:
        times = [t.done_at for t in self._out_pending if t.done_at > now]
        return min(times) if times else None

    def retire(self, now: float) -> list[TransferTask]:
        """Freeze and return swap-outs completed by ``now``."""
        done = []
        while self._out_pending and self._out_pending[0].done_at <= now:
            task = self._out_pending.pop(0)
            self._out_floor = task.done_at
            done.append(task)
        self._in_busy = [iv for iv in self._in_busy if iv[1] > self._out_floor]
        return done

    def _reschedule(self) -> None:
        rate_busy = (1.0 - self.duplex_penalty) if self.allow_duplex else 0.0
        prev = self._out_floor
        busy = sorted(self._in_busy)
        for task in self._out_pending:
            remaining = task.bytes / self.bandwidth
            t = max(task.issued_at, prev)
            started = None
            for a, b in busy:
                if b <= t:
                    continue
                if remaining <= 0:
                    break
                if a > t:
                    if started is None:
                        started = t
                    gap = a - t
                    if remaining <= gap:
                        t += remaining
                        remaining = 0.0
                        break
                    remaining -= gap
                    t = a
                span = b - t
                if rate_busy > 0:
                    if started is None:
                        started = t
                    if remaining <= span * rate_busy:
                        t += remaining / rate_busy
                        remaining = 0.0
                        break
                    remaining -= span * rate_busy
                t = b
            if started is None:
                started = t
            t += remaining
            task.start_at = started
            task.done_at = t
            prev = t
