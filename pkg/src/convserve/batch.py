"""Batch structures shared by the scheduler, cost model and attention code."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable


@dataclass
class SubRequest:
    """One contiguous query span of a request and the context it attends to.

    ``query_span`` is ``(start, length)`` into the batch's concatenated input
    tokens. Query token ``i`` of the span sits at context position
    ``causal_offset + i`` and sees positions ``0..causal_offset + i``.
    """

    req_id: Hashable
    query_span: tuple[int, int]
    context_len: int
    block_table: list[int] = field(default_factory=list)

    @property
    def causal_offset(self) -> int:
        return self.context_len - self.query_span[1]

    @property
    def n_query(self) -> int:
        return self.query_span[1]

    def shifted(self, start: int) -> "SubRequest":
        return SubRequest(self.req_id, (start, self.query_span[1]), self.context_len, list(self.block_table))


@dataclass
class BatchPlan:
    sub_requests: list[SubRequest] = field(default_factory=list)
    swap_in: list[tuple[int, int]] = field(default_factory=list)
    swap_out: list[int] = field(default_factory=list)
    recompute_token_count: int = 0

    @property
    def total_input_tokens(self) -> int:
        return sum(sr.query_span[1] for sr in self.sub_requests)

    @property
    def req_ids(self) -> list[Hashable]:
        seen: dict[Hashable, None] = {}
        for sr in self.sub_requests:
            seen.setdefault(sr.req_id)
        return list(seen)

    def __bool__(self) -> bool:
        return bool(self.sub_requests)
