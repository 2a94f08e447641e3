"""Execution-cost estimates: per-chunk recomputation cost and batch step time.

A profile stores attention time for one 32-token chunk at a handful of
context lengths (powers of two). Other lengths are linearly interpolated;
beyond the last anchor the last segment's slope is extended.
"""
from __future__ import annotations

import bisect
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import TYPE_CHECKING

from .errors import EmptyProfile, ParseError

if TYPE_CHECKING:
    from .scheduler import BatchPlan

# Anchor times are measured for chunks of this many query tokens.
PROFILE_CHUNK_TOKENS = 32


@dataclass(frozen=True)
class CostProfile:
    anchors: tuple[tuple[int, float], ...]
    c_other: float
    per_token_other: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "anchors", tuple((int(l), float(t)) for l, t in self.anchors))
        prev_l, prev_t = 0, 0.0
        for l, t in self.anchors:
            if l <= prev_l:
                raise ValueError(f"anchor context lengths must be positive and strictly increasing (at {l})")
            if t < prev_t:
                raise ValueError(f"anchor attention times must be non-negative and non-decreasing (at {l})")
            prev_l, prev_t = l, t
        if self.c_other < 0 or self.per_token_other < 0:
            raise ValueError("non-attention costs must be non-negative")

    def scaled(self, factor: float) -> "CostProfile":
        """Every cost multiplied by ``factor``."""
        return CostProfile(
            tuple((l, t * factor) for l, t in self.anchors),
            self.c_other * factor,
            self.per_token_other * factor,
        )

    # hashable frozen dataclass, so per-profile memoisation is safe
    def attention_cost(self, l: int) -> float:
        return _attention_cost(self, l)

    def chunk_cost(self, l: int) -> float:
        return _attention_cost(self, l) + self.c_other


@lru_cache(maxsize=1 << 16)
def _attention_cost(profile: CostProfile, l: int) -> float:
    anchors = profile.anchors
    if not anchors:
        raise EmptyProfile("cost profile has no anchors")
    if l < 0:
        raise ValueError(f"context length must be >= 0, got {l}")
    xs = [a[0] for a in anchors]
    i = bisect.bisect_left(xs, l)
    if i < len(xs) and xs[i] == l:
        return anchors[i][1]
    if i == 0:
        x0, y0 = 0, 0.0
        x1, y1 = anchors[0]
    elif i == len(xs):
        if len(anchors) == 1:
            x0, y0 = 0, 0.0
        else:
            x0, y0 = anchors[-2]
        x1, y1 = anchors[-1]
    else:
        x0, y0 = anchors[i - 1]
        x1, y1 = anchors[i]
    return y0 + (y1 - y0) * (l - x0) / (x1 - x0)


def attention_cost(profile: CostProfile, l: int) -> float:
    """Attention time for one 32-token chunk attending to ``l`` context tokens."""
    return _attention_cost(profile, l)


def chunk_cost(profile: CostProfile, l: int) -> float:
    """Recomputation cost of a chunk whose context (including itself) is ``l`` tokens."""
    return _attention_cost(profile, l) + profile.c_other


def step_time(profile: CostProfile, batch: "BatchPlan") -> float:
    total = profile.per_token_other * batch.total_input_tokens
    for sr in batch.sub_requests:
        n_query = sr.query_span[1]
        total += _attention_cost(profile, sr.context_len) * (n_query / PROFILE_CHUNK_TOKENS)
    return total


def synthetic_profile(
    k_attn: float,
    c_other: float,
    per_token_other: float,
    lo: int = 32,
    hi: int = 65536,
) -> CostProfile:
    """Linear profile: attention time ``k_attn * l`` at power-of-two anchors ``lo..hi``."""
    anchors = []
    l = lo
    while l <= hi:
        anchors.append((l, k_attn * l))
        l *= 2
    return CostProfile(tuple(anchors), c_other, per_token_other)


def load_profile(path: str | Path) -> CostProfile:
    """Read ``c_other per_token_other`` then ``context_len attention_time`` lines."""
    rows: list[tuple[int, list[str]]] = []
    for line_no, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            rows.append((line_no, line.split()))
    if not rows:
        raise EmptyProfile(f"{path}: empty profile file")
    line_no, header = rows[0]
    if len(header) != 2:
        raise ParseError(line_no, "header must be 'c_other per_token_other'")
    try:
        c_other, per_token = float(header[0]), float(header[1])
    except ValueError:
        raise ParseError(line_no, "header values must be numbers") from None
    anchors = []
    for line_no, parts in rows[1:]:
        if len(parts) != 2:
            raise ParseError(line_no, "expected 'context_len attention_time'")
        try:
            anchors.append((int(parts[0]), float(parts[1])))
        except ValueError:
            raise ParseError(line_no, "bad anchor values") from None
    if not anchors:
        raise EmptyProfile(f"{path}: no anchors")
    return CostProfile(tuple(anchors), c_other, per_token)


def dump_profile(profile: CostProfile, path: str | Path) -> None:
    lines = [f"{profile.c_other!r} {profile.per_token_other!r}"]
    lines += [f"{l} {t!r}" for l, t in profile.anchors]
    Path(path).write_text("\n".join(lines) + "\n")
