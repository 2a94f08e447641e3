"""Conversation traces, arrival processes and think times.

Trace files hold one conversation per line::

    conv_id  n_turns  p1 o1  p2 o2 ...

where ``pK``/``oK`` are the prompt and output token counts of turn ``K``.
Blank lines and ``#`` comments are ignored.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import EmptyTrace, ParseError

DEFAULT_MAX_CONTEXT = 16384
DEFAULT_THINK_MEAN = 60.0
# draw indices are conv_index * TURN_STRIDE + turn_index
TURN_STRIDE = 1 << 20

# ShareGPT-like targets for the synthetic generator
SYNTH_MEAN_TURNS = 5.56
SYNTH_MEAN_PROMPT = 37.77
SYNTH_MEAN_OUTPUT = 204.58
SYNTH_SIGMA_PROMPT = 1.0
SYNTH_SIGMA_OUTPUT = 0.8


@dataclass
class ConversationTrace:
    conv_id: str
    turns: list[tuple[int, int]]

    def __post_init__(self) -> None:
        if not self.turns:
            raise ValueError(f"conversation {self.conv_id!r} has no turns")
        for p, o in self.turns:
            if p < 1 or o < 1:
                raise ValueError(f"conversation {self.conv_id!r}: token counts must be >= 1")

    @property
    def n_turns(self) -> int:
        return len(self.turns)

    @property
    def total_tokens(self) -> int:
        return sum(p + o for p, o in self.turns)

    def history_before(self, turn: int) -> int:
        """Context tokens accumulated by the turns preceding ``turn``."""
        return sum(p + o for p, o in self.turns[:turn])

    def to_line(self) -> str:
        body = " ".join(f"{p} {o}" for p, o in self.turns)
        return f"{self.conv_id} {self.n_turns} {body}"


class TraceList(list):
    """Loaded conversations; ``dropped`` counts those over the context limit."""

    dropped: int = 0


def parse_trace(text: str, max_context_tokens: int | None = DEFAULT_MAX_CONTEXT) -> TraceList:
    out = TraceList()
    seen: set[str] = set()
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        fields = line.split()
        if len(fields) < 2:
            raise ParseError(line_no, "expected 'conv_id n_turns p1 o1 ...'")
        conv_id = fields[0]
        try:
            nums = [int(x) for x in fields[1:]]
        except ValueError:
            raise ParseError(line_no, "token counts must be integers") from None
        n_turns, counts = nums[0], nums[1:]
        if n_turns < 1:
            raise ParseError(line_no, "n_turns must be >= 1")
        if len(counts) != 2 * n_turns:
            raise ParseError(line_no, f"expected {2 * n_turns} token counts, got {len(counts)}")
        if min(counts) < 1:
            raise ParseError(line_no, "token counts must be >= 1")
        if conv_id in seen:
            raise ParseError(line_no, f"duplicate conversation id {conv_id!r}")
        seen.add(conv_id)
        trace = ConversationTrace(conv_id, list(zip(counts[::2], counts[1::2])))
        if max_context_tokens is not None and trace.total_tokens > max_context_tokens:
            out.dropped += 1
            continue
        out.append(trace)
    if not out:
        raise EmptyTrace("trace contains no usable conversations")
    return out


def load_trace(path: str | Path, max_context_tokens: int | None = DEFAULT_MAX_CONTEXT) -> TraceList:
    return parse_trace(Path(path).read_text(), max_context_tokens)


def format_trace(traces: Iterable[ConversationTrace]) -> str:
    return "".join(t.to_line() + "\n" for t in traces)


def write_trace(traces: Iterable[ConversationTrace], path: str | Path) -> None:
    Path(path).write_text(format_trace(traces))


def sample_trace_path() -> Path:
    return Path(__file__).with_name("data") / "sample_trace.txt"


@dataclass(frozen=True)
class TraceStats:
    n_conversations: int
    mean_turns: float
    mean_prompt_len: float
    mean_output_len: float


def trace_stats(traces: Sequence[ConversationTrace]) -> TraceStats:
    if not traces:
        raise EmptyTrace("no conversations")
    turns = [t for tr in traces for t in tr.turns]
    return TraceStats(
        len(traces),
        len(turns) / len(traces),
        sum(p for p, _ in turns) / len(turns),
        sum(o for _, o in turns) / len(turns),
    )


def _lognormal_ints(rng: np.random.Generator, mean: float, sigma: float, n: int) -> np.ndarray:
    mu = math.log(mean) - sigma * sigma / 2
    return np.maximum(1, np.rint(rng.lognormal(mu, sigma, n))).astype(int)


def synthetic_traces(
    n_conversations: int,
    seed: int,
    mean_turns: float = SYNTH_MEAN_TURNS,
    mean_prompt: float = SYNTH_MEAN_PROMPT,
    mean_output: float = SYNTH_MEAN_OUTPUT,
    sigma_prompt: float = SYNTH_SIGMA_PROMPT,
    sigma_output: float = SYNTH_SIGMA_OUTPUT,
    max_context_tokens: int = DEFAULT_MAX_CONTEXT,
) -> list[ConversationTrace]:
    """ShareGPT-like conversations: geometric turn counts, lognormal lengths.

    Turns that would push a conversation past ``max_context_tokens`` are cut.
    """
    if mean_turns < 1:
        raise ValueError("mean_turns must be >= 1")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_conversations):
        n = int(rng.geometric(1.0 / mean_turns))
        prompts = _lognormal_ints(rng, mean_prompt, sigma_prompt, n)
        outputs = _lognormal_ints(rng, mean_output, sigma_output, n)
        turns, total = [], 0
        for p, o in zip(prompts.tolist(), outputs.tolist()):
            if total + p + o > max_context_tokens:
                break
            turns.append((p, o))
            total += p + o
        if not turns:
            turns = [(1, 1)]
        out.append(ConversationTrace(f"c{i}", turns))
    return out


def gen_first_arrivals(n_conversations: int, rate: float, seed: int) -> np.ndarray:
    """Poisson arrival times: cumulative sums of exponential gaps with mean ``1/rate``."""
    if rate <= 0:
        raise ValueError(f"rate must be positive, got {rate}")
    rng = np.random.default_rng(seed)
    return np.cumsum(rng.standard_exponential(n_conversations) / rate)


def gen_think_time(mean: float, seed: int, draw_index: int) -> float:
    """Exponential think time; a pure function of ``(seed, draw_index)``.

    The draw is a unit exponential scaled by ``mean``, so sweeps over the mean
    with one seed reuse the same underlying samples.
    """
    if mean <= 0:
        raise ValueError(f"think time mean must be positive, got {mean}")
    rng = np.random.default_rng([seed, draw_index])
    return mean * float(rng.standard_exponential())


@dataclass(order=True)
class Arrival:
    time: float
    conv_index: int
    turn_index: int
    think: float = field(default=0.0, compare=False)


class ArrivalSchedule:
    """Time-ordered turn arrivals; turn ``k+1`` is released by turn ``k``'s completion."""

    def __init__(
        self,
        traces: Sequence[ConversationTrace],
        first_arrivals: Sequence[float],
        think_mean: float = DEFAULT_THINK_MEAN,
        seed: int = 0,
    ) -> None:
        if len(first_arrivals) != len(traces):
            raise ValueError("one first-arrival time per conversation required")
        if think_mean <= 0:
            raise ValueError("think time mean must be positive")
        self.traces = traces
        self.think_mean = think_mean
        self.seed = seed
        self._heap = [Arrival(float(t), i, 0) for i, t in enumerate(first_arrivals)]
        heapq.heapify(self._heap)

    def __len__(self) -> int:
        return len(self._heap)

    def next_time(self) -> float | None:
        return self._heap[0].time if self._heap else None

    def pop_due(self, now: float) -> list[Arrival]:
        out = []
        while self._heap and self._heap[0].time <= now:
            out.append(heapq.heappop(self._heap))
        return out

    def turn_completed(self, conv_index: int, turn_index: int, t: float) -> Arrival | None:
        """Schedule the next turn after a think-time draw; None when the conversation is over."""
        nxt = turn_index + 1
        if nxt >= self.traces[conv_index].n_turns:
            return None
        think = gen_think_time(self.think_mean, self.seed, conv_index * TURN_STRIDE + nxt)
        arrival = Arrival(t + think, conv_index, nxt, think)
        heapq.heappush(self._heap, arrival)
        return arrival
