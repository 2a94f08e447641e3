"""Discrete-event serving simulator clocked by batch-step completions."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Iterable, Sequence

from .batch import BatchPlan
from .cost_model import PROFILE_CHUNK_TOKENS, CostProfile, chunk_cost, load_profile, step_time, synthetic_profile
from .errors import ConfigError, Deadlock
from .eviction import make_policy
from .kv_cache import PagedKVCache
from .kvfile import load_kv, to_bool
from .model_config import chunk_bytes, get_preset
from .scheduler import Phase, Request, RequestPlan, Scheduler, SchedulerConfig
from .swap_engine import DEFAULT_BANDWIDTH, DEFAULT_DUPLEX_PENALTY, SwapEngine, TransferTask, pipeline
from .workload import (
    DEFAULT_MAX_CONTEXT,
    ArrivalSchedule,
    ConversationTrace,
    gen_first_arrivals,
    load_trace,
    sample_trace_path,
    synthetic_traces,
)

SWEEP_AXES = ("request_rate", "think_time_mean", "policy", "mode", "statefulness")


@dataclass
class RunConfig:
    model: str = "opt-13b"
    mode: str = "unified"
    policy: str = "pensieve"
    stateless: bool = False
    token_budget: int = 4096
    swap_threshold: float = 0.25
    reserve_fraction: float = 0.10
    chunk_size: int = 32
    device_bytes: int = 40_000_000_000
    host_bytes: int = 80_000_000_000
    # slot counts override the byte capacities when positive
    device_slots: int = 0
    host_slots: int = 0
    request_rate: float = 1.0
    think_time_mean: float = 60.0
    seed: int = 0
    bandwidth: float = DEFAULT_BANDWIDTH
    duplex_penalty: float = DEFAULT_DUPLEX_PENALTY
    allow_duplex: bool = False
    k_attn: float = 1.5e-6
    c_other: float = 6.4e-3
    per_token_other: float = 2e-4
    profile: str = ""
    trace: str = ""
    # when positive, generate this many synthetic conversations instead of reading a trace
    synthetic_conversations: int = 0
    max_context_tokens: int = DEFAULT_MAX_CONTEXT

    def __post_init__(self) -> None:
        if self.mode not in ("unified", "split"):
            raise ConfigError(f"mode must be 'unified' or 'split', got {self.mode!r}")
        if self.policy not in ("pensieve", "lru"):
            raise ConfigError(f"policy must be 'pensieve' or 'lru', got {self.policy!r}")
        if self.request_rate <= 0 or self.think_time_mean <= 0:
            raise ConfigError("request_rate and think_time_mean must be positive")
        if self.chunk_size < 1 or self.token_budget < 1:
            raise ConfigError("chunk_size and token_budget must be >= 1")
        if self.bandwidth <= 0:
            raise ConfigError("bandwidth must be positive")
        for name in ("swap_threshold", "reserve_fraction"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must be in [0, 1)")

    @classmethod
    def from_mapping(cls, data: dict[str, str]) -> "RunConfig":
        kwargs = {}
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        for key, raw in data.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = _convert(key, types[key], raw)
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        return cls.from_mapping(load_kv(path))

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_value(self, key: str, value: object) -> "RunConfig":
        """Copy with ``key`` set, converting strings as the config file would."""
        types = {f.name: f.type for f in dataclasses.fields(self)}
        if key not in types:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _convert(key, types[key], value)
        return self.replace(**{key: value})


def _convert(key: str, typ: str, raw: object) -> object:
    try:
        if typ == "bool":
            return to_bool(str(raw))
        if typ == "int":
            return int(float(raw)) if isinstance(raw, str) and "e" in raw.lower() else int(raw)
        if typ == "float":
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    return str(raw)


@dataclass
class RequestRecord:
    req_id: int
    conv_id: str
    turn: int
    arrival: float
    first_token: float
    completion: float
    prompt_tokens: int
    output_tokens: int
    steps: int

    @property
    def normalized_latency(self) -> float:
        return (self.completion - self.arrival) / self.output_tokens


def nearest_rank(values: Sequence[float], pct: float) -> float:
    if not values:
        raise ValueError("no values")
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


def normalized_latency(records: Sequence[RequestRecord], pct: float = 90.0) -> float:
    """Nearest-rank percentile of per-request latency per output token."""
    return nearest_rank([r.normalized_latency for r in records], pct)


def live_working_set(records: Sequence[RequestRecord], chunk_size: int = 32) -> int:
    """Peak number of chunks held by conversations that still have turns to come.

    A conversation is live from its first completed turn until its last one
    completes; its footprint grows by whole chunks as turns complete.
    """
    by_conv: dict[str, list[RequestRecord]] = {}
    for r in records:
        by_conv.setdefault(r.conv_id, []).append(r)
    events: list[tuple[float, int, int]] = []
    for recs in by_conv.values():
        recs.sort(key=lambda r: r.turn)
        ctx = 0
        for r in recs:
            new = ctx + r.prompt_tokens + r.output_tokens
            events.append((r.completion, 1, math.ceil(new / chunk_size) - math.ceil(ctx / chunk_size)))
            ctx = new
        # the final turn's chunks stop counting once it completes
        events.append((recs[-1].completion, 2, -math.ceil(ctx / chunk_size)))
    cur = peak = 0
    for _, _, delta in sorted(events):
        cur += delta
        peak = max(peak, cur)
    return peak


@dataclass
class MetricsReport:
    throughput: float
    p90_normalized_latency: float
    device_hit_rate: float
    host_hit_rate: float
    dropped_rate: float
    returning_tokens: int
    recomputed_kv_tokens: int
    recompute_cost: float
    total_input_tokens: int
    suspended_count: int
    completed: int
    steps: int
    sim_time: float
    swap_in_bytes: int
    swap_out_bytes: int
    stall_time: dict[str, float]
    dropped_conversations: int
    records: list[RequestRecord] = field(default_factory=list)

    @property
    def steps_per_request(self) -> float:
        return self.steps / self.completed if self.completed else 0.0

    def summary(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("records")
        out["steps_per_request"] = self.steps_per_request
        return out

    def to_json(self) -> str:
        data = self.summary()
        data["records"] = [dataclasses.asdict(r) for r in self.records]
        return json.dumps(data, sort_keys=True, indent=1)

    def records_csv(self) -> str:
        buf = io.StringIO()
        names = [f.name for f in dataclasses.fields(RequestRecord)] + ["normalized_latency"]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(names)
        for r in self.records:
            w.writerow([repr(v) if isinstance(v, float) else v for v in dataclasses.astuple(r)] + [repr(r.normalized_latency)])
        return buf.getvalue()


def load_workload(config: RunConfig) -> tuple[list[ConversationTrace], int]:
    if config.synthetic_conversations > 0:
        return synthetic_traces(config.synthetic_conversations, config.seed, max_context_tokens=config.max_context_tokens), 0
    traces = load_trace(config.trace or sample_trace_path(), config.max_context_tokens)
    return list(traces), traces.dropped


def build_profile(config: RunConfig) -> CostProfile:
    if config.profile:
        return load_profile(config.profile)
    return synthetic_profile(config.k_attn, config.c_other, config.per_token_other)


def _fmt(t: float) -> str:
    return repr(float(t))


class Simulation:
    def __init__(
        self,
        config: RunConfig,
        traces: Sequence[ConversationTrace] | None = None,
        dropped_conversations: int = 0,
        event_log: bool = False,
    ) -> None:
        if traces is None:
            traces, dropped_conversations = load_workload(config)
        self.config = config
        self.traces = list(traces)
        self.dropped_conversations = dropped_conversations
        model = get_preset(config.model)
        self.n_layer = model.n_layer
        self.chunk_bytes = chunk_bytes(model, config.chunk_size)
        dev = config.device_slots or config.device_bytes // self.chunk_bytes
        host = config.host_slots or config.host_bytes // self.chunk_bytes
        self.cache = PagedKVCache(dev, host, config.chunk_size)
        self.profile = build_profile(config)
        self.engine = SwapEngine(config.bandwidth, model.n_layer, config.duplex_penalty, config.allow_duplex)
        # raw tokens of each conversation available for recomputation
        self.raw_tokens: dict[Hashable, int] = {}
        self.scheduler = Scheduler(
            self.cache,
            make_policy(config.policy, self.profile),
            SchedulerConfig(
                config.mode, config.token_budget, config.swap_threshold, config.reserve_fraction, config.stateless
            ),
            trace_store=None if config.stateless else self.raw_tokens,
            issue_out=self._issue_out,
        )
        self.arrivals = ArrivalSchedule(
            self.traces,
            gen_first_arrivals(len(self.traces), config.request_rate, config.seed).tolist(),
            config.think_time_mean,
            config.seed,
        )
        self.log: list[str] | None = [] if event_log else None
        self.step_no = 0
        self._req_ids = 0
        self.records: list[RequestRecord] = []
        self.stalls = {"aot": 0.0, "suspend": 0.0, "demand": 0.0}
        self.hits = {"device": 0, "host": 0, "dropped": 0}
        self.recomputed = 0
        # modelled seconds of chunk recomputation, summed per dropped chunk
        self.recompute_cost = 0.0
        self.input_tokens = 0
        self.suspended = 0
        self.first_arrival: float | None = None
        self._meta: dict[int, tuple[int, int]] = {}
        self._steps: dict[int, int] = {}

    # ---------------------------------------------------------------- logging
    def _emit(self, t: float, kind: str, req: object = "-", layer: object = "-", **extra: object) -> None:
        if self.log is None:
            return
        tail = "".join(f" {k}={v}" for k, v in extra.items())
        self.log.append(f"t={_fmt(t)} kind={kind} req={req} layer={layer} step={self.step_no}{tail}")

    def _issue_out(self, chunk_ids: list[int], now: float, cause: str) -> TransferTask:
        return self.engine.swap_out(chunk_ids, len(chunk_ids) * self.chunk_bytes, now, cause)

    def _retire_out(self, now: float) -> None:
        for task in self.engine.retire(now):
            self._emit(
                task.done_at, "swap_out", chunks=len(task.chunk_ids), start=_fmt(task.start_at), cause=task.cause
            )

    # --------------------------------------------------------------- requests
    def _new_request(self, conv_index: int, turn: int, t: float, think: float) -> Request:
        trace = self.traces[conv_index]
        p, o = trace.turns[turn]
        if self.config.stateless:
            p += trace.history_before(turn)
        req = Request(self._req_ids, trace.conv_id, t, p, o, turn)
        self._meta[req.req_id] = (conv_index, turn)
        self._steps[req.req_id] = 0
        self._req_ids += 1
        if self.first_arrival is None:
            self.first_arrival = t
        self._emit(t, "arrive", req.req_id, conv=trace.conv_id, turn=turn, think=_fmt(think))
        return req

    def _account_admission(self, req: Request, plan: RequestPlan) -> None:
        self.recomputed += plan.recompute_tokens
        for cid in plan.recompute_chunks:
            ch = self.cache.chunks[cid]
            self.recompute_cost += chunk_cost(self.profile, ch.end_offset) * ch.n_tokens / PROFILE_CHUNK_TOKENS
        if req.state is not Phase.WAITING:
            return
        if self.config.stateless:
            conv_index, turn = self._meta[req.req_id]
            history = self.traces[conv_index].history_before(turn)
            self.hits["dropped"] += history
            self.recomputed += history
            return
        self.hits["device"] += plan.resident_tokens
        self.hits["host"] += plan.swap_in_tokens
        self.hits["dropped"] += plan.recompute_tokens

    # --------------------------------------------------------------- stepping
    def _execute(self, plan: BatchPlan, t: float, swap_groups: list[tuple[Request, list[int]]]) -> float:
        compute = step_time(self.profile, plan)
        layer_compute = [compute / self.n_layer] * self.n_layer
        ready = None
        for req, chunks in swap_groups:
            task, _ = self.engine.swap_in(chunks, len(chunks) * self.chunk_bytes, t, t, layer_compute, req.req_id)
            ready = task.per_layer_done if ready is None else [max(a, b) for a, b in zip(ready, task.per_layer_done)]
            for layer, done in enumerate(task.per_layer_done):
                self._emit(done, "swap_in_layer", req.req_id, layer)
        if ready is None:
            end = t + compute
        else:
            result = pipeline(t, layer_compute, ready)
            for layer, start in enumerate(result.attn_start):
                self._emit(start, "attn_start", "-", layer)
            end = result.end
        self._emit(end, "step_end", tokens=plan.total_input_tokens)
        self.step_no += 1
        self.input_tokens += plan.total_input_tokens
        return end

    def _progress(self, reqs: Iterable[Request], t: float, running: list[Request]) -> None:
        for req in reqs:
            req.tokens_generated += 1
            self._steps[req.req_id] += 1
            if req.first_token_time is None:
                req.first_token_time = t
            if not self.config.stateless:
                self.raw_tokens[req.conv_id] = self.cache.context_tokens(req.conv_id)
            if req.tokens_generated >= req.output_tokens:
                self._finish(req, t)
            elif req.state is not Phase.GENERATING:
                req.state = Phase.GENERATING
                running.append(req)

    def _finish(self, req: Request, t: float) -> None:
        req.state = Phase.FINISHED
        req.finish_time = t
        self.cache.retain_on_finish(req.conv_id, t, stateless=self.config.stateless)
        conv_index, turn = self._meta[req.req_id]
        self.records.append(
            RequestRecord(
                req.req_id, req.conv_id, turn, req.arrival_time, req.first_token_time, t,
                req.prompt_tokens, req.output_tokens, self._steps[req.req_id],
            )
        )
        self._emit(t, "finish", req.req_id, conv=req.conv_id, turn=turn)
        self.arrivals.turn_completed(conv_index, turn, t)

    def _unblock_head(self, head: Request, wait: list[Request], now: float) -> None:
        """Nothing is running and the queue head does not fit: evict idle chunks for it."""
        sched = self.scheduler
        need = sched.admission_slots(head, sched.plan(head))
        floor = self.config.reserve_fraction * self.cache.device.capacity_slots
        short = math.floor(need + floor) + 1 - self.cache.device.available
        if short > 0:
            sched.evict_for_demand(short, now, {head.conv_id})

    def run(self) -> MetricsReport:
        sched, cache = self.scheduler, self.cache
        wait: list[Request] = []
        running: list[Request] = []
        now = self.arrivals.next_time() or 0.0
        while True:
            for a in self.arrivals.pop_due(now):
                wait.append(self._new_request(a.conv_index, a.turn_index, a.time, a.think))
            self._retire_out(now)
            if not wait and not running:
                nxt = self.arrivals.next_time()
                if nxt is None:
                    break
                now = nxt
                continue
            pinned = {r.conv_id for r in running} | {r.conv_id for r in wait}
            sched.maybe_swap_out(now, pinned)
            demand = sched.generation_slots(running)
            if demand > cache.device.available:
                sched.evict_for_demand(demand - cache.device.available, now, pinned)
            if demand > cache.device.available:
                susp = sched.suspend_for_memory(running, demand - cache.device.available, now, pinned)
                running = [r for r in running if r.state is not Phase.SUSPENDED]
                wait = sorted(susp, key=lambda r: (r.arrival_time, r.req_id)) + wait
                self.suspended += len(susp)
                demand = sched.generation_slots(running)
            admitted = sched.admit(wait, running, now, reserved_slots=demand)
            if not admitted and not running:
                self._unblock_head(wait[0], wait, now)
                admitted = sched.admit(wait, running, now)
                if not admitted:
                    times = [x for x in (self.engine.next_out_completion(now), self.arrivals.next_time()) if x is not None]
                    if not times:
                        raise Deadlock(
                            f"request {wait[0].req_id} of {wait[0].conv_id!r} cannot fit in "
                            f"{cache.device.capacity_slots} device slots"
                        )
                    now = max(now, min(times))
                    continue
            del wait[: len(admitted)]
            for req, plan in admitted:
                self._account_admission(req, plan)
                req.state = Phase.PREFILL
            generating = list(running)
            swap_in = sched.allocate_step(admitted, generating, now)
            t = now
            waits = [r.task for r in cache.drain_reclaimed() if r.task is not None and r.task.done_at > now]
            if waits:
                worst = max(waits, key=lambda task: task.done_at)
                self.stalls[worst.cause] += worst.done_at - now
                t = worst.done_at
            groups = [(req, plan.swap_in_chunks) for req, plan in admitted if plan.swap_in_chunks]
            plans = sched.build_batch(admitted, generating, swap_in, with_tables=False)
            new_running = list(running)
            if len(plans) == 1:
                if plans[0]:
                    t = self._execute(plans[0], t, groups)
                    self._progress([r for r, _ in admitted] + generating, t, new_running)
            else:
                if plans[0]:
                    t = self._execute(plans[0], t, groups)
                    self._progress([r for r, _ in admitted], t, new_running)
                if plans[1]:
                    t = self._execute(plans[1], t, [])
                    self._progress(generating, t, new_running)
            running = [r for r in new_running if r.state is Phase.GENERATING]
            now = t
        self._retire_out(math.inf)
        return self._report()

    def _report(self) -> MetricsReport:
        recs = sorted(self.records, key=lambda r: r.req_id)
        returning = sum(self.hits.values())
        frac = (lambda k: self.hits[k] / returning) if returning else (lambda k: 0.0)
        if recs:
            span = max(r.completion for r in recs) - (self.first_arrival or 0.0)
            throughput = len(recs) / span if span > 0 else 0.0
            p90 = normalized_latency(recs)
            sim_time = max(r.completion for r in recs)
        else:
            throughput = p90 = sim_time = 0.0
        return MetricsReport(
            throughput=throughput,
            p90_normalized_latency=p90,
            device_hit_rate=frac("device"),
            host_hit_rate=frac("host"),
            dropped_rate=frac("dropped"),
            returning_tokens=returning,
            recomputed_kv_tokens=self.recomputed,
            recompute_cost=self.recompute_cost,
            total_input_tokens=self.input_tokens,
            suspended_count=self.suspended,
            completed=len(recs),
            steps=self.step_no,
            sim_time=sim_time,
            swap_in_bytes=self.engine.bytes_in,
            swap_out_bytes=self.engine.bytes_out,
            stall_time=dict(self.stalls),
            dropped_conversations=self.dropped_conversations,
            records=recs,
        )


def run(
    config: RunConfig,
    traces: Sequence[ConversationTrace] | None = None,
    event_log: list[str] | None = None,
) -> MetricsReport:
    """Simulate ``config`` to completion; appends event-log lines to ``event_log`` if given."""
    sim = Simulation(config, traces, event_log=event_log is not None)
    report = sim.run()
    if event_log is not None:
        event_log.extend(sim.log or [])
    return report


SWEEP_COLUMNS = (
    "axis",
    "value",
    "throughput",
    "p90_normalized_latency",
    "device_hit_rate",
    "host_hit_rate",
    "recomputed_kv_tokens",
    "total_input_tokens",
    "suspended_count",
    "steps_per_request",
)


def _apply_axis(config: RunConfig, axis: str, value: object) -> RunConfig:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    if axis == "statefulness":
        if value not in ("stateful", "stateless"):
            raise ConfigError("statefulness values must be 'stateful' or 'stateless'")
        return config.replace(stateless=value == "stateless")
    return config.with_value(axis, value)


def sweep(
    config: RunConfig,
    axis: str,
    values: Sequence[object],
    traces: Sequence[ConversationTrace] | None = None,
) -> list[dict]:
    """One run per value of ``axis``; every run shares the trace and seed."""
    configs = [_apply_axis(config, axis, v) for v in values]
    if traces is None:
        traces, _ = load_workload(config)
    rows = []
    for v, cfg in zip(values, configs):
        summary = run(cfg, traces).summary()
        row = {"axis": axis, "value": v}
        row.update({k: summary[k] for k in SWEEP_COLUMNS[2:]})
        rows.append(row)
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for row in rows:
        w.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in SWEEP_COLUMNS])
    return buf.getvalue()


# ------------------------------------------------------------------ log audits
def parse_event(line: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in line.split())


def audit_layer_dependency(lines: Iterable[str]) -> list[str]:
    """Attention of a layer that started before that layer's swap-in landed."""
    ready: dict[tuple[str, str], float] = {}
    violations = []
    for line in lines:
        ev = parse_event(line)
        key = (ev["step"], ev["layer"])
        if ev["kind"] == "swap_in_layer":
            ready[key] = max(ready.get(key, 0.0), float(ev["t"]))
        elif ev["kind"] == "attn_start" and key in ready and float(ev["t"]) < ready[key]:
            violations.append(line)
    return violations


def audit_causal_arrivals(lines: Iterable[str]) -> list[str]:
    """Turn arrivals earlier than the previous turn's completion plus think time."""
    finished: dict[tuple[str, int], float] = {}
    violations = []
    for line in lines:
        ev = parse_event(line)
        if ev["kind"] == "finish":
            finished[(ev["conv"], int(ev["turn"]))] = float(ev["t"])
        elif ev["kind"] == "arrive" and int(ev["turn"]) > 0:
            prev = finished.get((ev["conv"], int(ev["turn"]) - 1))
            if prev is None or float(ev["t"]) < prev + float(ev["think"]) - 1e-9:
                violations.append(line)
    return violations
