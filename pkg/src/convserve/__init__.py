"""Stateful multi-turn LLM serving: two-tier KV cache, eviction, scheduling and simulation."""
from .cost_model import CostProfile, attention_cost, chunk_cost, step_time, synthetic_profile
from .eviction import lru_select_victims, make_policy, retention_value, select_victims
from .kv_cache import Location, PagedKVCache
from .model_config import PRESETS, ModelConfig, chunk_bytes, get_preset, kv_token_bytes
from .scheduler import Phase, Request, Scheduler, SchedulerConfig, plan_request
from .simulator import MetricsReport, RunConfig, normalized_latency, run, sweep
from .swap_engine import SwapEngine, transfer_time
from .workload import ConversationTrace, gen_first_arrivals, gen_think_time, load_trace, trace_stats

__all__ = [
    "PRESETS",
    "ConversationTrace",
    "CostProfile",
    "Location",
    "MetricsReport",
    "ModelConfig",
    "PagedKVCache",
    "Phase",
    "Request",
    "RunConfig",
    "Scheduler",
    "SchedulerConfig",
    "SwapEngine",
    "attention_cost",
    "chunk_bytes",
    "chunk_cost",
    "gen_first_arrivals",
    "gen_think_time",
    "get_preset",
    "kv_token_bytes",
    "load_trace",
    "lru_select_victims",
    "make_policy",
    "normalized_latency",
    "plan_request",
    "retention_value",
    "run",
    "select_victims",
    "step_time",
    "sweep",
    "synthetic_profile",
    "trace_stats",
    "transfer_time",
]
