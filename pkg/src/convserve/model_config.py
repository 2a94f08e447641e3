"""Model geometry and KV-cache size arithmetic."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError
from .kvfile import load_kv


@dataclass(frozen=True)
class ModelConfig:
    name: str
    n_layer: int
    hidden: int
    n_head: int
    n_kv_head: int
    head_size: int
    bytes_per_scalar: int = 2
    n_partitions: int = 1

    def __post_init__(self) -> None:
        if min(self.n_layer, self.hidden, self.n_head, self.n_kv_head, self.head_size) < 0:
            raise ConfigError(f"{self.name}: negative dimension")
        if self.n_head <= 0 or self.n_kv_head <= 0 or self.head_size <= 0:
            raise ConfigError(f"{self.name}: head counts and head_size must be positive")
        if self.hidden != self.n_head * self.head_size:
            raise ConfigError(
                f"{self.name}: hidden={self.hidden} != n_head*head_size={self.n_head * self.head_size}"
            )
        if self.n_head % self.n_kv_head:
            raise ConfigError(f"{self.name}: n_head={self.n_head} not divisible by n_kv_head={self.n_kv_head}")
        if self.n_partitions < 1 or self.n_kv_head % self.n_partitions:
            raise ConfigError(
                f"{self.name}: n_kv_head={self.n_kv_head} not divisible by n_partitions={self.n_partitions}"
            )
        if self.bytes_per_scalar < 1:
            raise ConfigError(f"{self.name}: bytes_per_scalar must be >= 1")

    @property
    def group_size(self) -> int:
        """Query heads sharing one KV head."""
        return self.n_head // self.n_kv_head

    @property
    def kv_hidden(self) -> int:
        return self.n_kv_head * self.head_size

    @classmethod
    def from_mapping(cls, data: dict[str, str]) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs: dict[str, object] = {}
        for key, value in data.items():
            kwargs[key] = value if key == "name" else int(value)
        try:
            return cls(**kwargs)  # type: ignore[arg-type]
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_file(cls, path: str | Path) -> "ModelConfig":
        return cls.from_mapping(load_kv(path))


def kv_token_bytes(cfg: ModelConfig) -> int:
    """Bytes of K and V for one token across every layer, before partitioning."""
    return 2 * cfg.n_layer * cfg.kv_hidden * cfg.bytes_per_scalar


def chunk_bytes(cfg: ModelConfig, chunk_size: int) -> int:
    """Per-worker bytes moved when one chunk of ``chunk_size`` tokens is swapped."""
    if chunk_size < 1:
        raise ValueError(f"chunk_size must be >= 1, got {chunk_size}")
    total = kv_token_bytes(cfg) * chunk_size
    # n_kv_head % n_partitions == 0 makes this exact
    return total // cfg.n_partitions


PRESETS: dict[str, ModelConfig] = {
    "opt-13b": ModelConfig("opt-13b", n_layer=40, hidden=5120, n_head=40, n_kv_head=40, head_size=128),
    "opt-66b": ModelConfig(
        "opt-66b", n_layer=64, hidden=9216, n_head=72, n_kv_head=72, head_size=128, n_partitions=4
    ),
    # 13B variant with KV heads cut from 40 to 10 (GQA group size 4)
    "llama2-13b": ModelConfig("llama2-13b", n_layer=40, hidden=5120, n_head=40, n_kv_head=10, head_size=128),
    "llama2-70b": ModelConfig(
        "llama2-70b", n_layer=80, hidden=8192, n_head=64, n_kv_head=8, head_size=128, n_partitions=4
    ),
}


def get_preset(name: str) -> ModelConfig:
    try:
        return PRESETS[name.lower()]
    except KeyError:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}") from None
