"""Reference numerics for multi-token attention over paged KV storage.

Shapes: queries are ``(tokens, n_head, head_size)``; the store keeps keys
and values as ``(slots, chunk_size, n_kv_head, head_size)``. Query head
``h`` reads KV head ``h // group_size``.

``paged_multi_token_attention`` walks each sub-request's block table one
block at a time with a running (online) softmax, the way a fused kernel
would. ``single_token_attention`` is the matrix-vector special case,
``copyout_then_dense`` gathers into contiguous buffers first, and
``dense_oracle`` is the slow explicit-mask reference the others are tested
against.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .batch import SubRequest


@dataclass
class PagedKVStore:
    k: np.ndarray
    v: np.ndarray

    def __post_init__(self) -> None:
        if self.k.shape != self.v.shape or self.k.ndim != 4:
            raise ValueError("k and v must share shape (slots, chunk_size, n_kv_head, head_size)")

    @classmethod
    def empty(cls, n_slots: int, chunk_size: int, n_kv_head: int, head_size: int) -> "PagedKVStore":
        shape = (n_slots, chunk_size, n_kv_head, head_size)
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def n_slots(self) -> int:
        return self.k.shape[0]

    @property
    def chunk_size(self) -> int:
        return self.k.shape[1]

    @property
    def n_kv_head(self) -> int:
        return self.k.shape[2]

    @property
    def head_size(self) -> int:
        return self.k.shape[3]

    def gather(self, block_table: Sequence[int], context_len: int) -> tuple[np.ndarray, np.ndarray]:
        """Contiguous copies of the first ``context_len`` positions (shape ``(ctx, Hkv, D)``)."""
        _check_table(self, block_table, context_len)
        idx = np.asarray(block_table, dtype=np.intp)
        k = self.k[idx].reshape(-1, self.n_kv_head, self.head_size)[:context_len].copy()
        v = self.v[idx].reshape(-1, self.n_kv_head, self.head_size)[:context_len].copy()
        return k, v


@dataclass
class RaggedQueryBatch:
    q: np.ndarray
    sub_requests: list[SubRequest]
    scale: float | None = None

    def __post_init__(self) -> None:
        if self.q.ndim != 3:
            raise ValueError("q must have shape (tokens, n_head, head_size)")
        if self.scale is None:
            self.scale = math.sqrt(self.q.shape[2])
        spans = sorted(sr.query_span for sr in self.sub_requests)
        pos = 0
        for start, n in spans:
            if start != pos or n < 1:
                raise ValueError("query spans must tile the batch's tokens")
            pos += n
        if pos != self.q.shape[0]:
            raise ValueError(f"query spans cover {pos} tokens, q has {self.q.shape[0]}")
        for sr in self.sub_requests:
            if sr.causal_offset < 0:
                raise ValueError(f"sub-request {sr.req_id!r}: context shorter than its query span")


def _check_table(store: PagedKVStore, block_table: Sequence[int], context_len: int) -> None:
    need = math.ceil(context_len / store.chunk_size)
    if len(block_table) < need:
        raise ValueError(f"block table has {len(block_table)} entries, context needs {need}")
    for slot in block_table[:need]:
        if not 0 <= slot < store.n_slots:
            raise IndexError(f"block table references slot {slot}, store has {store.n_slots}")


def _check_inputs(batch: RaggedQueryBatch, store: PagedKVStore) -> None:
    if np.isnan(batch.q).any() or np.isnan(store.k).any() or np.isnan(store.v).any():
        raise ValueError("NaN in attention inputs")
    n_head = batch.q.shape[1]
    if n_head % store.n_kv_head:
        raise ValueError(f"n_head={n_head} is not a multiple of n_kv_head={store.n_kv_head}")
    if batch.q.shape[2] != store.head_size:
        raise ValueError("query and KV head sizes differ")
    for sr in batch.sub_requests:
        _check_table(store, sr.block_table, sr.context_len)


def qkv_project(
    x: np.ndarray, w_q: np.ndarray, w_k: np.ndarray, w_v: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``X @ W`` for the query, key and value projections."""
    x = np.asarray(x, dtype=np.float64)
    for name, w in (("w_q", w_q), ("w_k", w_k), ("w_v", w_v)):
        if w.ndim != 2 or w.shape[0] != x.shape[-1]:
            raise ValueError(f"{name} has shape {w.shape}, expected ({x.shape[-1]}, *)")
    return x @ w_q, x @ w_k, x @ w_v


def scatter_kv(
    store: PagedKVStore,
    k: np.ndarray,
    v: np.ndarray,
    block_table: Sequence[int],
    start_pos: int,
) -> None:
    """Write ``(n, n_kv_head, head_size)`` keys/values at context positions ``start_pos..``."""
    cs = store.chunk_size
    _check_table(store, block_table, start_pos + k.shape[0])
    for i in range(k.shape[0]):
        p = start_pos + i
        slot = block_table[p // cs]
        store.k[slot, p % cs] = k[i]
        store.v[slot, p % cs] = v[i]


def paged_multi_token_attention(batch: RaggedQueryBatch, store: PagedKVStore) -> np.ndarray:
    _check_inputs(batch, store)
    q = batch.q
    n_tok, n_head, d = q.shape
    hkv = store.n_kv_head
    g = n_head // hkv
    cs = store.chunk_size
    out = np.zeros_like(q, dtype=np.float64)
    for sr in batch.sub_requests:
        start, n = sr.query_span
        # (n, hkv, g, d): query heads grouped under their KV head
        qs = q[start:start + n].reshape(n, hkv, g, d).astype(np.float64)
        last_visible = sr.causal_offset + np.arange(n)
        m = np.full((n, hkv, g), -np.inf)
        denom = np.zeros((n, hkv, g))
        acc = np.zeros((n, hkv, g, d))
        for b, slot in enumerate(sr.block_table):
            p0 = b * cs
            if p0 >= sr.context_len:
                break
            p1 = min(p0 + cs, sr.context_len)
            kb = store.k[slot, : p1 - p0]
            vb = store.v[slot, : p1 - p0]
            scores = np.einsum("nhgd,phd->nhgp", qs, kb) / batch.scale
            visible = np.arange(p0, p1)[None, :] <= last_visible[:, None]
            scores = np.where(visible[:, None, None, :], scores, -np.inf)
            m_new = np.maximum(m, scores.max(axis=-1))
            # rows with nothing visible yet keep m == -inf; avoid inf - inf
            safe = np.where(np.isfinite(m_new), m_new, 0.0)
            alpha = np.where(np.isfinite(m), np.exp(m - safe), 0.0)
            p = np.exp(scores - safe[..., None])
            denom = denom * alpha + p.sum(axis=-1)
            acc = acc * alpha[..., None] + np.einsum("nhgp,phd->nhgd", p, vb)
            m = m_new
        out[start:start + n] = (acc / denom[..., None]).reshape(n, n_head, d)
    return out


def single_token_attention(batch: RaggedQueryBatch, store: PagedKVStore) -> np.ndarray:
    """Generation-phase path: one query token per sub-request, matrix-vector products."""
    _check_inputs(batch, store)
    q = batch.q
    n_tok, n_head, d = q.shape
    hkv = store.n_kv_head
    g = n_head // hkv
    out = np.zeros_like(q, dtype=np.float64)
    for sr in batch.sub_requests:
        start, n = sr.query_span
        if n != 1:
            raise ValueError(f"sub-request {sr.req_id!r} has {n} query tokens; single-token path needs 1")
        k, v = store.gather(sr.block_table, sr.context_len)
        qv = q[start].reshape(hkv, g, d)
        scores = np.einsum("hgd,phd->hgp", qv, k) / batch.scale
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        w /= w.sum(axis=-1, keepdims=True)
        out[start] = np.einsum("hgp,phd->hgd", w, v).reshape(n_head, d)
    return out


def _dense(q: np.ndarray, k: np.ndarray, v: np.ndarray, causal_offset: int, scale: float) -> np.ndarray:
    n, n_head, d = q.shape
    ctx, hkv, _ = k.shape
    g = n_head // hkv
    qg = q.reshape(n, hkv, g, d)
    scores = np.einsum("nhgd,phd->hgnp", qg, k) / scale
    mask = np.arange(ctx)[None, :] <= (causal_offset + np.arange(n))[:, None]
    scores = np.where(mask, scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return np.einsum("hgnp,phd->nhgd", w, v).reshape(n, n_head, d)


def copyout_then_dense(
    batch: RaggedQueryBatch, store: PagedKVStore, bytes_per_scalar: int = 2
) -> tuple[np.ndarray, int]:
    """Gather each context into fresh contiguous buffers, then run dense attention.

    Returns the outputs and the bytes of past KV copied per layer. Keys and
    values of the query span itself are produced contiguously by the
    projection, so only positions before ``causal_offset`` count as copied.
    """
    _check_inputs(batch, store)
    out = np.zeros_like(batch.q, dtype=np.float64)
    copied = 0
    for sr in batch.sub_requests:
        start, n = sr.query_span
        k, v = store.gather(sr.block_table, sr.context_len)
        copied += sr.causal_offset * 2 * store.n_kv_head * store.head_size * bytes_per_scalar
        out[start:start + n] = _dense(batch.q[start:start + n], k, v, sr.causal_offset, batch.scale)
    return out, copied


def dense_oracle(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    causal_offset: int,
    scale: float | None = None,
) -> np.ndarray:
    """Explicit-loop causal attention on contiguous per-request tensors.

    ``q`` is ``(n, n_head, d)``; ``k`` and ``v`` are ``(ctx, n_kv_head, d)``
    with ``ctx == causal_offset + n``.
    """
    n, n_head, d = q.shape
    ctx, hkv, _ = k.shape
    if ctx != causal_offset + n:
        raise ValueError(f"context {ctx} != causal_offset {causal_offset} + queries {n}")
    if scale is None:
        scale = math.sqrt(d)
    group = n_head // hkv
    out = np.zeros((n, n_head, d))
    for h in range(n_head):
        kh = k[:, h // group, :]
        vh = v[:, h // group, :]
        for i in range(n):
            visible = causal_offset + i + 1
            scores = kh[:visible] @ q[i, h] / scale
            scores = np.exp(scores - scores.max())
            out[i, h] = (scores / scores.sum()) @ vh[:visible]
    return out


def softmax_rows(batch: RaggedQueryBatch, store: PagedKVStore) -> list[np.ndarray]:
    """Attention probabilities per sub-request, ``(n_head, n, ctx)``; masked entries are 0."""
    _check_inputs(batch, store)
    rows = []
    for sr in batch.sub_requests:
        start, n = sr.query_span
        k, _ = store.gather(sr.block_table, sr.context_len)
        q = batch.q[start:start + n]
        g = q.shape[1] // store.n_kv_head
        kk = np.repeat(k, g, axis=1)
        scores = np.einsum("nhd,phd->hnp", q, kk) / batch.scale
        mask = np.arange(sr.context_len)[None, :] <= (sr.causal_offset + np.arange(n))[:, None]
        scores = np.where(mask, scores, -np.inf)
        scores -= scores.max(axis=-1, keepdims=True)
        w = np.exp(scores)
        rows.append(w / w.sum(axis=-1, keepdims=True))
    return rows


def dump_array(path: str | Path, arr: np.ndarray) -> None:
    """Flat text: a shape line, then one value per line."""
    arr = np.asarray(arr)
    lines = [" ".join(str(s) for s in arr.shape)]
    lines += [repr(float(x)) for x in arr.ravel()]
    Path(path).write_text("\n".join(lines) + "\n")


def load_array(path: str | Path) -> np.ndarray:
    lines = Path(path).read_text().split("\n")
    shape = tuple(int(s) for s in lines[0].split())
    values = np.array([float(x) for x in lines[1:] if x.strip()])
    return values.reshape(shape)
