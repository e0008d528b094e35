"""Cross-attention aggregation of memory entries into a query-specific modulation.

Block 0 lets a learned T-row seed read the query representation; every later
block lets the running T rows read the concatenated token rows of all memory
entries. Entries are concatenated in a canonical (content-sorted) order, so
the output depends on the multiset of entries only, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .layers import add_norm, attend, init_linear, merge_heads, norm, split_heads
from .numcore import ParamStore, Tensor


class EmptyMemoryError(ValueError):
    pass


@dataclass(frozen=True)
class AggregatorConfig:
    dim: int = 64
    tokens: int = 12
    num_blocks: int = 4
    num_heads: int = 4
    group_size: int = 64

    def __post_init__(self):
        if self.num_blocks < 2:
            raise ValueError("need a query block and at least one memory block")
        if self.dim % self.num_heads:
            raise ValueError("dim must be divisible by num_heads")
        if self.group_size < 1:
            raise ValueError("group_size must be >= 1")


@dataclass
class Modulation:
    values: Tensor


@dataclass
class AggregationStats:
    """Instrumentation: largest number of entry rows a single flat call attended."""

    peak_entry_rows: int = 0
    calls: int = 0
    history: list[int] = field(default_factory=list)

    def record(self, rows: int) -> None:
        self.calls += 1
        self.history.append(rows)
        self.peak_entry_rows = max(self.peak_entry_rows, rows)


def init_aggregator(cfg: AggregatorConfig, rng: np.random.Generator, prefix: str = "agg") -> ParamStore:
    store = ParamStore()
    store.add(f"{prefix}.seed", rng.normal(0.0, 1.0, size=(cfg.tokens, cfg.dim)))
    for b in range(cfg.num_blocks):
        p = f"{prefix}.block{b}"
        add_norm(store, f"{p}.q", cfg.dim)
        add_norm(store, f"{p}.kv", cfg.dim)
        for w in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}.{w}", init_linear(rng, cfg.dim, cfg.dim))
    return store


def aggregate_rows(query: Tensor, query_valid: np.ndarray | None, rows: Tensor, params: ParamStore,
                   cfg: AggregatorConfig, prefix: str = "agg") -> Tensor:
    """Batched core: ``query (B, Lq, D)`` against shared memory ``rows (N, D)`` -> ``(B, T, D)``."""
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise EmptyMemoryError("no memorized documents")
    b, lq, d = query.shape
    h = cfg.num_heads
    x = nc.add(np.zeros((b, cfg.tokens, d)), params[f"{prefix}.seed"])

    p = f"{prefix}.block0"
    qn = norm(params, f"{p}.q", x)
    kvn = norm(params, f"{p}.kv", query)
    mask = None if query_valid is None else query_valid[:, None, None, :]
    att = attend(split_heads(qn @ params[f"{p}.wq"], h), split_heads(kvn @ params[f"{p}.wk"], h),
                 split_heads(kvn @ params[f"{p}.wv"], h), mask)
    x = x + merge_heads(att) @ params[f"{p}.wo"]

    for blk in range(1, cfg.num_blocks):
        p = f"{prefix}.block{blk}"
        qn = nc.reshape(norm(params, f"{p}.q", x), (b * cfg.tokens, d))
        kvn = norm(params, f"{p}.kv", rows)
        att = attend(split_heads(qn @ params[f"{p}.wq"], h), split_heads(kvn @ params[f"{p}.wk"], h),
                     split_heads(kvn @ params[f"{p}.wv"], h))
        x = x + nc.reshape(merge_heads(att), (b, cfg.tokens, d)) @ params[f"{p}.wo"]
    return x


def canonical_order(entries) -> list[int]:
    """Content-sorted permutation of entries (ties keep arrival order)."""
    keys = [_data(e).tobytes() for e in entries]
    return sorted(range(len(entries)), key=keys.__getitem__)


def _data(e) -> np.ndarray:
    e = getattr(e, "values", e)
    return e.data if isinstance(e, Tensor) else np.asarray(e, dtype=np.float64)


def _as_query(q) -> Tensor:
    q = getattr(q, "values", q)
    q = nc.as_tensor(q)
    return nc.reshape(q, (1, *q.shape)) if q.ndim == 2 else q


def aggregate(q, entries, params: ParamStore, cfg: AggregatorConfig,
              stats: AggregationStats | None = None, prefix: str = "agg") -> Modulation:
    """Flat aggregation of all entries for one query; output ``(T, D)``."""
    if len(entries) == 0:
        raise EmptyMemoryError("no memorized documents")
    tensors = [nc.as_tensor(getattr(e, "values", e)) for e in entries]
    for t in tensors:
        if t.shape != (cfg.tokens, cfg.dim):
            raise ValueError(f"entry shape {t.shape} != {(cfg.tokens, cfg.dim)}")
    ordered = [tensors[i] for i in canonical_order(tensors)]
    rows = ordered[0] if len(ordered) == 1 else nc.concat(ordered, axis=0)
    if stats is not None:
        stats.record(rows.shape[0])
    out = aggregate_rows(_as_query(q), None, rows, params, cfg, prefix)
    return Modulation(nc.reshape(out, out.shape[1:]))


def hierarchical_aggregate(q, entries, params: ParamStore, cfg: AggregatorConfig,
                           group_size: int | None = None, stats: AggregationStats | None = None,
                           prefix: str = "agg") -> Modulation:
    """Divide-and-conquer aggregation with at most ``group_size`` entries per flat call.

    Entries are split into contiguous groups of the canonical order; each group's
    modulation becomes a pseudo-entry for the next level until one call covers
    everything.
    """
    m = cfg.group_size if group_size is None else group_size
    if m < 1:
        raise ValueError("group_size must be >= 1")
    if len(entries) == 0:
        raise EmptyMemoryError("no memorized documents")
    level = [getattr(e, "values", e) for e in entries]
    level = [level[i] for i in canonical_order(level)]
    while len(level) > m:
        if m == 1:
            raise ValueError("group_size 1 cannot combine more than one entry")
        level = [aggregate(q, level[s:s + m], params, cfg, stats, prefix).values
                 for s in range(0, len(level), m)]
    return aggregate(q, level, params, cfg, stats, prefix)
