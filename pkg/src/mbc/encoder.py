"""Toy amortization / input encoders.

Token embedding + sinusoidal positions, a stack of pre-norm self-attention
blocks, then a learned pooling map that mixes the L encoded positions into
exactly T output rows. The pooling weights are a softmax over the first L
columns of a ``T x max_len`` logit table, so a zero table is a plain average.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .layers import add_norm, attend, init_linear, merge_heads, norm, sinusoidal_positions, split_heads
from .numcore import ParamStore, Tensor


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int = 512
    embed_dim: int = 64
    num_blocks: int = 2
    num_heads: int = 4
    max_sequence_length: int = 64
    output_tokens: int = 12

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ValueError("embed_dim must be divisible by num_heads")
        if self.output_tokens < 1 or self.max_sequence_length < 1:
            raise ValueError("output_tokens and max_sequence_length must be >= 1")


@dataclass
class ContextVector:
    values: Tensor
    doc_id: str | None = None


@dataclass
class QueryRep:
    values: Tensor


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc",
                 pooled: bool = True) -> ParamStore:
    """Parameters drawn from ``rng`` in insertion order.

    ``pooled=False`` omits the pooling map (query encoders keep per-token states).
    """
    d = cfg.embed_dim
    store = ParamStore()
    store.add(f"{prefix}.embed", rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)))
    for b in range(cfg.num_blocks):
        p = f"{prefix}.block{b}"
        add_norm(store, f"{p}.attn", d)
        for w in ("wq", "wk", "wv", "wo"):
            store.add(f"{p}.{w}", init_linear(rng, d, d))
        add_norm(store, f"{p}.mlp", d)
        store.add(f"{p}.w1", init_linear(rng, d, 4 * d))
        store.add(f"{p}.b1", np.zeros(4 * d))
        store.add(f"{p}.w2", init_linear(rng, 4 * d, d) * 0.5)
        store.add(f"{p}.b2", np.zeros(d))
    if cfg.num_blocks:
        add_norm(store, f"{prefix}.final", d)
    if pooled:
        store.add(f"{prefix}.pool", np.zeros((cfg.output_tokens, cfg.max_sequence_length)))
    return store


def _check_tokens(tokens, cfg: EncoderConfig) -> np.ndarray:
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ValueError("encoder input must be a non-empty token sequence")
    if ids.size > cfg.max_sequence_length:
        raise ValueError(f"sequence of length {ids.size} exceeds max {cfg.max_sequence_length}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id outside vocabulary; map to UNK first")
    return ids


def pad_batch(batch: list, cfg: EncoderConfig, pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences; returns ``(ids, valid)`` both ``(K, L)``."""
    seqs = [_check_tokens(t, cfg) for t in batch]
    if not seqs:
        raise ValueError("empty batch")
    length = max(s.size for s in seqs)
    ids = np.full((len(seqs), length), pad_id, dtype=np.int64)
    valid = np.zeros((len(seqs), length), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, : s.size] = s
        valid[i, : s.size] = True
    return ids, valid


def encode_hidden(ids: np.ndarray, valid: np.ndarray, params: ParamStore, cfg: EncoderConfig,
                  prefix: str) -> Tensor:
    """Per-position hidden states ``(K, L, D)``; padded keys are masked out."""
    pos = sinusoidal_positions(ids.shape[1], cfg.embed_dim)
    h = nc.embedding(params[f"{prefix}.embed"], ids) + pos
    key_mask = valid[:, None, None, :]
    for b in range(cfg.num_blocks):
        p = f"{prefix}.block{b}"
        x = norm(params, f"{p}.attn", h)
        q = split_heads(x @ params[f"{p}.wq"], cfg.num_heads)
        k = split_heads(x @ params[f"{p}.wk"], cfg.num_heads)
        v = split_heads(x @ params[f"{p}.wv"], cfg.num_heads)
        h = h + merge_heads(attend(q, k, v, key_mask)) @ params[f"{p}.wo"]
        x = norm(params, f"{p}.mlp", h)
        x = nc.gelu(x @ params[f"{p}.w1"] + params[f"{p}.b1"])
        h = h + x @ params[f"{p}.w2"] + params[f"{p}.b2"]
    if cfg.num_blocks:
        h = norm(params, f"{prefix}.final", h)
    return h


def pooling_weights(params: ParamStore, cfg: EncoderConfig, valid: np.ndarray, prefix: str = "enc") -> Tensor:
    """``(K, T, L)`` convex weights over each sequence's valid positions."""
    k, length = valid.shape
    logits = nc.add(np.zeros((k, cfg.output_tokens, length)), params[f"{prefix}.pool"][:, :length])
    return nc.softmax(logits, valid[:, None, :])


def encode_documents(batch: list, params: ParamStore, cfg: EncoderConfig, prefix: str = "enc") -> Tensor:
    """Document encodings stacked to ``(K, T, D)`` in input order."""
    ids, valid = pad_batch(batch, cfg)
    h = encode_hidden(ids, valid, params, cfg, prefix)
    return pooling_weights(params, cfg, valid, prefix) @ h


def encode_queries(batch: list, params: ParamStore, cfg: EncoderConfig,
                   prefix: str = "inp") -> tuple[Tensor, np.ndarray]:
    """Query states ``(K, L, D)`` plus the ``(K, L)`` validity mask.

    Queries longer than ``max_sequence_length`` are truncated, not rejected.
    """
    ids, valid = pad_batch([list(t)[: cfg.max_sequence_length] for t in batch], cfg)
    return encode_hidden(ids, valid, params, cfg, prefix), valid


def encode_document(tokens, params: ParamStore, cfg: EncoderConfig, doc_id: str | None = None,
                    prefix: str = "enc") -> ContextVector:
    out = encode_documents([tokens], params, cfg, prefix)
    return ContextVector(nc.reshape(out, out.shape[1:]), doc_id)


def encode_query(tokens, params: ParamStore, cfg: EncoderConfig, prefix: str = "inp") -> QueryRep:
    """Per-token query states ``(T_q, D)``; no pooling."""
    h, _ = encode_queries([tokens], params, cfg, prefix)
    return QueryRep(nc.reshape(h, h.shape[1:]))
