"""Frozen toy GPT decoder with KV-prefix modulation and KV-LoRA on the top layers."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numcore as nc
from .layers import add_norm, attend, init_linear, merge_heads, norm, sinusoidal_positions, split_heads
from .numcore import ParamStore, Tensor

PAD, UNK, BOS, EOA = 0, 1, 2, 3


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int = 512
    hidden: int = 64
    num_layers: int = 4
    num_heads: int = 4
    max_sequence_length: int = 64
    n_lora: int = 2
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    share_down_projection: bool = True

    def __post_init__(self):
        if self.hidden % self.num_heads:
            raise ValueError("hidden must be divisible by num_heads")
        if not 1 <= self.n_lora <= self.num_layers:
            raise ValueError("n_lora must lie in [1, num_layers]")
        if self.lora_rank < 0 or self.lora_alpha <= 0 or not 0.0 <= self.lora_dropout < 1.0:
            raise ValueError("invalid LoRA hyperparameters")
        if self.lora_rank > self.hidden:
            raise ValueError("lora_rank exceeds hidden size")

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / self.lora_rank

    def adapted_layers(self) -> range:
        """The last ``n_lora`` layers, counted from the top and including the final one."""
        return range(self.num_layers - self.n_lora, self.num_layers)


def init_base(cfg: DecoderConfig, rng: np.random.Generator, prefix: str = "dec") -> ParamStore:
    """Base weights; frozen (``requires_grad=False``)."""
    d = cfg.hidden
    s = ParamStore()
    s.add(f"{prefix}.embed", rng.normal(0.0, 1.0, size=(cfg.vocab_size, d)), trainable=False)
    for layer in range(cfg.num_layers):
        p = f"{prefix}.layer{layer}"
        add_norm(s, f"{p}.attn", d, trainable=False)
        for w in ("wq", "wk", "wv", "wo"):
            s.add(f"{p}.{w}", init_linear(rng, d, d), trainable=False)
        add_norm(s, f"{p}.mlp", d, trainable=False)
        s.add(f"{p}.w1", init_linear(rng, d, 4 * d), trainable=False)
        s.add(f"{p}.b1", np.zeros(4 * d), trainable=False)
        s.add(f"{p}.w2", init_linear(rng, 4 * d, d) * 0.5, trainable=False)
        s.add(f"{p}.b2", np.zeros(d), trainable=False)
    add_norm(s, f"{prefix}.final", d, trainable=False)
    return s


def init_lora(cfg: DecoderConfig, rng: np.random.Generator, prefix: str = "lora") -> ParamStore:
    """Down-projections random, up-projections zero (adapter starts as a no-op)."""
    s = ParamStore()
    d, r = cfg.hidden, cfg.lora_rank
    if r == 0:
        return s
    for layer in cfg.adapted_layers():
        p = f"{prefix}.layer{layer}"
        if cfg.share_down_projection:
            s.add(f"{p}.A", init_linear(rng, d, r))
        else:
            s.add(f"{p}.A_K", init_linear(rng, d, r))
            s.add(f"{p}.A_V", init_linear(rng, d, r))
        s.add(f"{p}.B_K", np.zeros((r, d)))
        s.add(f"{p}.B_V", np.zeros((r, d)))
    return s


def lora_param_count(cfg: DecoderConfig) -> int:
    per_layer = (3 if cfg.share_down_projection else 4) * cfg.lora_rank * cfg.hidden
    return per_layer * cfg.n_lora


def apply_kv_prefix(k: Tensor, v: Tensor, prefix: Tensor | None) -> tuple[Tensor, Tensor]:
    """Prepend the ``T`` modulation rows to keys and values (``(B, S, D)`` layout)."""
    if prefix is None or prefix.shape[-2] == 0:
        return k, v
    if prefix.ndim == 2:
        prefix = nc.add(np.zeros((k.shape[0], *prefix.shape)), prefix)
    if prefix.shape[0] != k.shape[0] or prefix.shape[-1] != k.shape[-1]:
        raise ValueError(f"modulation shape {prefix.shape} incompatible with keys {k.shape}")
    return nc.concat([prefix, k], axis=1), nc.concat([prefix, v], axis=1)


def _dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rng is None or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return nc.mul(x, keep)


def apply_kv_lora(k_prime: Tensor, v_prime: Tensor, x: Tensor, lora: ParamStore, layer: int,
                  cfg: DecoderConfig, rng: np.random.Generator | None = None,
                  prefix: str = "lora") -> tuple[Tensor, Tensor]:
    """Add ``(alpha/r) * drop(X A) B`` to the content rows; prefix rows pass through.

    ``rng`` enables dropout (training); ``None`` means evaluation.
    """
    p = f"{prefix}.layer{layer}"
    scale = cfg.lora_scale
    if cfg.share_down_projection:
        down = _dropout(x @ lora[f"{p}.A"], cfg.lora_dropout, rng)
        dk = dv = down
    else:
        dk = _dropout(x @ lora[f"{p}.A_K"], cfg.lora_dropout, rng)
        dv = _dropout(x @ lora[f"{p}.A_V"], cfg.lora_dropout, rng)
    upd_k = (dk @ lora[f"{p}.B_K"]) * scale
    upd_v = (dv @ lora[f"{p}.B_V"]) * scale
    n_prefix = k_prime.shape[1] - x.shape[1]
    if n_prefix:
        zeros = np.zeros((x.shape[0], n_prefix, x.shape[2]))
        upd_k = nc.concat([nc.Tensor(zeros), upd_k], axis=1)
        upd_v = nc.concat([nc.Tensor(zeros), upd_v], axis=1)
    return k_prime + upd_k, v_prime + upd_v


def _attention_mask(seq: int, n_prefix: int) -> np.ndarray:
    causal = np.tril(np.ones((seq, seq), dtype=bool))
    return np.concatenate([np.ones((seq, n_prefix), dtype=bool), causal], axis=1)


def forward_modulated(tokens, modulation: Tensor | None, base: ParamStore, lora: ParamStore | None,
                      cfg: DecoderConfig, rng: np.random.Generator | None = None,
                      base_prefix: str = "dec", lora_prefix: str = "lora") -> Tensor:
    """Logits ``(B, S, vocab)`` for token ids ``(B, S)`` (or ``(S,)``, giving ``(S, vocab)``).

    ``modulation`` is ``(B, T, D)`` or ``(T, D)``; it is prepended to keys and
    values in every layer. ``lora`` may be ``None`` for the plain base model.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    single = ids.ndim == 1
    if single:
        ids = ids[None, :]
        if modulation is not None and modulation.ndim == 2:
            modulation = nc.reshape(modulation, (1, *modulation.shape))
    b, s = ids.shape
    if s > cfg.max_sequence_length:
        raise ValueError(f"sequence of length {s} exceeds max {cfg.max_sequence_length}")
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise ValueError("token id outside vocabulary")
    n_prefix = 0 if modulation is None else modulation.shape[-2]
    mask = _attention_mask(s, n_prefix)
    adapted = set(cfg.adapted_layers()) if lora is not None and len(lora) else set()

    h = nc.embedding(base[f"{base_prefix}.embed"], ids) + sinusoidal_positions(s, cfg.hidden)
    for layer in range(cfg.num_layers):
        p = f"{base_prefix}.layer{layer}"
        x = norm(base, f"{p}.attn", h)
        q = x @ base[f"{p}.wq"]
        k, v = apply_kv_prefix(x @ base[f"{p}.wk"], x @ base[f"{p}.wv"], modulation)
        if layer in adapted:
            k, v = apply_kv_lora(k, v, x, lora, layer, cfg, rng, lora_prefix)
        att = attend(split_heads(q, cfg.num_heads), split_heads(k, cfg.num_heads),
                     split_heads(v, cfg.num_heads), mask)
        h = h + merge_heads(att) @ base[f"{p}.wo"]
        x = norm(base, f"{p}.mlp", h)
        h = h + nc.gelu(x @ base[f"{p}.w1"] + base[f"{p}.b1"]) @ base[f"{p}.w2"] + base[f"{p}.b2"]
    h = norm(base, f"{base_prefix}.final", h)
    logits = h @ nc.transpose(base[f"{base_prefix}.embed"])
    return nc.reshape(logits, logits.shape[1:]) if single else logits


def qa_sequences(questions: list, answers: list) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Pack ``question + BOS + answer`` rows; targets shift left and end in EOA.

    Only positions predicting answer tokens (and the closing EOA) are unmasked.
    """
    rows = [list(q) + [BOS] + list(a) for q, a in zip(questions, answers)]
    width = max(len(r) for r in rows)
    ids = np.full((len(rows), width), PAD, dtype=np.int64)
    targets = np.full((len(rows), width), PAD, dtype=np.int64)
    mask = np.zeros((len(rows), width), dtype=bool)
    for i, (q, r) in enumerate(zip(questions, rows)):
        ids[i, : len(r)] = r
        targets[i, : len(r)] = r[1:] + [EOA]
        mask[i, len(q): len(r)] = True
    return ids, targets, mask


def qa_loss(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean token NLL over answer positions."""
    return nc.cross_entropy(logits, targets, mask)


def greedy_decode(step: Callable[[list[int]], np.ndarray], prompt: list[int], max_new: int,
                  eoa: int = EOA) -> list[int]:
    """Argmax decoding; ``step`` maps the current sequence to next-token logits."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    seq = list(prompt)
    out: list[int] = []
    for _ in range(max_new):
        nxt = int(np.argmax(step(seq)))
        if nxt == eoa:
            break
        out.append(nxt)
        seq.append(nxt)
    return out


def greedy_generate(query_tokens, modulation: Tensor | None, base: ParamStore, lora: ParamStore | None,
                    cfg: DecoderConfig, max_new: int = 4) -> list[int]:
    """Answer tokens generated after ``query + BOS``; stops at EOA or ``max_new``."""
    room = cfg.max_sequence_length - len(query_tokens) - 1
    max_new = max(1, min(max_new, room))

    def step(seq):
        with nc.no_grad():
            return forward_modulated(seq, modulation, base, lora, cfg).data[-1]

    return greedy_decode(step, list(query_tokens) + [BOS], max_new)
