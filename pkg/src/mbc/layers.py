"""Building blocks shared by the encoder, aggregator and decoder."""

from __future__ import annotations

import numpy as np

from .numcore import ParamStore, Tensor, layer_norm, matmul, reshape, softmax, transpose


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def add_norm(store: ParamStore, prefix: str, dim: int, trainable: bool = True) -> None:
    store.add(f"{prefix}.ln_g", np.ones(dim), trainable)
    store.add(f"{prefix}.ln_b", np.zeros(dim), trainable)


def norm(store: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return layer_norm(x, store[f"{prefix}.ln_g"], store[f"{prefix}.ln_b"])


def sinusoidal_positions(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / dim)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def split_heads(x: Tensor, num_heads: int) -> Tensor:
    """``(..., S, D)`` -> ``(..., H, S, D/H)``."""
    *lead, s, d = x.shape
    x = reshape(x, (*lead, s, num_heads, d // num_heads))
    n = len(lead)
    return transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def merge_heads(x: Tensor) -> Tensor:
    """``(..., H, S, Dh)`` -> ``(..., S, H*Dh)``."""
    *lead, h, s, dh = x.shape
    n = len(lead)
    x = transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return reshape(x, (*lead, s, h * dh))


def attend(q: Tensor, k: Tensor, v: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention on head-split tensors."""
    scores = matmul(q, transpose(k)) * (1.0 / np.sqrt(q.shape[-1]))
    return matmul(softmax(scores, mask), v)
