"""Vector-quantization core: per-token nearest codes, STE, VQ loss, usage EMA, resets."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .numcore import Tensor

log = logging.getLogger(__name__)

# rows x codes x dims budget for one chunk of the exhaustive distance scan
_CHUNK_ELEMS = 1 << 22


@dataclass
class Codebook:
    E: Tensor
    usage: np.ndarray
    decay: float = 0.99
    threshold: float = 1e-4

    @property
    def size(self) -> int:
        return self.E.shape[0]

    @property
    def dim(self) -> int:
        return self.E.shape[1]

    def dead_codes(self) -> np.ndarray:
        return np.flatnonzero(self.usage < self.threshold)


@dataclass
class QuantizationResult:
    codes: np.ndarray
    hard: Tensor
    ste: Tensor


@dataclass
class ResetReport:
    indices: list[int] = field(default_factory=list)
    mean_usage: float | None = None
    warning: str | None = None


def init_codebook(num_codes: int, dim: int, seed: int | np.random.Generator = 0,
                  decay: float = 0.99, threshold: float = 1e-4) -> Codebook:
    if num_codes < 2 or dim < 1:
        raise ValueError("need num_codes >= 2 and dim >= 1")
    if not 0.0 < decay < 1.0 or threshold <= 0:
        raise ValueError("decay must lie in (0, 1) and threshold must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    bound = 1.0 / num_codes
    E = rng.uniform(-bound, bound, size=(num_codes, dim))
    return Codebook(Tensor(E, requires_grad=True, name="codebook.E"), np.zeros(num_codes), decay, threshold)


def _values(x) -> np.ndarray:
    x = getattr(x, "values", x)  # ContextVector / Modulation wrappers
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def nearest_codes(phi, cb: Codebook) -> np.ndarray:
    """Index of the closest codebook row for every row of ``phi`` (lowest index on ties)."""
    x = _values(phi)
    if x.shape[-1] != cb.dim:
        raise ValueError(f"vector dim {x.shape[-1]} does not match codebook dim {cb.dim}")
    flat = x.reshape(-1, cb.dim)
    E = cb.E.data
    out = np.empty(flat.shape[0], dtype=np.int64)
    step = max(1, _CHUNK_ELEMS // (cb.size * cb.dim))
    for s in range(0, flat.shape[0], step):
        diff = flat[s:s + step, None, :] - E[None, :, :]
        out[s:s + step] = np.argmin((diff * diff).sum(axis=-1), axis=1)
    return out.reshape(x.shape[:-1])


def lookup(cb: Codebook, codes) -> Tensor:
    """Rows of E for ``codes``; differentiable w.r.t. E."""
    return nc.embedding(cb.E, codes)


def quantize_ste(phi: Tensor, cb: Codebook) -> QuantizationResult:
    codes = nearest_codes(phi, cb)
    hard = lookup(cb, codes)
    return QuantizationResult(codes, hard, nc.straight_through(phi, hard))


def vq_loss(phi: Tensor, hard: Tensor, beta_commit: float = 0.25) -> Tensor:
    """``||sg[phi] - hard||^2 + beta * ||phi - sg[hard]||^2`` summed over all elements."""
    if phi.shape != hard.shape:
        raise ValueError(f"shape mismatch {phi.shape} vs {hard.shape}")
    if beta_commit <= 0:
        raise ValueError("beta_commit must be positive")
    codebook_term = nc.stop_gradient(phi) - hard
    commit_term = phi - nc.stop_gradient(hard)
    return nc.sum_(codebook_term * codebook_term) + beta_commit * nc.sum_(commit_term * commit_term)


def update_usage(cb: Codebook, codes) -> np.ndarray:
    """EMA of assignment counts; every code decays, assigned ones also gain."""
    counts = np.bincount(np.asarray(codes, dtype=np.int64).reshape(-1), minlength=cb.size)
    if counts.size != cb.size:
        raise ValueError("code index out of range")
    cb.usage = cb.decay * cb.usage + (1.0 - cb.decay) * counts
    return cb.usage


def reset_dead_codes(cb: Codebook, batch_vectors, rng: np.random.Generator) -> ResetReport:
    """Overwrite dead codes with distinct batch rows sampled without replacement.

    Reset codes get the mean usage over all codes. Live rows are untouched.
    """
    dead = cb.dead_codes()
    if dead.size == 0:
        return ResetReport()
    rows = _values(batch_vectors).reshape(-1, cb.dim)
    if rows.shape[0] == 0:
        msg = f"{dead.size} dead codes but the batch is empty; nothing reset"
        log.warning(msg)
        return ResetReport(warning=msg)
    distinct = np.unique(rows, axis=0)
    n = min(dead.size, distinct.shape[0])
    picks = rng.choice(distinct.shape[0], size=n, replace=False)
    targets = dead[:n]
    mean_usage = float(cb.usage.mean())
    E = cb.E.data.copy()
    E[targets] = distinct[picks]
    cb.E.data = E
    cb.usage = cb.usage.copy()
    cb.usage[targets] = mean_usage
    return ResetReport([int(i) for i in targets], mean_usage)


def codebook_perplexity(usage) -> float:
    """``exp`` of the entropy of normalized usage; 1 (collapse) .. N_c (uniform)."""
    u = np.asarray(usage.usage if isinstance(usage, Codebook) else usage, dtype=np.float64)
    total = u.sum()
    if not total > 0:
        raise ValueError("usage is all zero; perplexity undefined")
    p = u[u > 0] / total
    # clip guards last-ulp overshoot at the uniform extreme
    return float(np.clip(np.exp(-(p * np.log(p)).sum()), 1.0, u.size))


def usage_histogram(cb: Codebook, bins: int = 10) -> dict:
    counts, edges = np.histogram(cb.usage, bins=bins)
    return {"counts": counts.tolist(), "edges": edges.tolist()}
