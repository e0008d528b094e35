"""The assembled MBC model: parameter groups, configuration, and hashing."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from .aggregator import AggregatorConfig, init_aggregator
from .codebook import Codebook, init_codebook
from .decoder import DecoderConfig, init_base, init_lora, lora_param_count
from .encoder import EncoderConfig, init_encoder
from .numcore import ParamStore


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 512
    dim: int = 64
    tokens: int = 12
    max_sequence_length: int = 64
    encoder_blocks: int = 2
    encoder_heads: int = 4
    aggregator_blocks: int = 4
    aggregator_heads: int = 4
    group_size: int = 64
    decoder_layers: int = 4
    decoder_heads: int = 4
    n_lora: int = 2
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    share_down_projection: bool = True
    num_codes: int = 512
    ema_decay: float = 0.99
    reset_threshold: float = 1e-4

    @property
    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.vocab_size, self.dim, self.encoder_blocks, self.encoder_heads,
                             self.max_sequence_length, self.tokens)

    @property
    def aggregator(self) -> AggregatorConfig:
        return AggregatorConfig(self.dim, self.tokens, self.aggregator_blocks, self.aggregator_heads,
                                self.group_size)

    @property
    def decoder(self) -> DecoderConfig:
        return DecoderConfig(self.vocab_size, self.dim, self.decoder_layers, self.decoder_heads,
                             self.max_sequence_length, self.n_lora, self.lora_rank, self.lora_alpha,
                             self.lora_dropout, self.share_down_projection)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class MBCModel:
    """Holds every parameter group plus the codebook.

    Initialization draws from ``rng`` in this fixed order: amortization encoder,
    input encoder, aggregator, base decoder, KV-LoRA, codebook.
    """

    TRAINABLE = ("amort", "input", "aggregator", "lora")

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.amort = init_encoder(cfg.encoder, rng, "enc")
        self.input = init_encoder(cfg.encoder, rng, "inp", pooled=False)
        self.aggregator = init_aggregator(cfg.aggregator, rng, "agg")
        self.base = init_base(cfg.decoder, rng, "dec")
        self.lora = init_lora(cfg.decoder, rng, "lora")
        self.codebook: Codebook = init_codebook(cfg.num_codes, cfg.dim, rng, cfg.ema_decay,
                                                cfg.reset_threshold)

    def groups(self) -> dict[str, ParamStore]:
        return {"amort": self.amort, "input": self.input, "aggregator": self.aggregator,
                "lora": self.lora, "base": self.base}

    def trainable(self) -> dict:
        out = {}
        for g in self.TRAINABLE:
            out.update(getattr(self, g).tensors)
        out[self.codebook.E.name] = self.codebook.E
        return out

    def all_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for store in self.groups().values():
            out.update(store.arrays())
        out["codebook.E"] = self.codebook.E.data
        out["codebook.usage"] = self.codebook.usage
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for store in self.groups().values():
            store.load_arrays({k: arrays[k] for k in store.tensors})
        self.codebook.E.data = np.array(arrays["codebook.E"], dtype=np.float64)
        self.codebook.usage = np.array(arrays["codebook.usage"], dtype=np.float64)

    def param_hash(self, include_codebook: bool = True) -> str:
        h = hashlib.sha256()
        arrays = self.all_arrays()
        for k in sorted(arrays):
            if not include_codebook and k.startswith("codebook."):
                continue
            h.update(k.encode())
            h.update(np.ascontiguousarray(arrays[k]).tobytes())
        return h.hexdigest()

    def base_hash(self) -> str:
        h = hashlib.sha256()
        for k, t in self.base:
            h.update(k.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ParamReport:
    amort: int
    input: int
    aggregator: int
    base: int
    lora: int
    codebook: int

    @property
    def networks(self) -> int:
        return self.amort + self.input + self.aggregator + self.base

    @property
    def added(self) -> int:
        return self.codebook + self.lora

    @property
    def overhead_percent(self) -> float:
        return 100.0 * self.added / self.networks

    def as_dict(self) -> dict:
        d = asdict(self)
        d.update(networks=self.networks, added=self.added, overhead_percent=self.overhead_percent)
        return d


def param_report(model: MBCModel) -> ParamReport:
    return ParamReport(model.amort.count(), model.input.count(), model.aggregator.count(),
                       model.base.count(), model.lora.count(), model.codebook.E.data.size)


def closed_form_overhead(dim: int, num_codes: int, lora_rank: int, n_lora: int,
                         share_down_projection: bool, networks_total: int) -> ParamReport:
    """Parameter accounting for configurations too large to instantiate.

    ``networks_total`` is the combined amortization + input + aggregator + base
    count, reported here under ``base`` with the other network fields zero.
    """
    lora = lora_param_count(DecoderConfig(hidden=dim, num_layers=n_lora, num_heads=1, n_lora=n_lora,
                                          lora_rank=lora_rank, lora_alpha=1.0,
                                          share_down_projection=share_down_projection))
    return ParamReport(0, 0, 0, networks_total, lora, num_codes * dim)
