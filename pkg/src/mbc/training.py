"""End-to-end optimization of the encoders, aggregator, KV-LoRA and codebook."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numcore as nc
from .adaptation import OnlineAdapter
from .aggregator import aggregate_rows
from .codebook import codebook_perplexity, quantize_ste, reset_dead_codes, update_usage, vq_loss
from .corpus import QACorpus, QARecord, Vocabulary, tokenize
from .decoder import forward_modulated, qa_loss, qa_sequences
from .encoder import encode_documents, encode_queries
from .model import MBCModel, ModelConfig

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MBCK"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings. Defaults are the full-scale ones; toy runs override
    ``learning_rate`` and ``backprop_dropout`` (see ``cli.TOY_TRAIN``)."""

    learning_rate: float = 1e-5
    epochs: int = 50
    batch_size: int = 32
    beta_commit: float = 0.25
    lambda_vq: float = 1.0
    backprop_dropout: float = 0.75
    seed: int = 0
    warmup_fraction: float = 0.01
    reset_codes: bool = True
    max_answer_tokens: int = 4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lambda_vq < 0:
            raise ValueError("lambda_vq must be >= 0")
        if not 0.0 <= self.backprop_dropout < 1.0:
            raise ValueError("backprop_dropout must lie in [0, 1)")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def total_loss(l_qa: nc.Tensor, l_vq: nc.Tensor, lambda_vq: float) -> nc.Tensor:
    return l_qa if lambda_vq == 0 else l_qa + l_vq * lambda_vq


def backprop_dropout_mask(k: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    """True = document keeps its gradient. At least one document always does."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must lie in [0, 1)")
    if rate == 0.0:
        return np.ones(k, dtype=bool)
    while True:
        keep = rng.random(k) >= rate
        if keep.any():
            return keep


def apply_backprop_dropout(x: nc.Tensor, keep: np.ndarray) -> nc.Tensor:
    """Stop the gradient of dropped documents (leading axis); forward value unchanged."""
    if keep.all():
        return x
    m = np.broadcast_to(keep.reshape(-1, *([1] * (x.ndim - 1))), x.shape).astype(np.float64)
    return nc.mul(x, m) + nc.mul(nc.stop_gradient(x), 1.0 - m)


@dataclass
class Example:
    doc_id: str
    doc: list[int]
    question: list[int]
    answer: list[int]


@dataclass
class EpochMetrics:
    epoch: int
    loss_qa: float
    loss_vq: float
    loss_total: float
    perplexity: float | None
    resets: int
    val_em: float | None = None
    val_f1: float | None = None

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    model: MBCModel
    optimizer: nc.Adam
    rng: np.random.Generator
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)
    best: dict | None = None
    best_arrays: dict[str, np.ndarray] | None = None


class Trainer:
    def __init__(self, model_cfg: ModelConfig, train_cfg: TrainConfig, vocab: Vocabulary,
                 train_records: list[QARecord], documents: dict, val_records: list[QARecord] | None = None):
        if len(vocab) > model_cfg.vocab_size:
            raise ValueError(f"vocabulary has {len(vocab)} entries, model allows {model_cfg.vocab_size}")
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.vocab = vocab
        self.documents = documents
        self.val_records = val_records or []
        self.examples = [self._example(r) for r in train_records]
        if not self.examples:
            raise ValueError("no training examples")
        rng = np.random.default_rng(train_cfg.seed)
        model = MBCModel(model_cfg, rng)
        self.state = TrainState(model, nc.Adam(model.trainable()), rng)

    @classmethod
    def from_corpus(cls, model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: QACorpus,
                    vocab: Vocabulary | None = None) -> "Trainer":
        if vocab is None:
            vocab = build_vocab(corpus)
        return cls(model_cfg, train_cfg, vocab, corpus.train, corpus.documents, corpus.val)

    @property
    def model(self) -> MBCModel:
        return self.state.model

    def _example(self, r: QARecord) -> Example:
        L = self.model_cfg.max_sequence_length
        doc = tokenize(self.documents[r.doc_id].text, self.vocab)[:L]
        ans = tokenize(r.answer, self.vocab)[: self.cfg.max_answer_tokens]
        q = tokenize(r.question, self.vocab)[: L - 1 - len(ans)]
        if not doc or not q or not ans:
            raise ValueError(f"record for {r.doc_id!r} tokenizes to an empty field")
        return Example(r.doc_id, doc, q, ans)

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.examples) / self.cfg.batch_size)

    def learning_rate(self, step: int) -> float:
        total = self.steps_per_epoch * self.cfg.epochs
        warm = max(1, round(self.cfg.warmup_fraction * total))
        return self.cfg.learning_rate * min(1.0, (step + 1) / warm)

    # ---------------------------------------------------------------- step

    def train_step(self, batch: list[Example]) -> dict:
        st, m, cfg = self.state, self.state.model, self.cfg
        mc = self.model_cfg
        k = len(batch)
        phi = encode_documents([e.doc for e in batch], m.amort, mc.encoder)
        quant = quantize_ste(phi, m.codebook)
        update_usage(m.codebook, quant.codes)
        resets = 0
        if cfg.reset_codes:
            resets = len(reset_dead_codes(m.codebook, phi.data, st.rng).indices)
        keep = backprop_dropout_mask(k, cfg.backprop_dropout, st.rng)
        contexts = apply_backprop_dropout(quant.ste, keep)
        rows = nc.reshape(contexts, (k * mc.tokens, mc.dim))
        qh, qvalid = encode_queries([e.question for e in batch], m.input, mc.encoder)
        modulation = aggregate_rows(qh, qvalid, rows, m.aggregator, mc.aggregator)
        ids, targets, mask = qa_sequences([e.question for e in batch], [e.answer for e in batch])
        logits = forward_modulated(ids, modulation, m.base, m.lora, mc.decoder, st.rng)
        l_qa = qa_loss(logits, targets, mask)
        l_vq = vq_loss(phi, quant.hard, cfg.beta_commit) * (1.0 / k)
        loss = total_loss(l_qa, l_vq, cfg.lambda_vq)
        terms = {"loss_qa": float(l_qa.data), "loss_vq": float(l_vq.data), "loss_total": float(loss.data)}
        if not all(math.isfinite(v) for v in terms.values()):
            raise TrainingError(f"non-finite loss at step {st.step} for docs "
                                f"{[e.doc_id for e in batch]}: {terms}")
        st.optimizer.zero_grad()
        nc.backward(loss)
        st.optimizer.step(self.learning_rate(st.step))
        st.step += 1
        terms["resets"] = resets
        return terms

    def train_epoch(self) -> EpochMetrics:
        st = self.state
        order = st.rng.permutation(len(self.examples))
        sums = {"loss_qa": 0.0, "loss_vq": 0.0, "loss_total": 0.0}
        resets = 0
        n = 0
        for s in range(0, len(order), self.cfg.batch_size):
            out = self.train_step([self.examples[i] for i in order[s:s + self.cfg.batch_size]])
            for key in sums:
                sums[key] += out[key]
            resets += out["resets"]
            n += 1
        st.epoch += 1
        usage = st.model.codebook.usage
        ppl = codebook_perplexity(usage) if usage.sum() > 0 else None
        metrics = EpochMetrics(st.epoch, sums["loss_qa"] / n, sums["loss_vq"] / n, sums["loss_total"] / n,
                               ppl, resets)
        if self.val_records:
            metrics.val_em, metrics.val_f1 = self.validate(self.val_records)
            self._track_best(metrics)
        st.history.append(metrics.as_dict())
        return metrics

    def _track_best(self, metrics: EpochMetrics) -> None:
        st = self.state
        key = (metrics.val_em, metrics.val_f1)
        if st.best is None or key > (st.best["val_em"], st.best["val_f1"]):
            st.best = metrics.as_dict()
            st.best_arrays = {k: v.copy() for k, v in st.model.all_arrays().items()}

    def validate(self, records: list[QARecord], group_size: int | None = None) -> tuple[float, float]:
        if not records:
            raise ValueError("empty validation set")
        adapter = self.adapter(group_size)
        adapter.memorize_many(_docs_for(records, self.documents))
        _, em, f1 = adapter.evaluate(records)
        return em, f1

    def adapter(self, group_size: int | None = None) -> OnlineAdapter:
        return OnlineAdapter(self.model, self.vocab, group_size, self.cfg.max_answer_tokens)

    def fit(self, epochs: int | None = None, callback: Callable[[EpochMetrics], None] | None = None
            ) -> list[EpochMetrics]:
        out = []
        target = self.cfg.epochs if epochs is None else self.state.epoch + epochs
        while self.state.epoch < target:
            metrics = self.train_epoch()
            log.debug("epoch %d: %s", metrics.epoch, metrics.as_dict())
            if callback:
                callback(metrics)
            out.append(metrics)
        return out

    # ---------------------------------------------------------------- checkpoints

    def save(self, path, arrays: dict[str, np.ndarray] | None = None) -> None:
        st = self.state
        meta = {
            "model": self.model_cfg.to_dict(),
            "train": asdict(self.cfg),
            "epoch": st.epoch,
            "step": st.step,
            "rng": st.rng.bit_generator.state,
            "adam_steps": {k: s.step for k, s in st.optimizer.states.items()},
            "history": st.history,
            "best": st.best,
            "vocab": self.vocab.id_to_token,
        }
        blocks = dict(arrays if arrays is not None else st.model.all_arrays())
        for k, s in st.optimizer.states.items():
            blocks[f"adam.m.{k}"] = s.m
            blocks[f"adam.v.{k}"] = s.v
        write_checkpoint(path, meta, blocks)

    @classmethod
    def load(cls, path, train_records: list[QARecord] | None = None, documents: dict | None = None,
             val_records: list[QARecord] | None = None) -> "Trainer":
        meta, blocks = read_checkpoint(path)
        model_cfg = ModelConfig.from_dict(meta["model"])
        train_cfg = TrainConfig.from_dict(meta["train"])
        vocab = Vocabulary({t: i for i, t in enumerate(meta["vocab"])})
        self = cls.__new__(cls)
        self.model_cfg, self.cfg, self.vocab = model_cfg, train_cfg, vocab
        self.documents = documents or {}
        self.val_records = val_records or []
        self.examples = [self._example(r) for r in (train_records or [])]
        rng = np.random.default_rng(train_cfg.seed)
        model = MBCModel(model_cfg, rng)
        model.load_arrays({k: v for k, v in blocks.items() if not k.startswith("adam.")})
        opt = nc.Adam(model.trainable())
        for k, s in opt.states.items():
            s.m, s.v = blocks[f"adam.m.{k}"].copy(), blocks[f"adam.v.{k}"].copy()
            s.step = meta["adam_steps"][k]
        rng.bit_generator.state = meta["rng"]
        self.state = TrainState(model, opt, rng, meta["epoch"], meta["step"], list(meta["history"]),
                                meta["best"])
        return self


def _docs_for(records: list[QARecord], documents: dict) -> list:
    seen: dict[str, object] = {}
    for r in records:
        seen.setdefault(r.doc_id, documents[r.doc_id])
    return list(seen.values())


def build_vocab(corpus: QACorpus) -> Vocabulary:
    """Vocabulary from the training split only (documents, questions, answers)."""
    texts = []
    for r in corpus.train:
        texts += [corpus.documents[r.doc_id].text, r.question, r.answer]
    return Vocabulary.build(texts)


# ---------------------------------------------------------------- file format


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_checkpoint(path, meta: dict, blocks: dict[str, np.ndarray]) -> None:
    """``MBCK`` | u16 version | u32 len + canonical JSON | u32 count | named f64 blocks."""
    cfg = _canonical_json(meta)
    parts = [CKPT_MAGIC, struct.pack("<HI", CKPT_VERSION, len(cfg)), cfg, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f8")
        parts.append(struct.pack("<HB", len(raw), a.ndim) + raw)
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("checkpoint is truncated")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4) != CKPT_MAGIC:
        raise CheckpointError("not an MBC checkpoint (bad magic)")
    version, n_meta = struct.unpack("<HI", take(6))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    meta = json.loads(take(n_meta))
    (count,) = struct.unpack("<I", take(4))
    blocks = {}
    for _ in range(count):
        n_name, ndim = struct.unpack("<HB", take(3))
        name = take(n_name).decode("utf-8")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(buf):
        raise CheckpointError("trailing bytes in checkpoint")
    return meta, blocks


# ---------------------------------------------------------------- diagnostics


def collapse_codebook(model: MBCModel, far: float = 100.0) -> None:
    """Adversarial start: code 0 near the origin, every other code far away.

    All encoder rows then snap to code 0; only resetting can revive the rest.
    """
    cb = model.codebook
    E = cb.E.data.copy()
    E[1:] += far
    cb.E.data = E


def collapse_experiment(model_cfg: ModelConfig, train_cfg: TrainConfig, corpus: QACorpus,
                        epochs: int = 10) -> dict[str, list[float]]:
    """Perplexity per epoch with and without dead-code resetting from the same collapsed start."""
    traces = {}
    vocab = build_vocab(corpus)
    for label, reset in (("reset", True), ("no_reset", False)):
        cfg = TrainConfig(**{**asdict(train_cfg), "reset_codes": reset, "epochs": epochs})
        trainer = Trainer(model_cfg, cfg, vocab, corpus.train, corpus.documents)
        collapse_codebook(trainer.model)
        traces[label] = [m.perplexity for m in trainer.fit()]
    return traces
