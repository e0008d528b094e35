"""Gradient-free online adaptation: memorize a stream, answer from the compressed bank."""

from __future__ import annotations

import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import numcore as nc
from .aggregator import AggregationStats, EmptyMemoryError, hierarchical_aggregate
from .codebook import nearest_codes
from .corpus import Document, QARecord, Vocabulary, detokenize, tokenize
from .decoder import greedy_generate
from .encoder import encode_documents, encode_query
from .membank import CompressedMemoryBank, footprint
from .model import MBCModel

ARTICLES = frozenset({"a", "an", "the"})


# ---------------------------------------------------------------- metrics


def normalize_answer(text: str) -> str:
    """Lowercase, drop Unicode punctuation, drop standalone articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if not unicodedata.category(ch).startswith("P"))
    return " ".join(w for w in text.split() if w not in ARTICLES)


def exact_match(preds: list[str], golds: list[str]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} references")
    if not preds:
        raise ValueError("no predictions to score")
    hits = sum(normalize_answer(p) == normalize_answer(g) for p, g in zip(preds, golds))
    return hits / len(preds)


def token_f1(pred: str, gold: str) -> float:
    p, g = normalize_answer(pred).split(), normalize_answer(gold).split()
    if not p and not g:
        return 1.0
    if not p or not g:
        return 0.0
    overlap = sum((Counter(p) & Counter(g)).values())
    if overlap == 0:
        return 0.0
    precision, recall = overlap / len(p), overlap / len(g)
    return 2 * precision * recall / (precision + recall)


def mean_f1(preds: list[str], golds: list[str]) -> float:
    if len(preds) != len(golds):
        raise ValueError(f"{len(preds)} predictions for {len(golds)} references")
    if not preds:
        raise ValueError("no predictions to score")
    return float(np.mean([token_f1(p, g) for p, g in zip(preds, golds)]))


# ---------------------------------------------------------------- adapter


class OnlineAdapter:
    """Forward-only memorization into a code-index bank and answering against it."""

    def __init__(self, model: MBCModel, vocab: Vocabulary, group_size: int | None = None,
                 max_answer_tokens: int = 4):
        self.model = model
        self.vocab = vocab
        self.group_size = group_size or model.cfg.group_size
        self.max_answer_tokens = max_answer_tokens
        cfg = model.cfg
        self.bank = CompressedMemoryBank(cfg.num_codes, cfg.dim, cfg.tokens)
        self.stats = AggregationStats()

    def _doc_tokens(self, doc: Document) -> list[int]:
        ids = tokenize(doc.text, self.vocab)[: self.model.cfg.max_sequence_length]
        if not ids:
            raise ValueError(f"document {doc.doc_id!r} has no tokens")
        return ids

    def memorize(self, doc: Document) -> np.ndarray:
        return self.memorize_many([doc])[0]

    def memorize_many(self, docs: Iterable[Document], batch_size: int = 64) -> list[np.ndarray]:
        docs = list(docs)
        for d in docs:
            if d.doc_id in self.bank:
                raise ValueError(f"document {d.doc_id!r} already memorized")
        out = []
        m = self.model
        with nc.no_grad():
            for s in range(0, len(docs), batch_size):
                chunk = docs[s:s + batch_size]
                phi = encode_documents([self._doc_tokens(d) for d in chunk], m.amort, m.cfg.encoder)
                codes = nearest_codes(phi, m.codebook)
                for d, c in zip(chunk, codes):
                    self.bank.store(d.doc_id, c)
                    out.append(c)
        return out

    def modulation(self, question: str):
        m = self.model
        if len(self.bank) == 0:
            raise EmptyMemoryError("no memorized documents")
        with nc.no_grad():
            q = encode_query(self._query_tokens(question), m.input, m.cfg.encoder)
            entries = self.bank.materialize_all(m.codebook)
            return hierarchical_aggregate(q, entries, m.aggregator, m.cfg.aggregator,
                                          self.group_size, self.stats).values

    def _query_tokens(self, question: str) -> list[int]:
        ids = tokenize(question, self.vocab)
        if not ids:
            raise ValueError("question has no tokens")
        # leave room for BOS + answer inside the decoder window
        return ids[: self.model.cfg.max_sequence_length - 1 - self.max_answer_tokens]

    def answer(self, question: str) -> str:
        return self._decode(question, self.modulation(question))

    def answer_without_memory(self, question: str) -> str:
        """Query-only baseline: the same decoder with no modulation prefix."""
        return self._decode(question, None)

    def _decode(self, question: str, modulation) -> str:
        m = self.model
        ids = greedy_generate(self._query_tokens(question), modulation, m.base, m.lora,
                              m.cfg.decoder, self.max_answer_tokens)
        return detokenize(ids, self.vocab)

    def evaluate(self, records: list[QARecord], use_memory: bool = True) -> tuple[list[str], float, float]:
        ask = self.answer if use_memory else self.answer_without_memory
        preds = [ask(r.question) for r in records]
        golds = [r.answer for r in records]
        return preds, exact_match(preds, golds), mean_f1(preds, golds)


# ---------------------------------------------------------------- retention


@dataclass
class RetentionRow:
    milestone: int
    docs: int
    footprint_mb: float
    f1: float
    retention_pct: float | None

    def as_dict(self) -> dict:
        return {"milestone": self.milestone, "docs": self.docs, "footprint_mb": self.footprint_mb,
                "f1": self.f1, "retention_pct": self.retention_pct}


@dataclass
class RetentionReport:
    rows: list[RetentionRow] = field(default_factory=list)

    def summary(self) -> str:
        lines = [f"{'docs':>6} {'MB':>8} {'F1':>8} {'retention%':>11}"]
        for r in self.rows:
            ret = "undefined" if r.retention_pct is None else f"{r.retention_pct:.2f}"
            lines.append(f"{r.docs:>6} {r.footprint_mb:>8.4f} {r.f1:>8.4f} {ret:>11}")
        return "\n".join(lines)


def retention_experiment(adapter: OnlineAdapter, stream: list[Document], first_chunk_qa: list[QARecord],
                         chunk: int = 200, max_docs: int = 1600,
                         element_bytes: int = 4, index_bytes: int = 8) -> RetentionReport:
    """F1 on the first chunk's queries after each further chunk of memorization.

    ``adapter`` should start with an empty bank.
    """
    if len(stream) < max_docs:
        raise ValueError(f"stream has {len(stream)} documents, need {max_docs}")
    if not first_chunk_qa:
        raise ValueError("first-chunk QA set is empty")
    golds = [r.answer for r in first_chunk_qa]
    report = RetentionReport()
    f1_first = None
    for end in range(chunk, max_docs + 1, chunk):
        adapter.memorize_many(stream[end - chunk:end])
        preds = [adapter.answer(r.question) for r in first_chunk_qa]
        f1 = mean_f1(preds, golds)
        if f1_first is None:
            f1_first = f1
        retention = 100.0 * (f1 / f1_first) if f1_first > 0 else None
        fp = footprint(adapter.bank, element_bytes=element_bytes, index_bytes=index_bytes)
        report.rows.append(RetentionRow(end, len(adapter.bank), fp.compressed_mb, f1, retention))
    return report
