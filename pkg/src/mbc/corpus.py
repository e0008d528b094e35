"""QA data: JSONL reader/writer, word tokenizer, and a synthetic fact generator.

Synthetic documents state one random fact each::

    entity e12 attribute a3 value v7      ->  "what is a3 of e12" / "v7"

Values are drawn uniformly and independently of entity and attribute, so a
model can only beat chance by reading the document.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decoder import BOS, EOA, PAD, UNK

RESERVED = {"<pad>": PAD, "<unk>": UNK, "<bos>": BOS, "<eoa>": EOA}
_WORD = re.compile(r"\w+")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str


@dataclass(frozen=True)
class QARecord:
    doc_id: str
    question: str
    answer: str

    def __post_init__(self):
        if not self.question.strip() or not self.answer.strip():
            raise DataError(f"empty question or answer for {self.doc_id!r}")


@dataclass
class Vocabulary:
    token_to_id: dict[str, int] = field(default_factory=lambda: dict(RESERVED))

    @classmethod
    def build(cls, texts) -> "Vocabulary":
        """Ids assigned by first occurrence, after the reserved ids."""
        vocab = cls()
        for text in texts:
            for w in words(text):
                vocab.token_to_id.setdefault(w, len(vocab.token_to_id))
        return vocab

    @property
    def id_to_token(self) -> list[str]:
        out = [""] * len(self.token_to_id)
        for t, i in self.token_to_id.items():
            out[i] = t
        return out

    def __len__(self) -> int:
        return len(self.token_to_id)


@dataclass
class QACorpus:
    documents: dict[str, Document]
    train: list[QARecord]
    val: list[QARecord]
    test: list[QARecord]

    def docs_for(self, records: list[QARecord]) -> list[Document]:
        seen: dict[str, Document] = {}
        for r in records:
            seen.setdefault(r.doc_id, self.documents[r.doc_id])
        return list(seen.values())


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    lookup = vocab.token_to_id
    return [lookup.get(w, UNK) for w in words(text)]


def detokenize(ids, vocab: Vocabulary) -> str:
    """Ids beyond the vocabulary (the model's output space may be larger) read as ``<unk>``."""
    table = vocab.id_to_token
    return " ".join(table[i] if i < len(table) else "<unk>" for i in ids if i not in (PAD, BOS, EOA))


# ---------------------------------------------------------------- JSONL

_FIELDS = ("doc_id", "text", "question", "answer")


def load_qa(path) -> tuple[list[Document], list[QARecord]]:
    """Read ``{"doc_id", "text", "question", "answer"}`` lines; documents deduplicated."""
    docs: dict[str, Document] = {}
    records: list[QARecord] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            missing = [f for f in _FIELDS if f not in obj]
            if missing:
                raise DataError(f"line {lineno}: missing field(s) {', '.join(missing)}")
            doc_id, text = str(obj["doc_id"]), str(obj["text"])
            if not text.strip():
                raise DataError(f"line {lineno}: empty document text")
            prev = docs.get(doc_id)
            if prev is not None and prev.text != text:
                raise DataError(f"line {lineno}: doc_id {doc_id!r} reused with different text")
            docs.setdefault(doc_id, Document(doc_id, text))
            try:
                records.append(QARecord(doc_id, str(obj["question"]), str(obj["answer"])))
            except DataError as exc:
                raise DataError(f"line {lineno}: {exc}") from None
    return list(docs.values()), records


def write_qa(path, documents: dict[str, Document], records: list[QARecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            row = {"doc_id": r.doc_id, "text": documents[r.doc_id].text,
                   "question": r.question, "answer": r.answer}
            fh.write(json.dumps(row, sort_keys=True) + "\n")


# ---------------------------------------------------------------- synthetic


def gen_synthetic(n_docs: int, seed: int = 0, n_attributes: int = 8, n_values: int = 32,
                  split: tuple[float, float, float] = (0.8, 0.1, 0.1)) -> QACorpus:
    """Random key->value facts, one question per document.

    Entity/attribute pairs are distinct across documents; the entity pool grows
    with ``n_docs`` so pairs never run out.
    """
    if n_docs < 1:
        raise ValueError("n_docs must be >= 1")
    rng = np.random.default_rng(seed)
    n_entities = max(4, math.ceil(1.25 * n_docs / n_attributes))
    pairs = rng.choice(n_entities * n_attributes, size=n_docs, replace=False)
    values = rng.integers(0, n_values, size=n_docs)
    width = len(str(n_docs - 1))
    documents: dict[str, Document] = {}
    records: list[QARecord] = []
    for i, (pair, val) in enumerate(zip(pairs, values)):
        ent, attr = divmod(int(pair), n_attributes)
        doc_id = f"doc{i:0{width}d}"
        documents[doc_id] = Document(doc_id, f"entity e{ent} attribute a{attr} value v{val}")
        records.append(QARecord(doc_id, f"what is a{attr} of e{ent}", f"v{val}"))
    n_train = int(round(split[0] * n_docs))
    n_val = int(round(split[1] * n_docs))
    return QACorpus(documents, records[:n_train], records[n_train:n_train + n_val],
                    records[n_train + n_val:])


def record_dict(r: QARecord) -> dict:
    return asdict(r)


def save_corpus(corpus: QACorpus, out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name in ("train", "val", "test"):
        paths[name] = out / f"{name}.jsonl"
        write_qa(paths[name], corpus.documents, getattr(corpus, name))
    return paths
