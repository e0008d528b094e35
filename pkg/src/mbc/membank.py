"""Memory banks (continuous and code-index), bank file I/O, footprint accounting."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .codebook import Codebook

MAGIC = b"MBCB"
VERSION = 1
_HEADER = struct.Struct("<4sHIII")  # magic, version, N_c, D, T
MB = 1_000_000


class BankError(ValueError):
    pass


@dataclass
class CompressedMemoryBank:
    num_codes: int
    dim: int
    tokens: int
    doc_ids: list[str] = field(default_factory=list)
    codes: list[np.ndarray] = field(default_factory=list)
    _index: dict[str, int] = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.doc_ids)

    def __contains__(self, doc_id: str) -> bool:
        return doc_id in self._index

    def store(self, doc_id: str, codes) -> None:
        c = np.asarray(codes, dtype=np.int64).reshape(-1)
        if doc_id in self._index:
            raise BankError(f"document {doc_id!r} already stored")
        if c.size != self.tokens:
            raise BankError(f"expected {self.tokens} codes, got {c.size}")
        if c.size and (c.min() < 0 or c.max() >= self.num_codes):
            raise BankError(f"code outside [0, {self.num_codes})")
        self._index[doc_id] = len(self.doc_ids)
        self.doc_ids.append(doc_id)
        self.codes.append(c.astype(np.uint32))

    def codes_for(self, doc_id: str) -> np.ndarray:
        try:
            return self.codes[self._index[doc_id]]
        except KeyError:
            raise BankError(f"unknown document {doc_id!r}") from None

    def materialize(self, cb: Codebook, doc_id: str) -> np.ndarray:
        """``T x D`` rows of the *current* codebook for a stored document."""
        return cb.E.data[self.codes_for(doc_id).astype(np.int64)]

    def materialize_all(self, cb: Codebook) -> list[np.ndarray]:
        E = cb.E.data
        return [E[c.astype(np.int64)] for c in self.codes]


@dataclass
class ContinuousMemoryBank:
    doc_ids: list[str] = field(default_factory=list)
    contexts: list[np.ndarray] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.doc_ids)

    def store(self, doc_id: str, phi) -> None:
        phi = np.array(phi, dtype=np.float64)
        if doc_id in self.doc_ids:
            raise BankError(f"document {doc_id!r} already stored")
        if self.contexts and phi.shape != self.contexts[0].shape:
            raise BankError("context shape differs from the bank's")
        self.doc_ids.append(doc_id)
        self.contexts.append(phi)


@dataclass(frozen=True)
class FootprintReport:
    bytes_codebook: int
    bytes_indices: int
    bytes_continuous_equivalent: int

    @property
    def bytes_compressed(self) -> int:
        return self.bytes_codebook + self.bytes_indices

    @property
    def compressed_mb(self) -> float:
        return self.bytes_compressed / MB

    @property
    def continuous_mb(self) -> float:
        return self.bytes_continuous_equivalent / MB

    @property
    def reduction_percent(self) -> float | None:
        if self.bytes_continuous_equivalent <= 0:
            return None
        return 100.0 * (1.0 - self.bytes_compressed / self.bytes_continuous_equivalent)

    def as_dict(self) -> dict:
        return {
            "bytes_codebook": self.bytes_codebook,
            "bytes_indices": self.bytes_indices,
            "bytes_continuous_equivalent": self.bytes_continuous_equivalent,
            "mbc_mb": self.compressed_mb,
            "mac_mb": self.continuous_mb,
            "reduction_percent": self.reduction_percent,
        }


def footprint_model(num_docs: int, num_codes: int, dim: int, tokens: int,
                    element_bytes: int = 4, index_bytes: int = 8) -> FootprintReport:
    """Closed-form sizes: codebook + T indices per doc vs T x D floats per doc."""
    return FootprintReport(
        bytes_codebook=num_codes * dim * element_bytes,
        bytes_indices=num_docs * tokens * index_bytes,
        bytes_continuous_equivalent=num_docs * tokens * dim * element_bytes,
    )


def footprint(bank, num_codes: int | None = None, dim: int | None = None, tokens: int | None = None,
              element_bytes: int = 4, index_bytes: int = 8) -> FootprintReport:
    if isinstance(bank, CompressedMemoryBank):
        num_codes, dim, tokens = bank.num_codes, bank.dim, bank.tokens
    elif isinstance(bank, ContinuousMemoryBank) and bank.contexts:
        tokens, dim = bank.contexts[0].shape
    if None in (num_codes, dim, tokens):
        raise ValueError("codebook dimensions are required for an empty continuous bank")
    return footprint_model(len(bank), num_codes, dim, tokens, element_bytes, index_bytes)


# ---------------------------------------------------------------- persistence


def bank_file_size(num_codes: int, dim: int, tokens: int, doc_ids: list[str]) -> int:
    per_doc = sum(2 + len(d.encode("utf-8")) + 4 * tokens for d in doc_ids)
    return _HEADER.size + num_codes * dim * 8 + 8 + per_doc


def save_bank(bank: CompressedMemoryBank, cb: Codebook, path) -> None:
    if cb.E.shape != (bank.num_codes, bank.dim):
        raise BankError("codebook shape does not match the bank")
    parts = [_HEADER.pack(MAGIC, VERSION, bank.num_codes, bank.dim, bank.tokens),
             np.ascontiguousarray(cb.E.data, dtype="<f8").tobytes(),
             struct.pack("<Q", len(bank))]
    for doc_id, codes in zip(bank.doc_ids, bank.codes):
        raw = doc_id.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise BankError("doc id longer than 65535 bytes")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(np.asarray(codes, dtype="<u4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_bank(path) -> tuple[CompressedMemoryBank, np.ndarray]:
    """Returns the bank and the stored codebook matrix ``E``."""
    buf = Path(path).read_bytes()

    def take(n: int, pos: int) -> bytes:
        if pos + n > len(buf):
            raise BankError("bank file is truncated")
        return buf[pos:pos + n]

    magic, version, n_c, dim, tokens = _HEADER.unpack(take(_HEADER.size, 0))
    if magic != MAGIC:
        raise BankError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BankError(f"unsupported bank version {version}")
    pos = _HEADER.size
    E = np.frombuffer(take(n_c * dim * 8, pos), dtype="<f8").reshape(n_c, dim).astype(np.float64)
    pos += n_c * dim * 8
    (count,) = struct.unpack("<Q", take(8, pos))
    pos += 8
    bank = CompressedMemoryBank(n_c, dim, tokens)
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2, pos))
        pos += 2
        doc_id = take(n, pos).decode("utf-8")
        pos += n
        codes = np.frombuffer(take(4 * tokens, pos), dtype="<u4")
        pos += 4 * tokens
        bank.store(doc_id, codes)
    if pos != len(buf):
        raise BankError("trailing bytes after the last document")
    return bank, E
