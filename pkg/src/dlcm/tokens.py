"""Byte-level tokenization and VarLen packing of documents into fixed windows."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .numerics import IGNORE_INDEX

BOD = 256
VOCAB_SIZE = 257
PAD_ID = BOD


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class Vocab:
    """256 byte symbols plus a begin-of-document marker."""

    size: int = VOCAB_SIZE
    bod: int = BOD

    def tokenize(self, text: bytes | str) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return [self.bod, *text]

    def detokenize(self, ids: Iterable[int]) -> bytes:
        return bytes(i for i in ids if i != self.bod)

    def piece(self, i: int) -> bytes:
        return b"" if i == self.bod else bytes([i])

    @classmethod
    def from_file(cls, path: str | Path) -> "Vocab":
        """Load a vocabulary description (JSON with ``size`` and ``bod``)."""
        meta = json.loads(Path(path).read_text())
        if meta.get("kind", "byte") != "byte":
            raise CorpusError(f"unsupported vocabulary kind {meta.get('kind')!r}")
        return cls(size=int(meta.get("size", VOCAB_SIZE)), bod=int(meta.get("bod", BOD)))


BYTE_VOCAB = Vocab()


def tokenize(text: bytes | str) -> list[int]:
    return BYTE_VOCAB.tokenize(text)


def detokenize(ids: Iterable[int]) -> bytes:
    return BYTE_VOCAB.detokenize(ids)


@dataclass
class TokenBatch:
    """One packed window of exactly ``L`` tokens.

    ``targets[t]`` is the next token of the same document (possibly living in
    the following window) or ``IGNORE_INDEX`` at document ends and padding.
    """

    ids: np.ndarray
    targets: np.ndarray
    doc_offsets: np.ndarray
    n_valid: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        offs = self.doc_offsets
        if len(offs) == 0 or offs[0] != 0:
            raise CorpusError("doc_offsets must start at 0")
        if np.any(np.diff(offs) <= 0) or offs[-1] >= len(self.ids):
            raise CorpusError("doc_offsets must be strictly ascending and < L")

    @property
    def L(self) -> int:
        return len(self.ids)

    def doc_index(self) -> np.ndarray:
        """Per-position document index; padding gets its own index."""
        starts = list(self.doc_offsets)
        if self.n_valid < self.L:
            starts.append(self.n_valid)
        marks = np.zeros(self.L, dtype=np.int64)
        marks[starts] = 1
        return np.cumsum(marks) - 1

    def segment_starts(self) -> np.ndarray:
        """Positions that must open a new concept (document starts and padding start)."""
        starts = list(self.doc_offsets)
        if self.n_valid < self.L:
            starts.append(self.n_valid)
        return np.asarray(starts, dtype=np.int64)


def read_corpus(paths: Sequence[str | Path]) -> list[bytes]:
    """Plain-text files (one document each) or JSONL files with a ``text`` field."""
    docs: list[bytes] = []
    for p in paths:
        p = Path(p)
        files = sorted(p.iterdir()) if p.is_dir() else [p]
        for f in files:
            if f.suffix == ".jsonl":
                for line in f.read_text(encoding="utf-8").splitlines():
                    if line.strip():
                        docs.append(json.loads(line)["text"].encode("utf-8"))
            else:
                docs.append(f.read_bytes())
    return docs


def pack_batches(
    corpus: Sequence[bytes | str | Sequence[int]],
    L: int,
    seed: int | None = 0,
    vocab: Vocab = BYTE_VOCAB,
) -> Iterator[TokenBatch]:
    """Concatenate tokenized documents (shuffled by ``seed``) and cut into windows.

    ``seed=None`` keeps corpus order. Only the final window is padded.
    """
    if L < 2:
        raise CorpusError("window length must be >= 2")
    if len(corpus) == 0:
        raise CorpusError("empty corpus")
    docs = [d if isinstance(d, (bytes, str)) else list(d) for d in corpus]
    order = list(range(len(docs)))
    if seed is not None:
        random.Random(seed).shuffle(order)

    def token_docs():
        for i in order:
            d = docs[i]
            yield vocab.tokenize(d) if isinstance(d, (bytes, str)) else list(d)

    ids = np.empty(L, dtype=np.int64)
    targets = np.full(L, IGNORE_INDEX, dtype=np.int64)
    offsets: list[int] = []
    fill = 0
    for toks in token_docs():
        pos = 0
        n = len(toks)
        while pos < n:
            if fill == L:
                yield TokenBatch(ids, targets, np.asarray(offsets, dtype=np.int64), L)
                ids = np.empty(L, dtype=np.int64)
                targets = np.full(L, IGNORE_INDEX, dtype=np.int64)
                offsets = []
                fill = 0
            take = min(n - pos, L - fill)
            ids[fill : fill + take] = toks[pos : pos + take]
            nxt = toks[pos + 1 : pos + take + 1]
            targets[fill : fill + len(nxt)] = nxt
            if pos == 0 or fill == 0:
                offsets.append(fill)
            fill += take
            pos += take
    if fill:
        ids[fill:] = PAD_ID
        targets[fill:] = IGNORE_INDEX
        yield TokenBatch(ids, targets, np.asarray(offsets, dtype=np.int64), fill)


def stack_windows(windows: Sequence[TokenBatch]):
    """Stack windows into (B, L) id/target arrays plus per-position doc index."""
    ids = np.stack([w.ids for w in windows])
    targets = np.stack([w.targets for w in windows])
    docs = np.stack([w.doc_index() for w in windows])
    valid = np.stack([np.arange(w.L) < w.n_valid for w in windows])
    return ids, targets, docs, valid
