"""Small synthetic corpora with controllable information density."""

from __future__ import annotations

import math
import random
from collections import Counter
from typing import Sequence

_SUBJECTS = ["the cat", "a dog", "my friend", "the old man", "our teacher", "the small bird", "she", "he",
             "the farmer", "a student", "the river", "this machine"]
_VERBS = ["sees", "likes", "found", "carried", "watched", "painted", "followed", "ignored", "built", "wanted"]
_OBJECTS = ["the red ball", "a long letter", "the morning coffee", "an open window", "the green hill",
            "a quiet song", "the heavy box", "my new book", "the last train", "a warm bread"]
_TAILS = ["yesterday.", "again.", "in the park.", "before noon.", "with great care.", "very slowly.",
          "at home.", "for a while."]

_CODE_NAMES = ["data", "value", "items", "count", "result", "buffer", "index", "total", "node", "text"]
_CODE_FUNCS = ["load", "parse", "update", "merge", "filter", "render", "split", "check"]


def template_sentence(rng: random.Random) -> str:
    return f"{rng.choice(_SUBJECTS)} {rng.choice(_VERBS)} {rng.choice(_OBJECTS)} {rng.choice(_TAILS)}"


def template_doc(rng: random.Random, n_bytes: int) -> str:
    parts: list[str] = []
    size = 0
    while size < n_bytes:
        s = template_sentence(rng).capitalize()
        parts.append(s)
        size += len(s) + 1
    return " ".join(parts)[:n_bytes]


def code_doc(rng: random.Random, n_bytes: int) -> str:
    lines: list[str] = []
    size = 0
    while size < n_bytes:
        f, a, b = rng.choice(_CODE_FUNCS), rng.choice(_CODE_NAMES), rng.choice(_CODE_NAMES)
        block = f"def {f}_{a}({b}):\n    {a} = {b}.{f}()\n    return {a}\n"
        lines.append(block)
        size += len(block)
    return "".join(lines)[:n_bytes]


def periodic_doc(rng: random.Random, n_bytes: int, period: int | None = None) -> str:
    period = period or rng.randint(3, 6)
    unit = "".join(rng.choice("abcdefghijklmnopqrstuvwxyz") for _ in range(period))
    return (unit * (n_bytes // period + 1))[:n_bytes]


def random_doc(rng: random.Random, n_bytes: int) -> bytes:
    return bytes(rng.randrange(32, 127) for _ in range(n_bytes))


def template_corpus(n_tokens: int, doc_len: int = 1024, seed: int = 0) -> list[str]:
    rng = random.Random(seed)
    return [template_doc(rng, doc_len) for _ in range(max(1, n_tokens // (doc_len + 1)))]


def periodic_corpus(n_docs: int = 16, doc_len: int = 512, seed: int = 0, period: int | None = None) -> list[str]:
    rng = random.Random(seed)
    return [periodic_doc(rng, doc_len, period) for _ in range(n_docs)]


def random_corpus(n_docs: int = 16, doc_len: int = 512, seed: int = 0) -> list[bytes]:
    rng = random.Random(seed)
    return [random_doc(rng, doc_len) for _ in range(n_docs)]


def mixed_density_corpus(n_tokens: int, doc_len: int = 512, seed: int = 0, dense_fraction: float = 0.5) -> list:
    """Documents alternate between repetitive (periodic/template) and dense (random) content."""
    rng = random.Random(seed)
    docs: list = []
    for _ in range(max(2, n_tokens // (doc_len + 1))):
        u = rng.random()
        if u < dense_fraction:
            docs.append(random_doc(rng, doc_len))
        elif u < dense_fraction + (1 - dense_fraction) / 2:
            docs.append(periodic_doc(rng, doc_len))
        else:
            docs.append(template_doc(rng, doc_len))
    return docs


def domain_corpora(n_docs: int = 8, doc_len: int = 512, seed: int = 0) -> dict[str, list]:
    rng = random.Random(seed)
    return {
        "casual_english": [template_doc(rng, doc_len) for _ in range(n_docs)],
        "code": [code_doc(rng, doc_len) for _ in range(n_docs)],
        "periodic": [periodic_doc(rng, doc_len) for _ in range(n_docs)],
        "random_bytes": [random_doc(rng, doc_len) for _ in range(n_docs)],
    }


def unigram_entropy(corpus: Sequence[bytes | str]) -> float:
    """Entropy (nats) of the byte unigram distribution, i.e. the best context-free CE."""
    counts: Counter = Counter()
    for d in corpus:
        counts.update(d.encode("utf-8") if isinstance(d, str) else d)
    total = sum(counts.values())
    return -sum(c / total * math.log(c / total) for c in counts.values())
