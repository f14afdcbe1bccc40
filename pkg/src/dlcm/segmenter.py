"""Boundary detection, discrete sampling, segment maps, concept pooling and the
global compression statistics that drive the auxiliary load-balancing loss."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import cosine, segment_mean_pool


class ConfigError(ValueError):
    pass


class SegmentationError(ValueError):
    pass


@dataclass(frozen=True)
class SegmenterConfig:
    d_scan: int | None = None
    temp_sharpen: float = 0.5
    threshold: float = 0.5
    target_R: float = 4.0
    mode: str = "rule_based"
    lambda_aux: float = 0.03

    def __post_init__(self):
        if not self.target_R > 1:
            raise ConfigError(f"target_R must be > 1, got {self.target_R}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not 0 < self.temp_sharpen <= 1:
            raise ConfigError(f"temp_sharpen must lie in (0, 1], got {self.temp_sharpen}")
        if self.mode not in ("rule_based", "learned_mlp"):
            raise ConfigError(f"unknown boundary mode {self.mode!r}")

    def scan_width(self, d_token: int) -> int:
        return self.d_scan or min(128, d_token)


@dataclass
class BoundaryScores:
    p: torch.Tensor
    forced: torch.Tensor
    degenerate: torch.Tensor
    p_sharp: torch.Tensor | None = None
    b: torch.Tensor | None = None


def forced_mask(doc: torch.Tensor) -> torch.Tensor:
    """True where a position opens a document (or the padding tail) in (B, L) doc indices."""
    forced = torch.ones_like(doc, dtype=torch.bool)
    forced[:, 1:] = doc[:, 1:] != doc[:, :-1]
    return forced


def boundary_scores(H: torch.Tensor, W_q: torch.Tensor, W_k: torch.Tensor, doc: torch.Tensor) -> BoundaryScores:
    """p_t = (1 - cos(q_{t-1}, k_t)) / 2 with p forced to 1 at document starts.

    ``W_q``/``W_k`` are (d_scan, d_token) weights. A zero-norm query or key
    gives cosine 0 (p = 0.5); those positions are flagged in ``degenerate``.
    """
    if H.dim() == 2:
        H, doc = H[None], doc[None]
    q = F.linear(H, W_q)
    k = F.linear(H, W_k)
    cos, degenerate = cosine(q[:, :-1], k[:, 1:])
    p_inner = (1 - cos) / 2
    ones = H.new_ones(H.shape[0], 1)
    p = torch.cat([ones, p_inner], dim=1)
    degenerate = torch.cat([torch.zeros_like(degenerate[:, :1]), degenerate], dim=1)
    forced = forced_mask(doc)
    p = torch.where(forced, torch.ones_like(p), p)
    degenerate = degenerate & ~forced
    if bool(degenerate.any()):
        warnings.warn(f"{int(degenerate.sum())} boundary scores hit a zero-norm query/key", RuntimeWarning)
    return BoundaryScores(p=p, forced=forced, degenerate=degenerate)


class LearnedBoundaryPredictor(nn.Module):
    """Two-layer MLP on [h_{t-1}; h_t] producing boundary probabilities.

    The output layer starts at zero, so every probability starts at 0.5.
    """

    def __init__(self, d_token: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(2 * d_token, hidden, bias=True)
        self.fc2 = nn.Linear(hidden, 1, bias=True)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, H: torch.Tensor, doc: torch.Tensor) -> BoundaryScores:
        prev = torch.cat([torch.zeros_like(H[:, :1]), H[:, :-1]], dim=1)
        logits = self.fc2(F.silu(self.fc1(torch.cat([prev, H], dim=-1)))).squeeze(-1)
        p = torch.sigmoid(logits)
        forced = forced_mask(doc)
        p = torch.where(forced, torch.ones_like(p), p)
        return BoundaryScores(p=p, forced=forced, degenerate=torch.zeros_like(forced))


def sharpen(p: torch.Tensor, alpha: float) -> torch.Tensor:
    """sigma(logit(p) / alpha); alpha = 1 is the identity and p = 0.5 is a fixed point."""
    if not alpha > 0:
        raise ConfigError(f"sharpening temperature must be > 0, got {alpha}")
    p = p.detach()
    logit = torch.log(p) - torch.log1p(-p)
    return torch.sigmoid(logit / alpha)


def sharpen_and_sample(
    scores: BoundaryScores,
    cfg: SegmenterConfig,
    phase: str,
    generator: torch.Generator | None = None,
    uniforms: torch.Tensor | None = None,
) -> torch.Tensor:
    """Boundary bits: Bernoulli(sharpened p) when training, ``p >= threshold`` at inference."""
    p = scores.p.detach()
    if phase == "train":
        scores.p_sharp = sharpen(p, cfg.temp_sharpen)
        if uniforms is None:
            uniforms = torch.rand(p.shape, generator=generator, dtype=p.dtype)
        b = uniforms < scores.p_sharp
    elif phase == "infer":
        scores.p_sharp = p
        b = p >= cfg.threshold
    else:
        raise ConfigError(f"unknown phase {phase!r}")
    b = b | scores.forced
    scores.b = b
    return b


@dataclass
class SegmentMap:
    """Token-to-concept assignment for a (B, L) batch of windows.

    ``j`` is the 1-based concept index of each token within its window;
    concepts are laid out per window and padded to ``M_max``.
    """

    b: torch.Tensor
    j: torch.Tensor
    n_concepts: torch.Tensor
    lengths: torch.Tensor
    concept_doc: torch.Tensor
    concept_valid: torch.Tensor
    seg_start: torch.Tensor
    seg_end: torch.Tensor
    concept_start: torch.Tensor

    @property
    def M_max(self) -> int:
        return self.lengths.shape[1]

    @property
    def seg_id(self) -> torch.Tensor:
        return self.j - 1

    def flat_concept_index(self) -> torch.Tensor:
        """Index of each token's concept in the (B * M_max) padded layout."""
        B = self.j.shape[0]
        base = torch.arange(B, device=self.j.device)[:, None] * self.M_max
        return base + self.seg_id

    def visible_counts(self) -> torch.Tensor:
        """(B, L, M_max) number of tokens of concept k at positions <= t."""
        onehot = F.one_hot(self.seg_id, self.M_max).to(torch.int64)
        return onehot.cumsum(dim=1)


def build_segment_map(b: torch.Tensor, doc: torch.Tensor) -> SegmentMap:
    """Partition each window into contiguous segments starting at every ``b = 1``."""
    b = torch.as_tensor(b).bool()
    doc = torch.as_tensor(doc)
    if b.dim() == 1:
        b, doc = b[None], doc[None]
    if not bool(b[:, 0].all()):
        raise SegmentationError("first position of every window must be a boundary (b_1 = 1)")
    missing = forced_mask(doc) & ~b
    if bool(missing.any()):
        pos = torch.nonzero(missing)[0].tolist()
        raise SegmentationError(f"document start at {pos} lacks a boundary")
    B, L = b.shape
    j = b.long().cumsum(dim=1)
    n = j[:, -1]
    M_max = int(n.max())
    seg_id = j - 1
    lengths = torch.zeros(B, M_max, dtype=torch.long)
    lengths.scatter_add_(1, seg_id, torch.ones_like(seg_id))
    concept_doc = torch.full((B, M_max), -1, dtype=doc.dtype)
    concept_doc.scatter_(1, seg_id, doc)
    concept_valid = torch.arange(M_max)[None, :] < n[:, None]
    pad_doc = int(doc.max()) + 1
    concept_doc = torch.where(concept_valid, concept_doc, torch.full_like(concept_doc, pad_doc))

    ar = torch.arange(L).expand(B, L)
    start_at = torch.where(b, ar, torch.zeros_like(ar))
    seg_start = torch.cummax(start_at, dim=1).values
    first = torch.zeros(B, M_max, dtype=torch.long)
    first.scatter_reduce_(1, seg_id, ar, reduce="amin", include_self=False)
    seg_end = torch.gather(first + lengths - 1, 1, seg_id)
    return SegmentMap(
        b=b,
        j=j,
        n_concepts=n,
        lengths=lengths,
        concept_doc=concept_doc,
        concept_valid=concept_valid,
        seg_start=seg_start,
        seg_end=seg_end,
        concept_start=first,
    )


def pool_concepts(H: torch.Tensor, smap: SegmentMap, W_up: torch.Tensor) -> torch.Tensor:
    """Mean-pool token states per segment and project with ``W_up`` (d_concept x d_token).

    Returns (B, M_max, d_concept); padded concept slots are zero.
    """
    if H.dim() == 2:
        H = H[None]
    B, L, d = H.shape
    flat = smap.flat_concept_index().reshape(-1)
    valid_slots = torch.nonzero(smap.concept_valid.reshape(-1)).squeeze(1)
    remap = torch.full((B * smap.M_max,), -1, dtype=torch.long)
    remap[valid_slots] = torch.arange(valid_slots.numel())
    raw = segment_mean_pool(H.reshape(B * L, d), remap[flat], valid_slots.numel())
    c = F.linear(raw, W_up)
    out = c.new_zeros(B * smap.M_max, c.shape[1]).index_copy(0, valid_slots, c)
    return out.view(B, smap.M_max, -1)


# exact accumulation of boundary statistics ------------------------------------------

_EXACT_BITS = 1100


def exact_sum(values: Iterable[float]) -> Fraction:
    """Exact sum of float64 values (no rounding), as a Fraction."""
    total = 0
    for v in values:
        n, d = float(v).as_integer_ratio()
        total += n << (_EXACT_BITS - d.bit_length() + 1)
    return Fraction(total, 1 << _EXACT_BITS)


@dataclass(frozen=True)
class ShardStats:
    token_count: int
    sum_p: Fraction
    sum_b: int

    @classmethod
    def from_tensors(cls, p: torch.Tensor, b: torch.Tensor, valid: torch.Tensor | None = None) -> "ShardStats":
        if valid is None:
            valid = torch.ones_like(b, dtype=torch.bool)
        pv = p.detach()[valid].to(torch.float64).tolist()
        return cls(int(valid.sum()), exact_sum(pv), int(b[valid].sum()))


@dataclass(frozen=True)
class GlobalStats:
    token_count: int
    sum_p: Fraction
    sum_b: int

    @property
    def G(self) -> float:
        return float(self.sum_p / self.token_count)

    @property
    def F(self) -> float:
        return float(Fraction(self.sum_b, self.token_count))

    @property
    def realized_R(self) -> float:
        return float(Fraction(self.token_count, self.sum_b)) if self.sum_b else float("inf")


def accumulate_global_stats(shards: Sequence) -> GlobalStats:
    """Merge per-shard (token_count, sum_p, sum_b) in ascending shard order.

    Sums are kept exact, so any sharding of the same tokens yields identical
    G and F to the last bit.
    """
    if len(shards) == 0:
        raise ValueError("no shards to accumulate")
    count, sp, sb = 0, Fraction(0), 0
    for s in shards:
        tc, p, bsum = (s.token_count, s.sum_p, s.sum_b) if isinstance(s, ShardStats) else s
        if tc <= 0:
            raise ValueError(f"shard token_count must be > 0, got {tc}")
        count += int(tc)
        sp += Fraction(p)
        sb += int(bsum)
    return GlobalStats(count, sp, sb)


def aux_loss(G, F, R: float):
    """Load-balancing loss; zero at F = G = 1/R. ``G`` may be a tensor, ``F`` is a constant."""
    if not R > 1:
        raise ConfigError(f"R must be > 1, got {R}")
    inner = (R - 1) * F * G + (1 - F) * (1 - G)
    return R * inner / (R - 1) - 1


def aux_grad_coefficient(F: float, R: float) -> float:
    """d aux_loss / d G, which depends on F only (the loss is linear in G)."""
    return R * (R * F - 1) / (R - 1)


def straight_through(b: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    """Forward value ``b``, gradient of ``p``."""
    return b.to(p.dtype) + (p - p.detach())


def segments_as_text(ids: Sequence[int], b: Sequence[bool], vocab=None, sep: str = " | ") -> str:
    """Render one document with segment separators, e.g. ``"So I | 've been"``."""
    from .tokens import BYTE_VOCAB

    vocab = vocab or BYTE_VOCAB
    pieces: list[bytes] = []
    cur = b""
    for i, (tok, bit) in enumerate(zip(ids, b)):
        if bit and i and cur.strip():
            pieces.append(cur)
            cur = b""
        cur += vocab.piece(int(tok))
    if cur:
        pieces.append(cur)
    return sep.join(p.decode("utf-8", errors="replace").strip() for p in pieces if p.strip())


def segment_lengths(b: np.ndarray) -> np.ndarray:
    idx = np.flatnonzero(np.asarray(b))
    return np.diff(np.append(idx, len(b)))
