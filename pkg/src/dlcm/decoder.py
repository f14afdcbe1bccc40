"""Causal cross-attention from tokens to smoothed concepts.

Two implementations are kept side by side:

* the *irregular* path attends over the (L x M) token-to-concept grid and
  applies an unweighted softmax over the allowed concepts;
* the *replicated* path copies each concept's key/value once per member
  token and runs ordinary (L x L) causal attention.

They differ by a multiplicity weighting: under the replicated path concept
``k`` receives a logit offset of ``ln m_k(t)``, where ``m_k(t)`` is the number
of its tokens visible to query ``t``.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .segmenter import SegmentMap
from .transformer import NORM_EPS, RMSNorm, attention, qk_rmsnorm

CAUSALITY_MODES = ("paper_faithful", "strict")


class CrossAttention(nn.Module):
    def __init__(self, d_token: int, d_concept: int, n_heads: int, d_head: int | None = None,
                 causality: str = "paper_faithful"):
        super().__init__()
        if causality not in CAUSALITY_MODES:
            raise ValueError(f"unknown causality mode {causality!r}")
        d_head = d_head or d_token // n_heads
        self.n_heads, self.d_head, self.causality = n_heads, d_head, causality
        self.q_norm = RMSNorm(d_token)
        self.W_Q = nn.Linear(d_token, n_heads * d_head, bias=False)
        self.W_K = nn.Linear(d_concept, n_heads * d_head, bias=False)
        self.W_V = nn.Linear(d_concept, n_heads * d_head, bias=False)
        self.W_O = nn.Linear(n_heads * d_head, d_token, bias=False)

    def project(self, H, Z):
        B, L, _ = H.shape
        M = Z.shape[1]
        h, hd = self.n_heads, self.d_head
        q = self.W_Q(self.q_norm(H)).view(B, L, h, hd).transpose(1, 2)
        k = self.W_K(Z).view(B, M, h, hd).transpose(1, 2)
        v = self.W_V(Z).view(B, M, h, hd).transpose(1, 2)
        q, k = qk_rmsnorm(q, k, NORM_EPS)
        return q, k, v

    def output(self, attn, H):
        B, h, L, hd = attn.shape
        return self.W_O(attn.transpose(1, 2).reshape(B, L, h * hd)) + H

    def forward(self, H, Z, smap: SegmentMap, doc, path: str = "irregular"):
        if path == "irregular":
            return irregular_cross_attention(H, Z, smap, doc, self)[0]
        if path == "replicated":
            return replicated_cross_attention(H, Z, smap, doc, self)[0]
        raise ValueError(f"unknown cross-attention path {path!r}")


def concept_mask(smap: SegmentMap, doc: torch.Tensor, causality: str) -> torch.Tensor:
    """(B, L, M) allowed-concept mask for each token."""
    M = smap.M_max
    k = torch.arange(M)[None, None, :]
    seg = smap.seg_id[:, :, None]
    same_doc = smap.concept_doc[:, None, :] == doc[:, :, None]
    if causality == "paper_faithful":
        order = k <= seg
    elif causality == "strict":
        order = k < seg
    else:
        raise ValueError(f"unknown causality mode {causality!r}")
    return same_doc & order & smap.concept_valid[:, None, :]


def replicated_mask(smap: SegmentMap, doc: torch.Tensor, causality: str) -> torch.Tensor:
    """(B, L, L) mask over replicated key positions."""
    L = doc.shape[1]
    s = torch.arange(L)[None, None, :]
    t = torch.arange(L)[None, :, None]
    same_doc = doc[:, :, None] == doc[:, None, :]
    if causality == "paper_faithful":
        order = s <= t
    elif causality == "strict":
        order = s < smap.seg_start[:, :, None]
    else:
        raise ValueError(f"unknown causality mode {causality!r}")
    return same_doc & order


def multiplicity(smap: SegmentMap, causality: str) -> torch.Tensor:
    """(B, L, M) visible token count of each concept under the replicated path."""
    if causality == "paper_faithful":
        return smap.visible_counts()
    return smap.lengths[:, None, :].expand(-1, smap.j.shape[1], -1)


def irregular_cross_attention(H, Z, smap: SegmentMap, doc, params: CrossAttention, logit_offset=None,
                              causality: str | None = None):
    """Unweighted softmax over the concepts each token may see, plus the residual ``H``.

    Returns ``(output, probs)`` with probs of shape (B, heads, L, M). Rows with
    no allowed concept (strict mode, first segment) get a zero attention term.
    """
    causality = causality or params.causality
    q, k, v = params.project(H, Z)
    mask = concept_mask(smap, doc, causality)[:, None]
    scale = params.d_head ** -0.5
    if logit_offset is not None:
        # fold the offset into the scores before masking
        scores = (q @ k.transpose(-2, -1)) * scale + logit_offset[:, None]
        scores = scores.masked_fill(~mask, float("-inf"))
        visible = mask.any(dim=-1, keepdim=True)
        scores = torch.where(visible, scores, torch.zeros_like(scores))
        probs = torch.softmax(scores, dim=-1) * visible
        attn = probs @ v
    else:
        attn, probs = attention(q, k, v, mask, scale)
    return params.output(attn, H), probs


def replicated_cross_attention(H, Z, smap: SegmentMap, doc, params: CrossAttention,
                               causality: str | None = None, fused: bool = False):
    """Concept replication: keys/values gathered per token, then (L x L) causal attention."""
    causality = causality or params.causality
    q, k, v = params.project(H, Z)
    idx = smap.seg_id[:, None, :, None].expand(-1, params.n_heads, -1, params.d_head)
    k_rep = torch.gather(k, 2, idx)
    v_rep = torch.gather(v, 2, idx)
    if fused and causality == "paper_faithful" and bool((doc == doc[:, :1]).all()):
        # one document per row: the mask is exactly the causal triangle
        return params.output(F.scaled_dot_product_attention(q, k_rep, v_rep, is_causal=True), H), None
    mask = replicated_mask(smap, doc, causality)[:, None]
    if fused:
        # rows with nothing visible (strict mode, first segment) would be NaN; open them and zero after
        visible = mask.any(dim=-1, keepdim=True)
        attn = F.scaled_dot_product_attention(q, k_rep, v_rep, attn_mask=mask | ~visible) * visible
        probs = None
    else:
        attn, probs = attention(q, k_rep, v_rep, mask, params.d_head ** -0.5)
    return params.output(attn, H), probs


def decode_logits(H: torch.Tensor, W_unemb: torch.Tensor, s_token: float = 1.0) -> torch.Tensor:
    """logits = (1 / s_token) * H W_unemb^T."""
    if H.shape[-1] != W_unemb.shape[1]:
        raise ValueError(f"decoder width {H.shape[-1]} != unembedding width {W_unemb.shape[1]}")
    return F.linear(H, W_unemb) / s_token


def log_multiplicity_offset(smap: SegmentMap, causality: str, dtype=torch.float64) -> torch.Tensor:
    m = multiplicity(smap, causality).to(torch.get_default_dtype() if dtype is None else dtype)
    return torch.where(m > 0, torch.log(m.clamp_min(1)), torch.zeros_like(m))

