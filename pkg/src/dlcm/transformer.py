"""Pre-norm causal transformer blocks shared by encoder, backbone and decoder.

Sequences are packed: every row of a batch carries a per-position document
index and attention never crosses documents. Rotary positions restart at
each document start.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import ShapeError, rms_normalize

NORM_EPS = 1e-6


@dataclass(frozen=True)
class StackConfig:
    d: int
    n_layers: int
    n_heads: int
    n_kv_heads: int | None = None
    mlp_dim: int | None = None
    rope_base: float = 10000.0

    def __post_init__(self):
        kv = self.kv_heads
        if self.d % self.n_heads:
            raise ValueError(f"width {self.d} not divisible by heads {self.n_heads}")
        if self.n_heads % kv:
            raise ValueError(f"heads {self.n_heads} not divisible by kv heads {kv}")

    @property
    def kv_heads(self) -> int:
        return self.n_kv_heads or self.n_heads

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    @property
    def hidden_mlp(self) -> int:
        return self.mlp_dim or 4 * self.d


def qk_rmsnorm(q: torch.Tensor, k: torch.Tensor, eps: float = NORM_EPS):
    return rms_normalize(q, eps), rms_normalize(k, eps)


class RMSNorm(nn.Module):
    def __init__(self, d: int, eps: float = NORM_EPS):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(d))

    def forward(self, x):
        return rms_normalize(x, self.eps) * self.weight


def positions_from_docs(doc: torch.Tensor) -> torch.Tensor:
    """Position of each token inside its own document, for (B, L) doc indices."""
    B, L = doc.shape
    ar = torch.arange(L, device=doc.device).expand(B, L)
    is_start = torch.ones_like(doc, dtype=torch.bool)
    is_start[:, 1:] = doc[:, 1:] != doc[:, :-1]
    start_pos = torch.where(is_start, ar, torch.zeros_like(ar))
    return ar - torch.cummax(start_pos, dim=1).values


def doc_causal_mask(doc: torch.Tensor, valid: torch.Tensor | None = None) -> torch.Tensor:
    """(B, 1, L, L) boolean mask: key s visible from query t iff s <= t in the same document."""
    L = doc.shape[1]
    causal = torch.ones(L, L, dtype=torch.bool, device=doc.device).tril()
    mask = (doc[:, :, None] == doc[:, None, :]) & causal
    if valid is not None:
        mask = mask & valid[:, None, :]
        # rows with no visible key (only happens for invalid queries) see themselves
        mask = mask | (~valid[:, :, None] & torch.eye(L, dtype=torch.bool, device=doc.device))
    return mask[:, None]


def rotary(x: torch.Tensor, pos: torch.Tensor, base: float) -> torch.Tensor:
    """Rotate pairs of channels of ``x`` (B, H, L, hd) by position-dependent angles."""
    hd = x.shape[-1]
    half = hd // 2
    if half == 0:
        return x
    inv = base ** (-torch.arange(half, dtype=x.dtype, device=x.device) / half)
    ang = pos.to(x.dtype)[:, None, :, None] * inv
    cos, sin = ang.cos(), ang.sin()
    x1, x2 = x[..., :half], x[..., half : 2 * half]
    out = torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], dim=-1)
    if hd % 2:
        out = torch.cat([out, x[..., -1:]], dim=-1)
    return out


def attention(q, k, v, mask, scale=None):
    """Masked softmax attention. Fully masked rows produce zeros instead of NaN."""
    scale = scale if scale is not None else q.shape[-1] ** -0.5
    scores = (q @ k.transpose(-2, -1)) * scale
    scores = scores.masked_fill(~mask, float("-inf"))
    any_visible = mask.any(dim=-1, keepdim=True)
    scores = torch.where(any_visible, scores, torch.zeros_like(scores))
    probs = torch.softmax(scores, dim=-1) * any_visible
    return probs @ v, probs


class SelfAttention(nn.Module):
    def __init__(self, cfg: StackConfig):
        super().__init__()
        self.cfg = cfg
        hd = cfg.head_dim
        self.wq = nn.Linear(cfg.d, cfg.n_heads * hd, bias=False)
        self.wk = nn.Linear(cfg.d, cfg.kv_heads * hd, bias=False)
        self.wv = nn.Linear(cfg.d, cfg.kv_heads * hd, bias=False)
        self.wo = nn.Linear(cfg.n_heads * hd, cfg.d, bias=False)

    def forward(self, x, pos, mask, return_probs=False):
        B, L, _ = x.shape
        c = self.cfg
        hd = c.head_dim
        q = self.wq(x).view(B, L, c.n_heads, hd).transpose(1, 2)
        k = self.wk(x).view(B, L, c.kv_heads, hd).transpose(1, 2)
        v = self.wv(x).view(B, L, c.kv_heads, hd).transpose(1, 2)
        q, k = qk_rmsnorm(q, k)
        q, k = rotary(q, pos, c.rope_base), rotary(k, pos, c.rope_base)
        rep = c.n_heads // c.kv_heads
        if rep > 1:
            k = k.repeat_interleave(rep, dim=1)
            v = v.repeat_interleave(rep, dim=1)
        if return_probs:
            out, probs = attention(q, k, v, mask)
        else:
            out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
            probs = None
        out = out.transpose(1, 2).reshape(B, L, c.n_heads * hd)
        return self.wo(out), probs


class SwiGLU(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.w_gate = nn.Linear(d, hidden, bias=False)
        self.w_up = nn.Linear(d, hidden, bias=False)
        self.w_down = nn.Linear(hidden, d, bias=False)

    def forward(self, x):
        return self.w_down(F.silu(self.w_gate(x)) * self.w_up(x))


class Block(nn.Module):
    def __init__(self, cfg: StackConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.d)
        self.attn = SelfAttention(cfg)
        self.mlp_norm = RMSNorm(cfg.d)
        self.mlp = SwiGLU(cfg.d, cfg.hidden_mlp)

    def forward(self, x, pos, mask, return_probs=False):
        a, probs = self.attn(self.attn_norm(x), pos, mask, return_probs)
        x = x + a
        x = x + self.mlp(self.mlp_norm(x))
        return x, probs


class Stack(nn.Module):
    """``n_layers`` causal blocks followed by a final RMSNorm (skipped when empty)."""

    def __init__(self, cfg: StackConfig, final_norm: bool = True):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.norm = RMSNorm(cfg.d) if final_norm and cfg.n_layers else None

    def forward(self, x, doc, valid=None, return_probs=False, return_hidden=False):
        if x.shape[-1] != self.cfg.d:
            raise ShapeError("stack_forward", x.shape, (self.cfg.d,), detail="input width != stack width")
        pos = positions_from_docs(doc)
        mask = doc_causal_mask(doc, valid)
        probs, hidden = [], []
        for layer in self.layers:
            x, p = layer(x, pos, mask, return_probs)
            probs.append(p)
            hidden.append(x)
        if self.norm is not None:
            x = self.norm(x)
        if return_probs or return_hidden:
            return x, {"probs": probs, "hidden": hidden}
        return x


def stack_forward(stack: Stack, x: torch.Tensor, doc: torch.Tensor, valid: torch.Tensor | None = None):
    return stack(x, doc, valid)
