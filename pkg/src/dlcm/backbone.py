"""Concept-level reasoning stack and causal concept smoothing."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .transformer import Stack


@dataclass
class ConceptSeq:
    values: torch.Tensor  # (B, M_max, d_concept)
    doc: torch.Tensor  # (B, M_max) source document per concept
    valid: torch.Tensor  # (B, M_max)

    @property
    def M(self) -> torch.Tensor:
        return self.valid.sum(dim=1)


def backbone_forward(stack: Stack, C: ConceptSeq) -> ConceptSeq:
    """Causal transformer over the concept sequence; positions restart per document."""
    Z = stack(C.values, C.doc, C.valid)
    return ConceptSeq(Z, C.doc, C.valid)


def smooth_concepts(Z: torch.Tensor, beta: torch.Tensor, doc: torch.Tensor | None = None) -> torch.Tensor:
    """Causal EMA over concepts: z~_k = beta*z_k + (1-beta)*z~_{k-1}, z~ reset at document starts.

    ``Z`` is (B, M, d) or (M, d); ``beta`` broadcasts over channels.
    """
    squeeze = Z.dim() == 2
    if squeeze:
        Z = Z[None]
        doc = None if doc is None else doc[None]
    B, M, _ = Z.shape
    if M == 0:
        raise ValueError("smoothing needs at least one concept")
    if doc is None:
        doc = torch.zeros(B, M, dtype=torch.long)
    restart = torch.ones(B, M, 1, dtype=torch.bool)
    restart[:, 1:, 0] = doc[:, 1:] != doc[:, :-1]
    out = [Z[:, 0]]
    for k in range(1, M):
        blended = beta * Z[:, k] + (1 - beta) * out[-1]
        out.append(torch.where(restart[:, k], Z[:, k], blended))
    res = torch.stack(out, dim=1)
    return res[0] if squeeze else res


class ConceptSmoother(nn.Module):
    """Learnable per-channel gate ``beta = sigmoid(gate_logit)`` for :func:`smooth_concepts`."""

    def __init__(self, d: int, init_logit: float = 2.0):
        super().__init__()
        self.gate_logit = nn.Parameter(torch.full((d,), float(init_logit)))

    @property
    def beta(self) -> torch.Tensor:
        return torch.sigmoid(self.gate_logit)

    def forward(self, C: ConceptSeq) -> ConceptSeq:
        return ConceptSeq(smooth_concepts(C.values, self.beta, C.doc), C.doc, C.valid)
