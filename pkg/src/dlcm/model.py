"""The dynamic concept language model and a token-level baseline."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn as nn

from .backbone import ConceptSeq, ConceptSmoother, backbone_forward
from .decoder import CrossAttention, decode_logits, irregular_cross_attention, replicated_cross_attention
from .numerics import DEFAULT_DTYPE, cross_entropy
from .segmenter import (
    BoundaryScores,
    LearnedBoundaryPredictor,
    SegmentMap,
    SegmenterConfig,
    boundary_scores,
    build_segment_map,
    pool_concepts,
    sharpen_and_sample,
    straight_through,
)
from .tokens import VOCAB_SIZE
from .transformer import RMSNorm, Stack, StackConfig, SwiGLU


def config_hash(cfg) -> str:
    blob = json.dumps(asdict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class DLCMConfig:
    vocab_size: int = VOCAB_SIZE
    d_token: int = 64
    d_concept: int = 128
    n_enc: int = 2
    n_backbone: int = 2
    n_dec: int = 2
    heads_token: int = 4
    kv_heads_token: int | None = None
    heads_concept: int = 4
    kv_heads_concept: int | None = None
    mlp_token: int | None = None
    mlp_concept: int | None = None
    cross_heads: int | None = None
    cross_mlp: int | None = None
    rope_base: float = 10000.0
    # segmentation
    d_scan: int | None = None
    temp_sharpen: float = 0.5
    threshold: float = 0.5
    target_R: float = 4.0
    boundary_mode: str = "rule_based"
    lambda_aux: float = 0.03
    # decoding
    causality: str = "paper_faithful"
    cross_path: str = "irregular"
    smooth_init_logit: float = 2.0
    # parametrization
    d_base: int = 64
    sigma_base: float = 0.02
    output_scaling: bool = True

    @property
    def s_token(self) -> float:
        return self.d_token / self.d_base

    @property
    def s_concept(self) -> float:
        return self.d_concept / self.d_base

    def encoder_cfg(self) -> StackConfig:
        return StackConfig(self.d_token, self.n_enc, self.heads_token, self.kv_heads_token, self.mlp_token, self.rope_base)

    def decoder_cfg(self) -> StackConfig:
        return StackConfig(self.d_token, self.n_dec, self.heads_token, self.kv_heads_token, self.mlp_token, self.rope_base)

    def backbone_cfg(self) -> StackConfig:
        return StackConfig(self.d_concept, self.n_backbone, self.heads_concept, self.kv_heads_concept,
                           self.mlp_concept, self.rope_base)

    def segmenter_cfg(self) -> SegmenterConfig:
        return SegmenterConfig(self.d_scan, self.temp_sharpen, self.threshold, self.target_R,
                               self.boundary_mode, self.lambda_aux)

    def replace(self, **kw) -> "DLCMConfig":
        d = asdict(self)
        d.update(kw)
        return DLCMConfig(**d)

    @classmethod
    def from_dict(cls, d: dict) -> "DLCMConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class ForwardOut:
    logits: torch.Tensor
    scores: BoundaryScores
    smap: SegmentMap
    hidden: dict = field(default_factory=dict)

    @property
    def p(self):
        return self.scores.p

    @property
    def b(self):
        return self.smap.b


class DLCM(nn.Module):
    """Encoder -> segmentation & pooling -> concept backbone -> smoothing -> cross-attention decoder."""

    def __init__(self, cfg: DLCMConfig, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        self.seg_cfg = cfg.segmenter_cfg()
        d, dc = cfg.d_token, cfg.d_concept
        d_scan = self.seg_cfg.scan_width(d)
        self.embed = nn.Embedding(cfg.vocab_size, d)
        self.encoder = Stack(cfg.encoder_cfg())
        if cfg.boundary_mode == "rule_based":
            self.W_q = nn.Linear(d, d_scan, bias=False)
            self.W_k = nn.Linear(d, d_scan, bias=False)
            self.predictor = None
        else:
            self.W_q = self.W_k = None
            self.predictor = LearnedBoundaryPredictor(d, d_scan)
        self.W_up = nn.Linear(d, dc, bias=False)
        self.backbone = Stack(cfg.backbone_cfg())
        self.smoother = ConceptSmoother(dc, cfg.smooth_init_logit)
        self.cross_attn = CrossAttention(d, dc, cfg.cross_heads or cfg.heads_token, causality=cfg.causality)
        self.cross_mlp_norm = RMSNorm(d)
        self.cross_mlp = SwiGLU(d, cfg.cross_mlp or 4 * d)
        self.decoder = Stack(cfg.decoder_cfg(), final_norm=False)
        self.final_norm = RMSNorm(d)
        self.unemb = nn.Parameter(torch.empty(cfg.vocab_size, d))
        nn.init.normal_(self.unemb, std=cfg.sigma_base)
        self.to(dtype)

    @property
    def logit_scale(self) -> float:
        return self.cfg.s_token if self.cfg.output_scaling else 1.0

    def encode(self, ids, doc, valid=None):
        return self.encoder(self.embed(ids), doc, valid)

    def score(self, H, doc) -> BoundaryScores:
        if self.predictor is not None:
            return self.predictor(H, doc)
        return boundary_scores(H, self.W_q.weight, self.W_k.weight, doc)

    def forward(self, ids, doc, valid=None, phase="train", generator=None, b=None, uniforms=None,
                causality=None, cross_path=None, keep_hidden=False) -> ForwardOut:
        """``b`` freezes the boundaries (gradient checks); otherwise they are sampled or thresholded."""
        H = self.encode(ids, doc, valid)
        scores = self.score(H, doc)
        if b is None:
            b = sharpen_and_sample(scores, self.seg_cfg, phase, generator, uniforms)
        else:
            b = torch.as_tensor(b, dtype=torch.bool) | scores.forced
            scores.b = b
        smap = build_segment_map(b, doc)
        C = pool_concepts(H, smap, self.W_up.weight)
        if self.predictor is not None:
            gate = torch.gather(straight_through(b, scores.p), 1, smap.concept_start)
            C = C * gate[..., None]
        concepts = ConceptSeq(C, smap.concept_doc, smap.concept_valid)
        Z = backbone_forward(self.backbone, concepts)
        Zs = self.smoother(Z)
        causality = causality or self.cfg.causality
        path = cross_path or self.cfg.cross_path
        if path == "irregular":
            x, _ = irregular_cross_attention(H, Zs.values, smap, doc, self.cross_attn, causality=causality)
        else:
            x, _ = replicated_cross_attention(H, Zs.values, smap, doc, self.cross_attn, causality=causality)
        x = x + self.cross_mlp(self.cross_mlp_norm(x))
        x = self.decoder(x, doc, valid)
        x = self.final_norm(x)
        logits = decode_logits(x, self.unemb, self.logit_scale)
        hidden = {"H": H, "C": C, "Z": Z.values, "Z_smooth": Zs.values, "out": x} if keep_hidden else {}
        return ForwardOut(logits, scores, smap, hidden)


@dataclass(frozen=True)
class BaselineConfig:
    vocab_size: int = VOCAB_SIZE
    d: int = 64
    n_layers: int = 6
    heads: int = 4
    kv_heads: int | None = None
    mlp: int | None = None
    rope_base: float = 10000.0
    d_base: int = 64
    sigma_base: float = 0.02
    output_scaling: bool = True

    @property
    def s_token(self) -> float:
        return self.d / self.d_base

    def replace(self, **kw) -> "BaselineConfig":
        d = asdict(self)
        d.update(kw)
        return BaselineConfig(**d)


class BaselineLM(nn.Module):
    """Token-uniform causal transformer used as the comparison model."""

    def __init__(self, cfg: BaselineConfig, dtype: torch.dtype = DEFAULT_DTYPE):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d)
        self.decoder = Stack(StackConfig(cfg.d, cfg.n_layers, cfg.heads, cfg.kv_heads, cfg.mlp, cfg.rope_base),
                             final_norm=False)
        self.final_norm = RMSNorm(cfg.d)
        self.unemb = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d))
        nn.init.normal_(self.unemb, std=cfg.sigma_base)
        self.to(dtype)

    @property
    def logit_scale(self) -> float:
        return self.cfg.s_token if self.cfg.output_scaling else 1.0

    def forward(self, ids, doc, valid=None, **_) -> torch.Tensor:
        x = self.decoder(self.embed(ids), doc, valid)
        return decode_logits(self.final_norm(x), self.unemb, self.logit_scale)


def token_ce(logits, targets, reduction="mean"):
    return cross_entropy(logits, targets, reduction)
