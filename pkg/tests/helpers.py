"""Shared fixtures and oracles for the test suite."""

from __future__ import annotations

import torch

from dlcm.decoder import CrossAttention, irregular_cross_attention, log_multiplicity_offset, replicated_cross_attention
from dlcm.model import DLCM, DLCMConfig
from dlcm.segmenter import build_segment_map

# Logit moves below this are float64 rounding from reshaped reductions, not information flow.
MOVED_TOL = 1e-12


def _moved(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return ((a - b).abs() > MOVED_TOL * (1.0 + b.abs())).any(-1)


def random_cross_instance(seed: int, max_L: int = 64, d: int = 16, dc: int = 24, heads: int = 2,
                          causality: str = "paper_faithful"):
    """Random packed batch, random segmentation and random cross-attention weights (float64)."""
    g = torch.Generator().manual_seed(seed)
    B = int(torch.randint(1, 3, (1,), generator=g))
    L = int(torch.randint(2, max_L + 1, (1,), generator=g))
    n_docs = int(torch.randint(1, 4, (1,), generator=g))
    cuts = sorted(set(torch.randint(1, L, (n_docs - 1,), generator=g).tolist())) if L > 1 else []
    doc = torch.zeros(L, dtype=torch.long)
    for c in cuts:
        doc[c:] += 1
    doc = doc.expand(B, L).clone()
    rate = float(torch.rand(1, generator=g)) * 0.8 + 0.05
    b = torch.rand(B, L, generator=g) < rate
    b[:, 0] = True
    b[:, 1:] |= doc[:, 1:] != doc[:, :-1]
    smap = build_segment_map(b, doc)
    H = torch.randn(B, L, d, generator=g, dtype=torch.float64)
    Z = torch.randn(B, smap.M_max, dc, generator=g, dtype=torch.float64)
    torch.manual_seed(seed)
    params = CrossAttention(d, dc, heads, causality=causality).double()
    with torch.no_grad():
        for p in params.parameters():
            if p.dim() >= 2:
                p.normal_(0, 0.5, generator=g)
    return H, Z, smap, doc, params


def path_gap(seed: int, causality: str) -> float:
    """max |replicated - (irregular + ln multiplicity offset)| for one random instance."""
    H, Z, smap, doc, params = random_cross_instance(seed, causality=causality)
    with torch.no_grad():
        rep, _ = replicated_cross_attention(H, Z, smap, doc, params)
        irr, _ = irregular_cross_attention(H, Z, smap, doc, params,
                                           logit_offset=log_multiplicity_offset(smap, causality))
    return float((rep - irr).abs().max())


def tiny_dlcm(causality="paper_faithful", seed=0, **kw) -> DLCM:
    cfg = DLCMConfig(d_token=16, d_concept=32, n_enc=1, n_backbone=1, n_dec=1, heads_token=2, heads_concept=2,
                     d_base=16, causality=causality, **kw)
    torch.manual_seed(seed)
    model = DLCM(cfg)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for n, p in model.named_parameters():
            if p.dim() >= 2:
                p.normal_(0, 0.3, generator=g)
    return model.eval()


def strict_causality_violations(model: DLCM, seed: int, L: int = 20) -> int:
    """Perturb each token s; count positions t < s whose logits moved (boundaries recomputed)."""
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(0, 257, (1, L), generator=g)
    doc = torch.zeros_like(ids)
    uniforms = torch.rand(1, L, generator=g, dtype=torch.float64)
    with torch.no_grad():
        base = model(ids, doc, phase="train", uniforms=uniforms).logits
        bad = 0
        for s in range(1, L):
            pert = ids.clone()
            pert[0, s] = (pert[0, s] + 1 + int(torch.randint(0, 255, (1,), generator=g))) % 256
            out = model(pert, doc, phase="train", uniforms=uniforms).logits
            bad += int(_moved(out[0, :s], base[0, :s]).sum())
    return bad


def own_segment_horizon_report(model: DLCM, seed: int, L: int = 20):
    """With frozen boundaries: (#leaks beyond seg_end, #positions, #positions that do see their own segment's future).

    For every t: perturbing any token after seg_end(t) must leave logits[t] unchanged; perturbing the
    token at seg_end(t) (when seg_end(t) > t) is expected to change them.
    """
    g = torch.Generator().manual_seed(seed)
    ids = torch.randint(0, 257, (1, L), generator=g)
    doc = torch.zeros_like(ids)
    b = torch.rand(1, L, generator=g) < 0.3
    b[0, 0] = True
    smap = build_segment_map(b, doc)
    end = smap.seg_end[0]
    with torch.no_grad():
        base = model(ids, doc, phase="train", b=b).logits[0]
        outs = {}
        for s in range(L):
            pert = ids.clone()
            pert[0, s] = (pert[0, s] + 1 + int(torch.randint(0, 255, (1,), generator=g))) % 256
            outs[s] = model(pert, doc, phase="train", b=b).logits[0]
    leaks = lookahead = candidates = 0
    for t in range(L):
        for s in range(int(end[t]) + 1, L):
            leaks += int(_moved(outs[s][t], base[t]))
        if int(end[t]) > t:
            candidates += 1
            lookahead += int(_moved(outs[int(end[t])][t], base[t]))
    return leaks, candidates, lookahead


def shard_equivalence(seed: int, K: int = 3, per_shard: int = 2, L: int = 24, parser: str = "global"):
    """Accumulate over K micro-batches and over their concatenation with identical boundaries.

    Returns (stats_equal, loss_equal, max relative gradient gap).
    """
    from dlcm.corpora import mixed_density_corpus
    from dlcm.tokens import pack_batches
    from dlcm.training import MicroBatch, accumulate_gradients

    model = tiny_dlcm(seed=seed, lambda_aux=0.5)
    model.train()
    windows = list(pack_batches(mixed_density_corpus(K * per_shard * L * 2, doc_len=40, seed=seed), L, seed=seed))
    windows = windows[: K * per_shard]
    g = torch.Generator().manual_seed(seed)
    b_all = torch.rand(K * per_shard, L, generator=g) < 0.3
    shards = [MicroBatch.from_windows(windows[i * per_shard : (i + 1) * per_shard]) for i in range(K)]
    whole = [MicroBatch.from_windows(windows)]

    def run(mbs, frozen):
        model.zero_grad(set_to_none=True)
        res = accumulate_gradients(model, mbs, R=4.0, lam=0.5, parser=parser, frozen_b=frozen)
        grads = {n: p.grad.detach().clone() for n, p in model.named_parameters() if p.grad is not None}
        return res, grads

    r1, g1 = run(shards, [b_all[i * per_shard : (i + 1) * per_shard] for i in range(K)])
    r2, g2 = run(whole, [b_all])
    stats_equal = r1.stats == r2.stats and (r1.stats.G, r1.stats.F) == (r2.stats.G, r2.stats.F)
    gap = max(float((g1[n] - g2[n]).abs().max() / g2[n].abs().max().clamp_min(1e-300)) for n in g2)
    return stats_equal, (r1.loss == r2.loss and r1.loss_ce == r2.loss_ce and r1.loss_aux == r2.loss_aux), gap


# Synthetic scaling-law design: wide N and D spans keep every exponent identifiable at 0.5% noise.
SCALING_TRUTH = dict(E0=1.8, A_token=200.0, A_concept=40.0, A_data=300.0, t_token=1e5, t_concept=1e5, t_data=1e7,
                     delta1=0.3, delta2=0.22, gamma=0.3, alpha_data=0.27)
SCALING_GRID = dict(Ns=(1e6, 1e8, 1e10), Rs=(2, 4, 8), Ps=(0.3, 0.5, 0.7))


def scaling_Ds():
    import numpy as np

    return np.geomspace(1e8, 1e12, 12)
