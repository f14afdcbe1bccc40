from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from dlcm.model import DLCM, DLCMConfig
from dlcm.numerics import cross_entropy
from dlcm.segmenter import (
    ConfigError,
    SegmentationError,
    SegmenterConfig,
    ShardStats,
    accumulate_global_stats,
    aux_grad_coefficient,
    aux_loss,
    boundary_scores,
    build_segment_map,
    exact_sum,
    pool_concepts,
    segments_as_text,
    sharpen,
    sharpen_and_sample,
    straight_through,
)
from dlcm.tokens import tokenize


def _scores_for(q_prev, k_cur):
    """Two-token sequence where W_q/W_k are identity and H rows are chosen so q_0 and k_1 are given."""
    d = len(q_prev)
    H = torch.tensor([q_prev, k_cur], dtype=torch.float64)[None]
    eye = torch.eye(d, dtype=torch.float64)
    return boundary_scores(H, eye, eye, torch.zeros(1, 2, dtype=torch.long)).p[0, 1].item()


def test_boundary_probability_closed_forms():
    assert _scores_for([1.0, 2.0], [1.0, 2.0]) == pytest.approx(0.0, abs=1e-15)
    assert _scores_for([1.0, 2.0], [-1.0, -2.0]) == pytest.approx(1.0, abs=1e-15)
    assert _scores_for([1.0, 0.0], [0.0, 3.0]) == 0.5


def test_zero_norm_key_gives_half_and_warns():
    with pytest.warns(RuntimeWarning):
        H = torch.tensor([[[1.0, 0.0], [0.0, 0.0]]], dtype=torch.float64)
        s = boundary_scores(H, torch.eye(2, dtype=torch.float64), torch.eye(2, dtype=torch.float64),
                            torch.zeros(1, 2, dtype=torch.long))
    assert s.p[0, 1] == 0.5 and bool(s.degenerate[0, 1])


def test_document_starts_are_forced():
    g = torch.Generator().manual_seed(0)
    H = torch.randn(1, 6, 4, generator=g, dtype=torch.float64)
    doc = torch.tensor([[0, 0, 0, 1, 1, 1]])
    s = boundary_scores(H, torch.randn(3, 4, generator=g, dtype=torch.float64),
                        torch.randn(3, 4, generator=g, dtype=torch.float64), doc)
    assert s.p[0, 0] == 1 and s.p[0, 3] == 1
    assert s.forced[0].tolist() == [True, False, False, True, False, False]


def test_sharpen_closed_forms():
    p = torch.tensor([0.8, 0.5, 0.3], dtype=torch.float64)
    assert torch.allclose(sharpen(p, 1.0), p, rtol=0, atol=1e-15)
    assert sharpen(p, 0.5)[0].item() == pytest.approx(16 / 17, abs=1e-15)
    assert sharpen(p, 0.2)[1].item() == 0.5
    with pytest.raises(ConfigError):
        sharpen(p, 0.0)


def test_config_invariants():
    with pytest.raises(ConfigError):
        SegmenterConfig(target_R=1.0)
    with pytest.raises(ConfigError):
        SegmenterConfig(threshold=1.0)


def test_inference_thresholds_and_keeps_forced_bits():
    class S:  # minimal stand-in for BoundaryScores
        p = torch.tensor([[1.0, 0.49, 0.5, 0.7]], dtype=torch.float64)
        forced = torch.tensor([[True, False, False, False]])

    b = sharpen_and_sample(S, SegmenterConfig(), "infer")
    assert b[0].tolist() == [True, False, True, True]


def test_segment_map_examples():
    m = build_segment_map(torch.tensor([1, 0, 0, 1, 0]), torch.zeros(5, dtype=torch.long))
    assert m.lengths[0].tolist() == [3, 2]
    assert m.j[0].tolist() == [1, 1, 1, 2, 2]
    assert m.seg_start[0].tolist() == [0, 0, 0, 3, 3]
    assert m.seg_end[0].tolist() == [2, 2, 2, 4, 4]
    m = build_segment_map(torch.tensor([1, 1, 1]), torch.zeros(3, dtype=torch.long))
    assert m.lengths[0].tolist() == [1, 1, 1]


def test_segment_map_errors():
    with pytest.raises(SegmentationError):
        build_segment_map(torch.tensor([0, 1]), torch.zeros(2, dtype=torch.long))
    with pytest.raises(SegmentationError):
        build_segment_map(torch.tensor([1, 0, 0]), torch.tensor([0, 0, 1]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=4), st.data())
def test_segments_respect_documents(doc_lens, data):
    doc = torch.tensor(sum(([i] * n for i, n in enumerate(doc_lens)), []))
    L = len(doc)
    bits = data.draw(st.lists(st.booleans(), min_size=L, max_size=L))
    b = torch.tensor(bits) | torch.cat([torch.tensor([True]), doc[1:] != doc[:-1]])
    m = build_segment_map(b, doc)
    # brute-force scan oracle
    j, cur = [], 0
    for t in range(L):
        cur += int(b[t])
        j.append(cur)
    assert m.j[0].tolist() == j
    assert int(m.lengths.sum()) == L and bool((m.lengths[0][: m.n_concepts[0]] >= 1).all())
    for t in range(L):
        assert doc[m.seg_start[0, t]] == doc[t] == doc[m.seg_end[0, t]]
    assert m.j[0, -1] == int(b.sum())


def test_pooling_examples():
    H = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]], dtype=torch.float64)
    m = build_segment_map(torch.tensor([1, 0]), torch.zeros(2, dtype=torch.long))
    assert pool_concepts(H, m, torch.eye(2, dtype=torch.float64))[0, 0].tolist() == [0.5, 0.5]
    v = torch.tensor([2.0, -1.0], dtype=torch.float64)
    W = torch.tensor([[1.0, 2.0], [3.0, 4.0], [0.5, 0.0]], dtype=torch.float64)
    out = pool_concepts(v.expand(1, 4, 2), build_segment_map(torch.tensor([1, 0, 0, 0]), torch.zeros(4, dtype=torch.long)), W)
    assert torch.allclose(out[0, 0], W @ v, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_pooling_equals_dense_indicator_matrix(seed):
    g = torch.Generator().manual_seed(seed)
    B, L, d, dc = 2, 12, 3, 5
    b = torch.rand(B, L, generator=g) < 0.4
    b[:, 0] = True
    H = torch.randn(B, L, d, generator=g, dtype=torch.float64)
    W = torch.randn(dc, d, generator=g, dtype=torch.float64)
    m = build_segment_map(b, torch.zeros(B, L, dtype=torch.long))
    out = pool_concepts(H, m, W)
    for i in range(B):
        M = int(m.n_concepts[i])
        P = torch.zeros(M, L, dtype=torch.float64)
        P[m.seg_id[i], torch.arange(L)] = 1.0
        P = P / P.sum(1, keepdim=True)
        assert torch.allclose(out[i, :M], P @ H[i] @ W.T, atol=1e-13)
        assert bool((out[i, M:] == 0).all())


def test_global_stats_weighted_mean():
    s1 = ShardStats(100, Fraction(20), 10)
    s2 = ShardStats(300, Fraction(90), 30)
    assert accumulate_global_stats([s1, s2]).G == 0.275
    assert accumulate_global_stats([s1]).G == 0.2
    with pytest.raises(ValueError):
        accumulate_global_stats([])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 6))
def test_shard_accumulation_is_bit_identical_to_concatenation(seed, K):
    g = torch.Generator().manual_seed(seed)
    p = torch.rand(K * 3, 17, generator=g, dtype=torch.float64)
    b = torch.rand(K * 3, 17, generator=g) < 0.3
    valid = torch.rand(K * 3, 17, generator=g) < 0.9
    whole = accumulate_global_stats([ShardStats.from_tensors(p, b, valid)])
    parts = accumulate_global_stats([ShardStats.from_tensors(p[i::K], b[i::K], valid[i::K]) for i in range(K)])
    assert whole.G == parts.G and whole.F == parts.F


def test_exact_sum_is_exact():
    vals = [1e16, 1.0, -1e16, 0.1]
    assert exact_sum(vals) == Fraction(1) + Fraction(0.1)


def test_aux_loss_closed_forms():
    assert aux_loss(1.0, 1.0, 4) == pytest.approx(3.0, abs=1e-15)
    assert aux_loss(0.0, 0.0, 4) == pytest.approx(1 / 3, abs=1e-15)
    for R in (2, 4, 8):
        assert aux_loss(1 / R, 1 / R, R) == 0.0


def test_aux_gradient_depends_on_F_only():
    G = torch.tensor(0.3, dtype=torch.float64, requires_grad=True)
    aux_loss(G, 0.2, 4.0).backward()
    assert G.grad.item() == pytest.approx(aux_grad_coefficient(0.2, 4.0), abs=1e-15)


def test_straight_through_forward_is_bits_backward_is_identity():
    p = torch.tensor([0.3, 0.9], dtype=torch.float64, requires_grad=True)
    b = torch.tensor([False, True])
    out = straight_through(b, p)
    assert out.tolist() == [0.0, 1.0]
    out.sum().backward()
    assert p.grad.tolist() == [1.0, 1.0]


def test_segments_as_text_format():
    ids = tokenize("So I've been")
    b = [True] + [False] * 4 + [True] + [False] * 7
    assert segments_as_text(ids, b[: len(ids)]) == "So I | 've been"


def _tiny(mode="rule_based"):
    cfg = DLCMConfig(d_token=16, d_concept=32, n_enc=1, n_backbone=1, n_dec=1, heads_token=2, heads_concept=2,
                     d_base=16, boundary_mode=mode)
    torch.manual_seed(0)
    return DLCM(cfg)


def test_rule_based_scorer_gets_no_ce_gradient():
    model = _tiny()
    ids = torch.randint(0, 257, (2, 24))
    doc = torch.zeros_like(ids)
    out = model(ids, doc, phase="train", generator=torch.Generator().manual_seed(0))
    cross_entropy(out.logits, torch.randint(0, 257, (2, 24))).backward()
    for w in (model.W_q.weight, model.W_k.weight):
        assert w.grad is None or bool((w.grad == 0).all())


def test_learned_predictor_starts_at_half():
    model = _tiny("learned_mlp")
    ids = torch.randint(0, 257, (1, 10))
    s = model.score(model.encode(ids, torch.zeros_like(ids)), torch.zeros_like(ids))
    assert bool((s.p[0, 1:] == 0.5).all())


def test_straight_through_matches_relaxed_surrogate(monkeypatch):
    """STE gradient == finite differences of the surrogate gate b + (p - p0), p0 frozen at the base point."""
    import dlcm.model as model_mod

    model = _tiny("learned_mlp")
    with torch.no_grad():
        model.predictor.fc2.weight.normal_(0, 0.5, generator=torch.Generator().manual_seed(3))
    ids = torch.randint(0, 257, (1, 12), generator=torch.Generator().manual_seed(1))
    doc = torch.zeros_like(ids)
    tgt = torch.randint(0, 257, (1, 12), generator=torch.Generator().manual_seed(2))
    b = torch.tensor([[1, 0, 0, 1, 0, 1, 0, 0, 0, 1, 0, 0]], dtype=torch.bool)
    W = model.predictor.fc2.weight

    loss = cross_entropy(model(ids, doc, phase="train", b=b).logits, tgt)
    (ste,) = torch.autograd.grad(loss, [W])

    p0 = model.score(model.encode(ids, doc), doc).p.detach()
    monkeypatch.setattr(model_mod, "straight_through", lambda bits, p: bits.to(p.dtype) + (p - p0))
    eps = 1e-6
    fd = torch.zeros_like(W)
    with torch.no_grad():
        for i in range(W.numel()):
            orig = W.view(-1)[i].item()
            W.view(-1)[i] = orig + eps
            up = cross_entropy(model(ids, doc, phase="train", b=b).logits, tgt).item()
            W.view(-1)[i] = orig - eps
            down = cross_entropy(model(ids, doc, phase="train", b=b).logits, tgt).item()
            W.view(-1)[i] = orig
            fd.view(-1)[i] = (up - down) / (2 * eps)
    assert float(ste.abs().max()) > 1e-6
    assert torch.allclose(ste, fd, rtol=1e-5, atol=1e-9)
