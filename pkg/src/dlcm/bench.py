"""Wall-clock comparison of the two cross-attention paths (32-bit, one worker)."""

from __future__ import annotations

import csv
import statistics
import time
from contextlib import contextmanager

import torch

from .decoder import CrossAttention, concept_mask, irregular_cross_attention, replicated_cross_attention
from .segmenter import build_segment_map
from .transformer import attention

PATHS = ("irregular_dense", "replicated_causal")

# (seq_len, hidden) -> speedup of the fused varlen kernel over the masked one, reference GPU numbers
REFERENCE_SPEEDUPS = {
    (2048, 1024): 1.44, (2048, 2048): 1.48, (2048, 4096): 1.44,
    (4096, 1024): 1.32, (4096, 2048): 1.34, (4096, 4096): 1.45,
    (8192, 1024): 1.27, (8192, 2048): 1.26, (8192, 4096): 1.47,
    (16384, 1024): 1.69, (16384, 2048): 1.73, (16384, 4096): 1.66,
}


@contextmanager
def one_worker():
    prev = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        yield
    finally:
        torch.set_num_threads(prev)


def make_instance(L: int, d: int, interval: int = 6, heads: int | None = None, seed: int = 0):
    """Single document, boundaries every ``interval`` tokens, random 32-bit activations."""
    g = torch.Generator().manual_seed(seed)
    heads = heads or max(1, d // 64)
    b = torch.zeros(1, L, dtype=torch.bool)
    b[0, ::interval] = True
    doc = torch.zeros(1, L, dtype=torch.long)
    smap = build_segment_map(b, doc)
    H = torch.randn(1, L, d, generator=g)
    Z = torch.randn(1, smap.M_max, d, generator=g)
    torch.manual_seed(seed)
    params = CrossAttention(d, d, heads).float()
    return H, Z, smap, doc, params


def irregular_dense(H, Z, smap, doc, params):
    """Rebuild the (L x M) mask from segment ids every call and run an explicit masked softmax."""
    q, k, v = params.project(H, Z)
    mask = concept_mask(smap, doc, params.causality)[:, None]
    attn, _ = attention(q, k, v, mask, params.d_head ** -0.5)
    return params.output(attn, H)


def replicated_causal(H, Z, smap, doc, params):
    return replicated_cross_attention(H, Z, smap, doc, params, fused=True)[0]


_FUNCS = {"irregular_dense": irregular_dense, "replicated_causal": replicated_causal}


def time_call(fn, *args, reps: int = 5, warmup: int = 2) -> float:
    with torch.no_grad():
        for _ in range(warmup):
            fn(*args)
        times = []
        for _ in range(reps):
            t0 = time.perf_counter()
            fn(*args)
            times.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(times)


def bench_cross_attention(seq_lens=(512, 1024, 2048), hiddens=(256,), paths=PATHS, reps: int = 5,
                          interval: int = 6, seed: int = 0) -> list[dict]:
    """Median milliseconds per path; ``speedup_vs_dense`` = irregular_dense / path."""
    rows = []
    with one_worker():
        for L in seq_lens:
            for d in hiddens:
                inst = make_instance(L, d, interval, seed=seed)
                ms = {p: time_call(_FUNCS[p], *inst, reps=reps) for p in paths}
                base = ms.get("irregular_dense")
                for p in paths:
                    rows.append({"seq_len": L, "hidden": d, "path": p, "median_ms": round(ms[p], 4),
                                 "speedup_vs_dense": round(base / ms[p], 4) if base else None})
    return rows


def write_csv(rows, path, annotate: bool = True) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["seq_len", "hidden", "path", "median_ms", "speedup_vs_dense"])
        w.writeheader()
        w.writerows(rows)
        if annotate:
            f.write("# reference GPU speedups (fused varlen vs masked kernel), not reproduced here:\n")
            for (L, d), s in sorted(REFERENCE_SPEEDUPS.items()):
                f.write(f"# {L},{d},reference,,{s}\n")


def check_paths_agree(L: int = 64, d: int = 64, interval: int = 6, seed: int = 0) -> float:
    """Max |difference| between the fused replicated path and the irregular path with ln-multiplicity offsets."""
    from .decoder import log_multiplicity_offset

    H, Z, smap, doc, params = make_instance(L, d, interval, seed=seed)
    with torch.no_grad():
        a = replicated_causal(H, Z, smap, doc, params)
        off = log_multiplicity_offset(smap, params.causality, dtype=H.dtype)
        b, _ = irregular_cross_attention(H, Z, smap, doc, params, logit_offset=off)
    return float((a - b).abs().max())
