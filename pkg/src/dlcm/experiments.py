"""Segmentation reports and paired ablation runs built on the training harness."""

from __future__ import annotations

import csv
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from .model import DLCM
from .segmenter import segments_as_text
from .tokens import pack_batches, tokenize
from .training import TrainConfig, evaluate, train

REFERENCE_TOKENS_PER_CONCEPT = {("casual_english", 4): 3.53}
# Global vs per-sequence parser at target 4 (reference scale)
REFERENCE_REALIZED = {"global": 3.92, "normal": 3.15}


@torch.no_grad()
def segment_document(model: DLCM, text: bytes | str) -> tuple[list[int], list[bool]]:
    """Inference-time boundaries for one document (BOD included)."""
    ids = tokenize(text)
    t = torch.tensor([ids])
    doc = torch.zeros_like(t)
    out = model(t, doc, torch.ones_like(t, dtype=torch.bool), phase="infer")
    return ids, out.b[0].tolist()


def segment_report(models: Mapping[float, DLCM], corpora: Mapping[str, Sequence], dump_docs: int = 1):
    """Mean tokens per concept per (domain, target) plus " | " dumps of the first documents."""
    rows, dumps = [], {}
    for R, model in sorted(models.items()):
        for domain, docs in corpora.items():
            n_tok = n_seg = 0
            for i, d in enumerate(docs):
                ids, b = segment_document(model, d)
                n_tok += len(ids)
                n_seg += sum(b)
                if i < dump_docs:
                    dumps[(domain, R, i)] = segments_as_text(ids, b)
            rows.append({"domain": domain, "target_R": R, "mean_tokens_per_concept": n_tok / n_seg})
    return rows, dumps


def write_segment_report(rows, dumps, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "segment_report.tsv", "w") as f:
        f.write("domain\ttarget_R\tmean_tokens_per_concept\n")
        for r in rows:
            f.write(f"{r['domain']}\t{r['target_R']:g}\t{r['mean_tokens_per_concept']:.4f}\n")
        for (dom, R), v in REFERENCE_TOKENS_PER_CONCEPT.items():
            f.write(f"# reference\t{dom}\t{R}\t{v}\n")
    with open(out / "segments.txt", "w") as f:
        for (dom, R, i), text in sorted(dumps.items()):
            f.write(f"## {dom} target={R:g} doc={i}\n{text}\n\n")


def parser_ablation(cfg: TrainConfig, corpus, eval_corpus=None, log_dir=None) -> list[dict]:
    """Train the Global and Normal parser arms from identical seeds and compare realized ratios."""
    eval_windows = list(pack_batches(eval_corpus or corpus, cfg.seq_len, seed=None))[:32]
    rows = []
    for arm in ("global", "normal"):
        arm_cfg = replace(cfg, parser=arm)
        log_path = Path(log_dir) / f"{arm}.jsonl" if log_dir else None
        model, traj = train(arm_cfg, corpus, log_path=log_path)
        tail = traj[-max(1, len(traj) // 20):]
        realized = float(np.mean([e["realized_R"] for e in tail]))
        ev = evaluate(model, eval_windows)
        rows.append({
            "parser": arm,
            "target_R": cfg.model.target_R,
            "realized_R": realized,
            "abs_error": abs(realized - cfg.model.target_R),
            "eval_loss": ev["loss_ce"],
            "infer_tokens_per_concept": ev["tokens_per_concept"],
            "reference_realized": REFERENCE_REALIZED[arm],
        })
    return rows


def boundary_ablation(cfg: TrainConfig, corpus, log_dir=None) -> list[dict]:
    """Rule-based boundaries vs the learned predictor: realized concept length over training."""
    rows = []
    for mode in ("rule_based", "learned_mlp"):
        arm_cfg = replace(cfg, model=cfg.model.replace(boundary_mode=mode))
        log_path = Path(log_dir) / f"{mode}.jsonl" if log_dir else None
        _, traj = train(arm_cfg, corpus, log_path=log_path)
        for e in traj:
            rows.append({"mode": mode, "step": e["step"], "realized_R": e["realized_R"], "loss_ce": e["loss_ce"]})
    return rows


def write_table(rows: Sequence[dict], path, delimiter: str = "\t") -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), delimiter=delimiter)
        w.writeheader()
        w.writerows(rows)
