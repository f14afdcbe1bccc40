"""Segment held-out synthetic domains with a trained checkpoint and print tokens-per-concept."""

import argparse
from pathlib import Path

from dlcm.corpora import domain_corpora
from dlcm.experiments import segment_report, write_segment_report
from dlcm.training import load_checkpoint


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", required=True, help="checkpoint directory (e.g. runs/train_toy/final)")
    ap.add_argument("--docs", type=int, default=8)
    ap.add_argument("--out", default="runs/segment_report")
    args = ap.parse_args()
    model, _ = load_checkpoint(args.model)
    rows, dumps = segment_report({model.cfg.target_R: model.eval()}, domain_corpora(n_docs=args.docs), dump_docs=1)
    write_segment_report(rows, dumps, Path(args.out))
    for text in dumps.values():
        print(text[:400])
    for r in rows:
        print(f"{r['domain']:>16}: {r['mean_tokens_per_concept']:.3f} tokens/concept")


if __name__ == "__main__":
    main()
