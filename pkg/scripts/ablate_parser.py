"""Global vs per-sequence compression regularisation on a mixed-density corpus (identical seeds)."""

import argparse
from pathlib import Path

from dlcm.corpora import mixed_density_corpus
from dlcm.experiments import parser_ablation, write_table
from dlcm.model import DLCMConfig
from dlcm.training import TrainConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--tokens", type=int, default=2_000_000)
    ap.add_argument("--target-r", type=float, default=4.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/ablate_parser")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = TrainConfig(model=DLCMConfig(target_R=args.target_r), total_tokens=args.tokens, seed=args.seed)
    rows = parser_ablation(cfg, mixed_density_corpus(args.tokens, seed=args.seed), log_dir=out)
    write_table(rows, out / "parser_ablation.tsv")
    for r in rows:
        print(f"{r['parser']:>7}: realized R {r['realized_R']:.3f} (|err| {r['abs_error']:.3f}), "
              f"eval CE {r['eval_loss']:.4f}, reference {r['reference_realized']}")


if __name__ == "__main__":
    main()
