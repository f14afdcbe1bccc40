"""Time the dense-masked and replicated cross-attention paths on one worker."""

import argparse
from pathlib import Path

from dlcm.bench import bench_cross_attention, check_paths_agree, write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seq-lens", default="512,1024,2048")
    ap.add_argument("--hiddens", default="256")
    ap.add_argument("--reps", type=int, default=7)
    ap.add_argument("--out", default="runs/bench_attn")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    print(f"path agreement (fp32): max |diff| {check_paths_agree():.2e}")
    rows = bench_cross_attention(tuple(int(x) for x in args.seq_lens.split(",")),
                                 tuple(int(x) for x in args.hiddens.split(",")), reps=args.reps)
    write_csv(rows, out / "bench_attn.csv")
    for r in rows:
        print(f"L={r['seq_len']:>5} d={r['hidden']:>4} {r['path']:>17}: {r['median_ms']:9.2f} ms "
              f"speedup {r['speedup_vs_dense']:.2f}x")


if __name__ == "__main__":
    main()
