"""Refit the joint loss law and the decay law on synthetic data with known parameters."""

import argparse
import json
from pathlib import Path

import numpy as np

from dlcm.scaling import EXPONENTS, fit_decay_law, fit_full_law, generate_points, write_points_csv, write_prediction_grid

TRUTH = dict(E0=1.8, A_token=200.0, A_concept=40.0, A_data=300.0, t_token=1e5, t_concept=1e5, t_data=1e7,
             delta1=0.3, delta2=0.22, gamma=0.3, alpha_data=0.27)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--noise", type=float, default=0.005)
    ap.add_argument("--decay-noise", type=float, default=0.02)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/scaling_synthetic")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pts = generate_points(TRUTH, (1e6, 1e8, 1e10), (2, 4, 8), (0.3, 0.5, 0.7), np.geomspace(1e8, 1e12, 12),
                          noise=args.noise, seed=args.seed)
    write_points_csv(pts, out / "points.csv")
    fit = fit_full_law(pts)
    (out / "fit.json").write_text(fit.to_json())
    write_prediction_grid(fit, pts, out / "predictions.tsv")
    print(f"joint law: R2 {fit.r2:.4f}")
    for k in EXPONENTS:
        print(f"  {k:>10}: fitted {getattr(fit, k):.4f} true {TRUTH[k]:.4f}")

    rng = np.random.default_rng(args.seed)
    runs = []
    for _ in range(24):
        L, R, N = rng.uniform(2, 4), rng.choice([2, 4, 8]), 10 ** rng.uniform(7, 10)
        runs.append((L, R, N, 0.05 * L**0.5 * R**-0.1 * N**0.08 * (1 + args.decay_noise * rng.standard_normal())))
    d = fit_decay_law(runs)
    print(f"decay law: R2 {d.r2:.3f}  k={d.k:.4f} a={d.a:.3f} b={d.b:.3f} c={d.c:.3f} (true 0.05, 0.5, -0.1, 0.08)")
    (out / "decay_fit.json").write_text(json.dumps(d.__dict__, indent=2))


if __name__ == "__main__":
    main()
