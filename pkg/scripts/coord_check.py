"""Width sweep of activation and logit RMS with and without the 1/s_token output multiplier."""

import argparse
import json
from pathlib import Path

from dlcm.mup import coordinate_check


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--widths", default="64,128,256,512")
    ap.add_argument("--d-base", type=int, default=64)
    ap.add_argument("--out", default="runs/coord_check")
    args = ap.parse_args()
    widths = [int(w) for w in args.widths.split(",")]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for scaled in (True, False):
        rep = coordinate_check(widths, args.d_base, output_scaling=scaled)
        name = "scaled" if scaled else "unscaled"
        (out / f"{name}.json").write_text(json.dumps(rep, indent=2))
        logits = {w: round(rep["per_width"][w]["init"]["logits"], 4) for w in widths}
        print(f"{name:>8}: init logit RMS {logits} ratio {rep['init_logit_ratio']:.3f}")


if __name__ == "__main__":
    main()
