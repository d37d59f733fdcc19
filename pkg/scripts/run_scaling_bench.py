#!/usr/bin/env python3
"""Time both token mixers across sequence lengths and fit log-log slopes.
Attention should scale roughly quadratically; the gated long-convolution
mixer should stay close to N log N."""

import argparse
from pathlib import Path

from hyenadistill.evalbench import scaling_bench
from hyenadistill.mixers import AttentionConfig, HyenaConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--n-heads", type=int, default=4)
    ap.add_argument("--lengths", type=int, nargs="+",
                    default=[1024, 2048, 4096, 8192, 16384])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", type=Path, default=Path("runs/bench.csv"))
    args = ap.parse_args()

    report = scaling_bench(
        [HyenaConfig(d_model=args.d_model, filter_embed_dim=5, filter_ffn_width=48),
         AttentionConfig(d_model=args.d_model, n_heads=args.n_heads)],
        args.lengths, repeats=args.repeats)

    for r in report.records:
        print(f"{r.mixer:10s} L={r.length:6d} median {r.median_s * 1e3:9.2f} ms "
              f"(min {r.min_s * 1e3:9.2f} ms)")
    for kind, slope in report.slopes.items():
        print(f"{kind}: fitted slope {slope:.3f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(report.to_csv())
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
