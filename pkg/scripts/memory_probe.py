"""Delayed-recall accuracy of small leaky LSTMs as a function of delay / lifetime.

    python scripts/memory_probe.py --variant blue_cut --tau 10 --delays 0 1 2 5 10 20 50
"""
import argparse
import math

from leakylstm import recurrent as rec
from leakylstm.evaluation import ProbeConfig, memory_probe, write_rows_csv


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--variant", default="blue_cut", choices=["basic", "red_cut", "blue_cut"])
    p.add_argument("--tau", type=float, default=10.0, help="lifetime in frames (0 = memoryless, inf = no leak)")
    p.add_argument("--delays", nargs="+", type=int, default=[0, 1, 2, 5, 10, 20, 50])
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--steps", type=int, default=ProbeConfig.steps)
    p.add_argument("--out", help="optional CSV output path")
    args = p.parse_args()

    a = rec.lifetime_to_leak(args.tau, 1.0)
    cfg = ProbeConfig(steps=args.steps)
    rows = []
    for seed in args.seeds:
        rows += memory_probe(args.variant, a, args.delays, seed, cfg)
    print(f"{args.variant}, a={a:.4f} (tau={args.tau} frames)")
    for d in args.delays:
        accs = [r["accuracy"] for r in rows if r["delay"] == d]
        ps = [r["chance_p_value"] for r in rows if r["delay"] == d]
        ratio = d / args.tau if args.tau > 0 else (math.inf if d else 0.0)
        print(f"  delay {d:>3} (delay/tau {ratio:6.2f}): accuracy "
              + " ".join(f"{x:.3f}" for x in accs) + f"   min p(chance) {min(ps):.3g}")
    if args.out:
        write_rows_csv(args.out, rows)


if __name__ == "__main__":
    main()
