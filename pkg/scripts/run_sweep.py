"""Leakage sweep over lifetimes, variants and i-vector conditioning.

    python scripts/run_sweep.py --manifest corpus/manifest.csv --out runs/sweep \
        --taus 0 0.1 inf --variants blue_cut --seeds 0 1 2

Writes sweep.csv (one row per cell and seed) and sweep_summary.json.
"""
import argparse
import logging
import math

from leakylstm.config import load_config
from leakylstm.corpus import load_manifest
from leakylstm.evaluation import sweep_leak


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--taus", nargs="+", type=float, help="lifetimes in seconds ('inf' allowed)")
    p.add_argument("--variants", nargs="+", choices=["basic", "red_cut", "blue_cut"])
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--no-conditioning", action="store_true")
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    if args.taus:
        cfg.sweep.tau_grid = args.taus
    if args.variants:
        cfg.sweep.variants = args.variants
    if args.seeds:
        cfg.sweep.seeds = args.seeds
    if args.no_conditioning:
        cfg.sweep.conditioning = [False]
    rows = sweep_leak(load_manifest(args.manifest), cfg.base_model(), cfg.train, cfg.signal,
                      cfg.sweep, cfg.speaker, jobs=args.jobs, out_dir=args.out)
    for r in rows:
        tau = "inf" if math.isinf(r["tau_seconds"]) else f"{r['tau_seconds']:.3f}"
        print(f"{r['variant']:<9} tau={tau:>6}s ivec={r['ivector_conditioning']!s:<5} "
              f"seed={r['seed']} {r['sdr_improvement_db']:6.2f} dB  {r['status']}")


if __name__ == "__main__":
    main()
