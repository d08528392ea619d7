"""Leak applied at test time only vs at train and test time (blue-cut models).

    python scripts/run_mismatch.py --manifest corpus/manifest.csv --seeds 0 1 2
"""
import argparse
import json
import logging

from leakylstm.config import load_config
from leakylstm.corpus import load_manifest
from leakylstm.evaluation import mismatch_experiment


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    p.add_argument("--test-a", type=float, default=0.0)
    p.add_argument("--out", help="optional JSON output path")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    cfg = load_config(args.config)
    rows = mismatch_experiment(load_manifest(args.manifest), cfg.base_model(), cfg.train, cfg.signal,
                               args.seeds, test_a=args.test_a)
    for r in rows:
        print(f"seed {r['seed']}: no leak in training {r['train_no_leak_db']:6.2f} dB | "
              f"leak in training {r['train_with_leak_db']:6.2f} dB")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2)


if __name__ == "__main__":
    main()
