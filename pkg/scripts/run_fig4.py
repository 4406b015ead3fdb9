"""Run (or resume) the desk-scale learning-curve sweep and print the endpoint comparison.

    python3 scripts/run_fig4.py [--config configs/fig4_acceptance.toml] [--fresh]
"""
import argparse
import json
import logging
from dataclasses import replace

from milbench.experiment import load_config, run_sweep, summary


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/fig4_acceptance.toml")
    ap.add_argument("--out")
    ap.add_argument("--fresh", action="store_true", help="discard cached rows")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = load_config(args.config)
    if args.out:
        cfg = replace(cfg, output_dir=args.out)
    rows = run_sweep(cfg, resume=not args.fresh)
    print(json.dumps(summary(rows), indent=2))
    print(f"total core time: {sum(r.wall_time_s for r in rows) / 60:.1f} min")


if __name__ == "__main__":
    main()
