#!/usr/bin/env python3
"""Desk-scale ablation: four variants x three seeds, clean plus I-FGSM/PGD at 2..8/255.

Results are cached under runs/cache keyed by config and source, so the
acceptance suite reuses a finished run instead of retraining.
"""
import argparse
import logging
from pathlib import Path

from lyadeq.config import ExperimentConfig
from lyadeq.experiments import cached_ablation, format_table

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk_ablation.json")
    ap.add_argument("--cache", type=Path, default=ROOT / "runs" / "cache")
    ap.add_argument("--data-dir")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = ExperimentConfig.load(args.config)
    if args.data_dir:
        cfg.data_dir = args.data_dir
    rows, out = cached_ablation(cfg, args.cache)
    print(format_table(rows))
    print(f"rows: {len(rows)} -> {out / 'ablation.csv'}")


if __name__ == "__main__":
    main()
