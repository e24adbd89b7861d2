#!/usr/bin/env python3
"""LyaDEQ with PGD adversarial training, compared against the plain ablation run."""
import argparse
import logging
from pathlib import Path

from lyadeq.config import ExperimentConfig
from lyadeq.experiments import cached_ablation, format_table, summarize

ROOT = Path(__file__).resolve().parents[1]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", type=Path, default=ROOT / "configs" / "desk_pgd_at.json")
    ap.add_argument("--baseline", type=Path, default=ROOT / "configs" / "desk_ablation.json")
    ap.add_argument("--cache", type=Path, default=ROOT / "runs" / "cache")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    at_rows, out = cached_ablation(ExperimentConfig.load(args.config), args.cache, "pgd_at")
    print("PGD-AT:\n" + format_table(at_rows))
    base_rows, _ = cached_ablation(ExperimentConfig.load(args.baseline), args.cache)
    at, base = summarize(at_rows), summarize(base_rows)
    for fam, k in [("ifgsm", 2), ("pgd", 8)]:
        a, b = at[("lyadeq", fam, k)], base[("lyadeq", fam, k)]
        print(f"{fam} {k}/255: plain {b:.2f}  pgd-at {a:.2f}  delta {a - b:+.2f}")
    print(f"-> {out}")


if __name__ == "__main__":
    main()
