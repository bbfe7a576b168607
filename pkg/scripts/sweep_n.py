"""Sensitivity of NDCG/ERR/MRR@10 to the number of documents per side, n.

Usage: python scripts/sweep_n.py [--values 1,50,500] [--config configs/synthetic.json]
"""

import argparse
import sys

from tshape.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/synthetic.json")
    ap.add_argument("--values", default="1,50,500")
    args, rest = ap.parse_known_args()
    sys.exit(main(["sweep", "--config", args.config, "--parameter", "n", "--values", args.values, *rest]))
