"""Run the full pipeline on the shipped synthetic fixture and print the summary.

Usage: python scripts/run_synthetic.py [extra CLI flags, e.g. --seed 3]
"""

import sys

from tshape.cli import main

if __name__ == "__main__":
    sys.exit(main(["run", "--config", "configs/synthetic.json", *sys.argv[1:]]))
