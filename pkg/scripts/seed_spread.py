"""Macro NDCG@10 of each system across several seeds of the synthetic fixture.

Usage: python scripts/seed_spread.py [--seeds 0,1,2,3,4,5]
"""

import argparse

import numpy as np

from tshape.config import load_config
from tshape.evaluation import compare
from tshape.pipeline import run_pipeline

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/synthetic.json")
    ap.add_argument("--seeds", default="0,1,2,3,4,5")
    args = ap.parse_args()
    scores: dict[str, list[float]] = {}
    for seed in (int(s) for s in args.seeds.split(",")):
        cfg = load_config(args.config, [f"paths.cache_dir=cache/seeds/{seed}", f"paths.output_dir=out/seeds/{seed}"],
                          seed=seed)
        _, art = run_pipeline(cfg)
        tables = {t.system: t for t in art["tables"]}
        p = compare(tables["cnn"], tables["random"], "ndcg", 10).p_value
        line = "  ".join(f"{k}={t.macro('ndcg', 10):.3f}" for k, t in tables.items())
        print(f"seed {seed}: {line}  p(cnn vs random)={p:.4f}")
        for k, t in tables.items():
            scores.setdefault(k, []).append(t.macro("ndcg", 10))
    for k, v in scores.items():
        print(f"{k:<7} mean {np.mean(v):.3f} sd {np.std(v, ddof=1) if len(v) > 1 else 0.0:.3f}")
