"""Train the four systems per seed on the synthetic grounding corpus and
report grounding accuracy and ambiguous-token accuracy.

    python scripts/run_grounding_study.py --out runs/grounding --seeds 0,1,2
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from simmt.data import SyntheticCorpusSpec
from simmt.experiments import SyntheticRecipe, prepare_synthetic, run_seed


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="runs/grounding")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--corpus-seed", type=int, default=0)
    ap.add_argument("--ambiguity", type=float, default=0.5)
    ap.add_argument("--no-text-baseline", action="store_true")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    spec = SyntheticCorpusSpec(seed=args.corpus_seed, ambiguity_rate=args.ambiguity)
    data = prepare_synthetic(spec, out / "corpus")
    recipe = SyntheticRecipe(corpus=spec)
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        t0 = time.time()
        res = run_seed(recipe, data, seed, out, text_only=not args.no_text_baseline)
        row = res.summary()
        row.pop("finetune_history")
        row["seconds"] = round(time.time() - t0, 1)
        rows.append(row)
        print(json.dumps(row), flush=True)

    keys = ["base_grounding", "scratch_grounding", "finetune_grounding",
            "mmt_ambiguous_accuracy", "text_ambiguous_accuracy"]
    summary = {k: {"mean": float(np.mean([r[k] for r in rows])),
                   "sd": float(np.std([r[k] for r in rows]))} for k in keys}
    (out / "summary.json").write_text(json.dumps({"runs": rows, "summary": summary}, indent=2))
    for k, v in summary.items():
        print(f"{k:26s} {v['mean']:.3f} +- {v['sd']:.3f}")


if __name__ == "__main__":
    main()
