#!/usr/bin/env python3
"""Run the whole toy pipeline and print the headline numbers.

    python scripts/run_toy_experiment.py --out runs/toy
    python scripts/run_toy_experiment.py --out runs/smoke --smoke
"""

import argparse
import json
import logging
import time
from pathlib import Path

import torch

from bertram_lab import pipeline as P
from bertram_lab.config import load_config, smoke_preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--smoke", action="store_true", help="tiny preset, finishes in seconds")
    ap.add_argument("--variant", default="add", choices=["shallow", "replace", "add"])
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s: %(message)s")
    torch.set_num_threads(1)

    over = smoke_preset() if args.smoke else {}
    over["seed"] = args.seed
    over.setdefault("bertram", {})["variant"] = args.variant
    cfg = load_config(None, over)
    lay = P.Layout(Path(args.out))

    t0 = time.time()
    P.make_toy(cfg, lay)
    P.ingest(cfg, lay)
    P.vocab_step(cfg, lay)
    P.pretrain(cfg, lay)
    for stage in (1, 2, 3):
        P.train_bertram(cfg, lay, stage)
    P.rarify_split(cfg, lay)
    P.rarify_finetune(cfg, lay)
    P.rarify_generate(cfg, lay)
    probe = P.probe(cfg, lay)
    downstream = P.evaluate(cfg, lay)
    minutes = (time.time() - t0) / 60

    mimic = json.loads((lay.reports / f"mimic-{args.variant}.json").read_text())["slices"]
    rarify = json.loads((lay.reports / "rarify.json").read_text())
    print(f"\nrun directory: {lay.root}  ({minutes:.1f} min)")
    print("held-out mimicking cosine")
    for k in ("form_only", "context_only", "combined"):
        print(f"  {k:<13} {mimic[k]['score']:.3f}")
    print("cloze MRR (plain -> injected)")
    for bucket in ("rare", "medium", "frequent", "all"):
        a, b = probe["plain"].get(bucket), probe[args.variant].get(bucket)
        if a and b:
            print(f"  {bucket:<9} {a['score']:.3f} -> {b['score']:.3f}  (n={a['count']})")
    print(f"rarified test set: {rarify.get('emitted')} instances, "
          f"mean replacements {rarify.get('mean_replacements', 0):.2f}")
    for name, s in downstream.items():
        print(f"  accuracy {name:<20} {s['score']:.3f}  (n={s['count']})")


if __name__ == "__main__":
    main()
