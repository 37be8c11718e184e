#!/usr/bin/env python3
"""Trains learned, all-Linear and all-Softmax routing on the same recall task
and prints query accuracy plus the learned model's Softmax share.

    python scripts/mqar_compare.py --config configs/mqar_desk.cfg --seed 0 --out runs/cmp
"""
import argparse
import json
import os
import sys
import time

import numpy as np

from hybrid_attn import config as cfgmod
from hybrid_attn.checkpoint import save
from hybrid_attn.model import routing_stats
from hybrid_attn.train import evaluate, run_training


def run_one(cfg, routing, out=None, verbose=False):
    t0 = time.time()
    log = (lambda r: print(f"  [{routing}] step {r['step']} loss {r['loss']:.4f} "
                           f"softmax {r['softmax_frac']}", file=sys.stderr)) if verbose else None
    metrics = os.path.join(out, f"metrics_{routing}.jsonl") if out else None
    res = run_training(cfg.model, cfg.train, cfg.task, routing=routing, metrics_path=metrics,
                       log=log)
    ev = evaluate(res.params, cfg.model, cfg.task, routing, cfg.run.eval_seqs, cfg.run.eval_seed)
    frac = float(np.mean([f.mean() for f in routing_stats(ev["routings"][0])]))
    if out:
        save(os.path.join(out, f"checkpoint_{routing}.npz"), res.params, cfgmod.dumps(cfg))
    return dict(routing=routing, accuracy=ev["accuracy"], loss=ev["loss"],
                softmax_fraction=frac, final_train_loss=res.final_loss,
                seconds=round(time.time() - t0, 1))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/mqar_desk.cfg")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    ap.add_argument("--routing", action="append",
                    choices=("learned", "all_linear", "all_softmax"))
    ap.add_argument("--out")
    ap.add_argument("-v", "--verbose", action="store_true")
    args = ap.parse_args()
    pairs = cfgmod.parse_set(args.set) + [("model.seed", str(args.seed)),
                                          ("task.seed", str(args.seed))]
    cfg = cfgmod.load(args.config, pairs)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
    for routing in args.routing or ("learned", "all_linear", "all_softmax"):
        print(json.dumps(run_one(cfg, routing, args.out, args.verbose)), flush=True)


if __name__ == "__main__":
    main()
