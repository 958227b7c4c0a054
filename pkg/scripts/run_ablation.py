#!/usr/bin/env python3
"""Train the explainer in every mode over several seeds and print the comparison tables.

    python3 scripts/run_ablation.py --items 2000 --seeds 0,1,2 --out ablation.json
"""
import argparse
import json
from dataclasses import replace

import torch

from faithvqa.experiments import AblationConfig, run_ablation
from faithvqa.trainer import TrainConfig


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--items", type=int, default=2000)
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.lr)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--w-f", type=float, default=TrainConfig.w_f)
    p.add_argument("--lime-max-items", type=int)
    p.add_argument("--out")
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = AblationConfig(num_items=args.items,
                         seeds=tuple(int(s) for s in args.seeds.split(",")),
                         lime_max_items=args.lime_max_items)
    cfg = replace(cfg, train=replace(cfg.train, epochs=args.epochs, lr=args.lr,
                                     batch_size=args.batch_size, w_f=args.w_f))
    out = run_ablation(cfg)
    print("\nmode          S_f    [0,0.1]  BLEU-4  ROUGE-L  CIDEr   EMD   links  "
          "LIME K=1/2/3           acc(F)  acc(D)")
    for mode, s in out["summary"].items():
        eq = "/".join(f"{v:.3f}" for v in s["agreement"].values())
        print(f"{mode:12s} {s['mean_s_f']:.3f}  {s['frac_low']:.3f}    {s['bleu4']:.3f}   "
              f"{s['rougeL']:.3f}    {s['cider']:.3f}  {s['emd']:.2f}  "
              f"{s['links_per_explanation']:.2f}   {eq:22s} {s['accept_faithful']:.3f}   "
              f"{s['accept_distractor']:.3f}")
    if args.out:
        with open(args.out, "w") as f:
            json.dump(out, f, indent=1, sort_keys=True, default=str)


if __name__ == "__main__":
    main()
