"""Pretrain once, then fine-tune each method over several seeds and print a
clean / PGD-10 accuracy table on held-in and zero-shot classes."""

import argparse
import time

import numpy as np
import torch

from ralb.attacks import AttackSpec
from ralb.datagen import SHAPES, DatasetSplit, class_templates, generate_dataset
from ralb.encoders import load_checkpoint, save_checkpoint, snapshot
from ralb.evaluation import eval_clean, eval_robust
from ralb.harness import STUDY_DEFAULTS, finetune_model, pretrain_model

SPLIT = DatasetSplit(("circle", "square", "triangle"), ("star", "cross"))


def accs(model, ds):
    t = class_templates(ds.class_names)
    return eval_clean(model, ds, t), eval_robust(model, ds, t, AttackSpec())


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--checkpoint", help="reuse a pretrained checkpoint instead of pretraining")
    p.add_argument("--save", help="where to write the pretrained checkpoint")
    p.add_argument("--methods", default="qt-aft,fare,tecoa")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--n-eval", type=int, default=500)
    a = p.parse_args()
    torch.set_num_threads(1)

    if a.checkpoint:
        base = load_checkpoint(a.checkpoint)
    else:
        t0 = time.perf_counter()
        pre = generate_dataset(STUDY_DEFAULTS["pretrain"]["n"], DatasetSplit(SHAPES), 0, caption_style="mixed")
        base, _ = pretrain_model(pre, {**STUDY_DEFAULTS["pretrain"], "seed": 0})
        print(f"pretrain {time.perf_counter() - t0:.0f}s")
        if a.save:
            save_checkpoint(base, a.save)
    base = snapshot(base) if base.vision_orig is None else base

    ft = generate_dataset(STUDY_DEFAULTS["finetune"]["n"], SPLIT, 1)
    heldin = generate_dataset(a.n_eval, SPLIT, 2)
    zeroshot = generate_dataset(a.n_eval, SPLIT, 3, partition="zeroshot")

    print(f"{'model':12s} seed  in-clean in-robust zs-clean zs-robust")
    row = accs(base, heldin) + accs(base, zeroshot)
    print(f"{'pretrained':12s}   -  " + "  ".join(f"{v:7.3f}" for v in row))
    for m in a.methods.split(","):
        rows = []
        for s in map(int, a.seeds.split(",")):
            model, _ = finetune_model(base, ft, {**STUDY_DEFAULTS["finetune"], "seed": s}, m)
            rows.append(accs(model, heldin) + accs(model, zeroshot))
            print(f"{m:12s} {s:4d}  " + "  ".join(f"{v:7.3f}" for v in rows[-1]), flush=True)
        print(f"{m + ' mean':12s}   -  " + "  ".join(f"{v:7.3f}" for v in np.mean(rows, axis=0)))


if __name__ == "__main__":
    main()
