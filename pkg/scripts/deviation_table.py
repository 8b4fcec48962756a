"""Print the deviation table (mean cosine of adversarial embeddings to the clean
image, the label template and the caption) for a checkpoint, averaged over seeds."""

import argparse
from collections import defaultdict

import numpy as np
import torch

from ralb.datagen import DatasetSplit, generate_dataset
from ralb.encoders import load_checkpoint
from ralb.harness import STUDY_DEFAULTS, deviation_rows


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--seeds", default="0,1,2")
    a = p.parse_args()
    torch.set_num_threads(1)

    ds = generate_dataset(a.n, DatasetSplit(("circle", "square", "triangle"), ("star", "cross")), 2)
    cfg = {**STUDY_DEFAULTS["deviation"], "n": a.n, "seeds": [int(s) for s in a.seeds.split(",")]}
    table = defaultdict(list)
    for r in deviation_rows(load_checkpoint(a.checkpoint), ds, cfg):
        table[r.objective].append((r.sim_image, r.sim_label, r.sim_caption))
    print(f"{'objective':28s} image   label  caption")
    for name, vals in table.items():
        print(f"{name:28s} " + " ".join(f"{v:6.3f}" for v in np.mean(vals, axis=0)))


if __name__ == "__main__":
    main()
