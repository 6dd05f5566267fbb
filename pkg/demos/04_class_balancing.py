"""Why the lesion net needs class balancing.

Inside the liver ROI, lesion pixels are well under one percent of all
pixels.  With plain cross-entropy the cheapest solution is to predict
"no lesion" everywhere, and the network finds it quickly.  Weighting each
foreground pixel by #background/#foreground (per slice) makes both classes
contribute equally and the lesions appear.  The two runs below share every
seed; only the weighting differs.

Each run takes a few minutes at 2000 iterations on one core.

    python3 demos/04_class_balancing.py [--iterations N]
"""

import argparse
import time
from dataclasses import replace

from cfcn.cascade import CascadeConfig
from cfcn.config import EXPERIMENT_AUGMENT, EXPERIMENT_TRAIN
from cfcn.minifcn import NetConfig
from cfcn.minifcn.train import train
from cfcn.phantom import PhantomSpec, generate_dataset
from cfcn.preprocess import PreprocessConfig
from cfcn.workflow import role_slices

ap = argparse.ArgumentParser()
ap.add_argument("--iterations", type=int, default=2000)
args = ap.parse_args()

ds = generate_dataset(PhantomSpec(), 20, seed=0)
prep, cascade = PreprocessConfig(), CascadeConfig()
tr = role_slices(ds.split("train"), "lesion", prep, cascade)
te = role_slices(ds.split("test"), "lesion", prep, cascade)
print(f"lesion pixels: {100 * tr.truth.mean():.2f}% of the training ROI slices")

for balanced in (True, False):
    cfg = replace(EXPERIMENT_TRAIN, iterations=args.iterations, class_balancing=balanced,
                  eval_every=max(args.iterations // 10, 1), seed=1)
    t = time.time()
    _, curve = train(tr, te, NetConfig(), cfg, EXPERIMENT_AUGMENT)
    label = "balanced" if balanced else "unbalanced"
    print(f"{label:10s} held-out lesion Dice: " + " ".join(f"{d:.2f}" for d in curve.test_dice)
          + f"  (best {max(curve.test_dice):.2f}, {time.time() - t:.0f} s)")
