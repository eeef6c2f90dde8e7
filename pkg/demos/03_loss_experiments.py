"""
Loss choice under imbalance and label noise
===========================================

Two desk-scale experiments on synthetic data:

* MAE against BCE when smoke covers under 2% of pixels. MAE's gradient is
  the same for every pixel, so the cheapest minimizer predicts "no smoke"
  everywhere.
* Plain BCE against BCE that drops the highest-loss sample in each batch,
  with training labels corrupted by dilation and dropped plumes and
  evaluation on the clean labels.

The default is one seed with a shortened schedule (a few minutes). ``--full``
runs the three-seed, 21-epoch version used by the acceptance suite. The short
run is under-trained: dropping one of four samples per batch removes a
quarter of each gradient, so drop-highest lags early and the comparison only
settles in the full run (where the two end within 0.01 Dice of each other).
"""

# %%
import argparse
from dataclasses import replace

import numpy as np

from plumeseg.experiments import DESK_HYPER, loss_sampling, mae_collapse

parser = argparse.ArgumentParser()
parser.add_argument("--full", action="store_true")
args = parser.parse_args()
seeds = (0, 1, 2) if args.full else (0,)
hyper = DESK_HYPER if args.full else replace(DESK_HYPER, epochs=8, step_epochs=6)
n_train, n_val = (96, 32) if args.full else (48, 16)

# %%
res = mae_collapse(seeds, n_train=n_train, n_val=n_val, hyper=hyper)
print(f"positive pixels: {100 * np.mean(res['positive_fraction']):.2f}%")
for loss in ("bce", "mae"):
    runs = res[loss]
    print(f"  {loss}: clean Dice {np.mean([r.val_dice_clean for r in runs]):.3f}, "
          f"pixels predicted positive {100 * np.mean([r.positive_rate for r in runs]):.3f}%")

# %%
res = loss_sampling(seeds, n_train=n_train, n_val=n_val, hyper=hyper)
for name in ("plain", "drop"):
    print(f"  {name:5s} BCE: clean-label Dice {np.mean([r.val_dice_clean for r in res[name]]):.3f}")
