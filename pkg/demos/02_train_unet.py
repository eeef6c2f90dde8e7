"""
Training the NumPy U-Net
========================

Gradient-check a tiny U-Net against central differences, then train a small
one on synthetic scenes and write the loss and Dice curves as SVG.

Run with ``python3 demos/02_train_unet.py [--out DIR]``.
"""

# %%
import argparse
from pathlib import Path

import numpy as np

from plumeseg.dataset import SynthConfig, synthetic_samples
from plumeseg.nn import ops
from plumeseg.nn.gradcheck import gradient_check
from plumeseg.nn.optim import TrainHyper
from plumeseg.nn.unet import UNetConfig, build_unet, count_parameters
from plumeseg.plots import line_chart
from plumeseg.raster import BandMode
from plumeseg.training import TrainConfig, train, write_history

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="demo_output/02")
out = Path(parser.parse_args().out)
out.mkdir(parents=True, exist_ok=True)

# %%
# Analytic gradients of a depth-2 network in float64 against finite
# differences. Coordinates whose perturbation flips a PReLU sign or a pooling
# argmax are skipped.
tiny = build_unet(UNetConfig(in_channels=3, depth=2, base_filters=2), seed=0, dtype=np.float64)
rng = np.random.default_rng(0)
x = rng.normal(size=(1, 3, 16, 16))
y = (rng.random((1, 1, 16, 16)) < 0.3).astype(float)
p = tiny.forward(x)
grads, _ = tiny.backward(ops.bce_loss_backward(p, y, np.ones(1)))
report = gradient_check(lambda: (float(ops.bce_loss(tiny.forward(x, train=False), y).sum()), tiny.last_signature), tiny.params, grads)
print(f"gradient check: worst relative error {report.worst:.2e}")

# %%
# The full-size architecture has 5 levels of 16..256 filters.
print(f"parameters, depth 5 base 16 with 5 input planes: {count_parameters(UNetConfig(in_channels=5)):,}")

# %%
# A short training run on whole 64x64 synthetic scenes.
pairs = synthetic_samples(48, SynthConfig(size=64, plume_count=(1, 2), plume_sigma=(0.08, 0.14)), seed=0, band_mode=BandMode.ONE)
samples = [s for s, _ in pairs]
model = build_unet(UNetConfig(in_channels=3, depth=4, base_filters=8), seed=0)
cfg = TrainConfig(hyper=TrainHyper(lr0=3e-3, epochs=12, step_epochs=9, batch=4), band_mode=BandMode.ONE, checkpoint_every=6)
_, records = train(model, samples[:40], samples[40:], cfg, out_dir=out, on_epoch=lambda r: print(
    f"  epoch {r.epoch}: train loss {r.train_loss:.4f}  val loss {r.val_loss:.4f}  val Dice {r.val_dice:.3f}"))
write_history(records, out / "history.csv")
ep = [r.epoch for r in records]
(out / "dice.svg").write_text(line_chart({"train": (ep, [r.train_dice for r in records]), "validation": (ep, [r.val_dice for r in records])}, "Dice", "epoch", "Dice"))
print("wrote", sorted(p.name for p in out.iterdir()))
