"""
Scenes, labels and crops
========================

A walk from one synthetic satellite scene to training crops: compose the
true-color planes, vectorize the smoke label into annotation polygons,
rasterize them back, cut 60%-positive crops and split them by base scene.

Run with ``python3 demos/01_scenes_labels_crops.py``.
"""

# %%
# A seeded synthetic scene. Plumes brighten blue more than red and leave a
# hotspot in the 3.9 um channel; clouds are bright and cold but unlabeled.
from datetime import timedelta

import numpy as np

from plumeseg.annotations import mask_to_polygons, match_time, rasterize
from plumeseg.dataset import SynthConfig, generate_synthetic, group_split, sample_crops, scene_rng
from plumeseg.raster import BandMode, ChannelId

cfg = SynthConfig(size=128, plume_count=(2, 3))
scene, label = generate_synthetic(cfg, scene_rng(0, "demo"))
print("channels:", [c.value for c in scene.channels])
print(f"smoke covers {100 * label.mean():.1f}% of the scene")
for ch in (ChannelId.RED, ChannelId.GREEN_SYNTH, ChannelId.BLUE):
    plane = scene.plane(ch)
    print(f"  {ch.value:11s} smoke mean {plane[label == 1].mean():.3f}  clear mean {plane[label == 0].mean():.3f}")

# %%
# Labels as annotation polygons. Each horizontal run of smoke pixels becomes
# a rectangle valid for 30 minutes either side of the scan, so rasterizing
# on the same grid gives the label back exactly.
t = scene.timestamp
polys = mask_to_polygons(label, scene.transform, t - timedelta(minutes=30), t + timedelta(minutes=30), "demo", scene.crs)
back = rasterize(match_time(polys, t), scene.transform, scene.width, scene.height)
print(f"{len(polys)} polygons; round trip exact: {np.array_equal(back, label)}")
print("polygons matched one hour later:", len(match_time(polys, t + timedelta(hours=1))))

# %%
# Crops: 15 per scene, 60% of them required to contain smoke.
crops = sample_crops(scene, label, 15, 0.6, np.random.default_rng(1), base_id="demo", band_mode=BandMode.THREE, size=48)
print(f"{len(crops)} crops, {sum(c.positive for c in crops)} positive, input shape {crops[0].input.shape}")

# %%
# Splits are drawn per base scene so crops of one scene never straddle
# train and test.
pool = []
for k in range(30):
    s, lab = generate_synthetic(SynthConfig(size=64), scene_rng(0, f"b{k}"))
    pool += sample_crops(s, lab, 4, 0.5, scene_rng(1, f"b{k}"), base_id=f"b{k}", size=32)
split = group_split(pool, rng=np.random.default_rng(0))
for name in ("train", "val", "test"):
    ids = split.split_of(name)
    print(f"  {name:5s} {len(ids):3d} crops ({100 * len(ids) / len(pool):.1f}%)")
