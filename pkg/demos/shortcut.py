"""Watch a classifier latch onto a spurious corner marker.

Every NORMAL image in the confounded fixture carries a bright box in its
top-left corner, the kind of artifact left by anonymization masks. The class
is still learnable from its own texture, but the box is a cheaper cue.
After training, Grad-CAM shows where the evidence for NORMAL comes from and
this script reports how much of the heatmap lands in the corner.

The outcome depends on the run. With mini_vgg at a learning rate of 1e-3 and
seed 0, nearly every NORMAL map sits on the marker. Other seeds, and the
default rate, often learn NORMAL as "none of the other textures", which
leaves its Grad-CAM maps empty: accurate, but blind to where it looked.

    python demos/shortcut.py [--out shortcut_run]
"""

import argparse
from pathlib import Path

import numpy as np

from cxrcam import dataio, gradcam
from cxrcam.templates import build_model
from cxrcam.trainer import TrainConfig, evaluate, fit

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", default="shortcut_run")
parser.add_argument("--template", default="mini_vgg")
parser.add_argument("--lr", type=float, default=1e-3)
parser.add_argument("--seed", type=int, default=0)
args = parser.parse_args()
out = Path(args.out)

# %% A confounded copy of the fixture: only NORMAL images get the marker.
manifest = dataio.gen_fixture(out / "data", {"train": 200, "val": 50, "test": 50},
                              image_size=64, seed=0, with_confound=True)
spec = dataio.default_preprocess(args.template)
data = {split: dataio.load_split(manifest, split, spec) for split in dataio.SPLITS}

# %% Train; nothing in the recipe mentions the marker.
model, params = build_model(args.template, data["train"].tensor.shape[1:])
params, _ = fit(model, params, data, TrainConfig(base_lr=args.lr, seed=args.seed))
test = data["test"]
_, acc, _, _ = evaluate(model, params, test.tensor, test.labels)
print(f"test accuracy {acc:.3f}")

# %% How much Grad-CAM mass for NORMAL sits in the marked corner?
marked = dataio.CONFOUND_CLASS
corner = dataio.corner_region(spec.size)
idx = np.flatnonzero(test.labels == marked)
fractions = np.array([
    gradcam.corner_mass_fraction(gradcam.grad_cam(model, params, test.tensor[i:i + 1],
                                                  marked).values, corner)
    for i in idx])
print(f"corner covers {100 * (corner[1] * corner[3]) / spec.size ** 2:.1f}% of the image")
print(f"median share of heatmap mass in the corner: {np.median(fractions):.2f}")
print(f"images with more than half the mass in the corner: {np.mean(fractions > 0.5):.0%}")
print(f"images with no heatmap mass in the corner: {int(np.sum(fractions == 0))}")

# %% Overlays for a few marked test images.
rows = gradcam.batch_explain(model, params, test.tensor[idx[:4]], out / "explain",
                             manifest.classes, list(test.labels[idx[:4]]),
                             value_range=spec.value_range)
for row in rows:
    print("overlay:", out / "explain" / "overlays" / row["filename"])
