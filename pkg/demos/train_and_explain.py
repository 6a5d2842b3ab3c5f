"""Walk through the whole pipeline on a small synthetic chest-film stand-in.

Generates a four-class fixture, trains the mini VGG template with the default
schedule, prints the held-out report and writes Grad-CAM overlays for one
test image per class.

    python demos/train_and_explain.py [--out demo_run] [--template mini_vgg]
"""

import argparse
from pathlib import Path

from cxrcam import dataio, gradcam, metrics
from cxrcam.cli import first_n_round_robin
from cxrcam.graph import param_count
from cxrcam.templates import TEMPLATES, build_model
from cxrcam.trainer import TrainConfig, fit, predict

parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
parser.add_argument("--out", default="demo_run")
parser.add_argument("--template", default="mini_vgg", choices=TEMPLATES)
parser.add_argument("--per-class", type=int, default=100, help="training images per class")
args = parser.parse_args()
out = Path(args.out)

# %% Data: every class has its own procedural texture over a shared noisy background.
manifest = dataio.gen_fixture(out / "data", {"train": args.per_class, "val": 30, "test": 30},
                              image_size=64, seed=0)
print(dataio.format_distribution(dataio.class_distribution(manifest)))

# EfficientNet-style models take raw 0..255 pixels, the others rescale to 0..1.
spec = dataio.default_preprocess(args.template)
data = {split: dataio.load_split(manifest, split, spec) for split in dataio.SPLITS}

# %% Model: a small template of the chosen backbone family with a softmax head.
model, params = build_model(args.template, data["train"].tensor.shape[1:])
total, trainable, _ = param_count(model, params)
print(f"\n{args.template}: {total} parameters ({trainable} trainable)")

# %% Training: Adam, plateau learning-rate decay and early stopping on val loss.
params, history = fit(model, params, data, TrainConfig())
for row in history.records:
    print(f"epoch {row['epoch']:2d}  loss {row['train_loss']:.4f}  "
          f"val_acc {row['val_acc']:.3f}  lr {row['lr']:.1e}")

# %% Evaluation on the test split.
test = data["test"]
probs = predict(model, params, test.tensor)
report = metrics.report(probs, test.labels, manifest.classes)
print()
print(report.to_text(), end="")

# %% Grad-CAM: which regions pushed the predicted class up?
picked = first_n_round_robin(manifest, "test", len(manifest.classes))
batch = dataio.load_batch(manifest, "test", picked, spec)
rows = gradcam.batch_explain(model, params, batch.tensor, out / "explain", manifest.classes,
                             list(batch.labels), value_range=spec.value_range)
for row in rows:
    print("overlay:", out / "explain" / "overlays" / row["filename"])
