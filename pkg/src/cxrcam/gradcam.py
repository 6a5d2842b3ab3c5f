"""Grad-CAM heatmaps and colour overlays."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .graph import CONV_KINDS, GraphError, backward, forward
from .tensor import bilinear_resize

# matplotlib's "jet" segment data: (x, y0, y1) breakpoints per channel
_JET_SEGMENTS = {
    "red": ((0.0, 0, 0), (0.35, 0, 0), (0.66, 1, 1), (0.89, 1, 1), (1.0, 0.5, 0.5)),
    "green": ((0.0, 0, 0), (0.125, 0, 0), (0.375, 1, 1), (0.64, 1, 1), (0.91, 0, 0), (1.0, 0, 0)),
    "blue": ((0.0, 0.5, 0.5), (0.11, 1, 1), (0.34, 1, 1), (0.65, 0, 0), (1.0, 0, 0)),
}


def _jet_table(n=256):
    x = np.linspace(0.0, 1.0, n)
    channels = []
    for name in ("red", "green", "blue"):
        seg = np.array(_JET_SEGMENTS[name], dtype=np.float64)
        channels.append(np.interp(x, seg[:, 0], seg[:, 1]))
    return np.stack(channels, axis=1)


JET = _jet_table()  # (256, 3) floats in [0, 1]


@dataclass
class Heatmap:
    values: np.ndarray
    source_layer: str
    target_class: int


def default_layer(model):
    convs = model.conv_layer_ids()
    if not convs:
        raise GraphError("model has no convolutional layer")
    return convs[-1]


def cam_from_activations(activations, gradients):
    """Steps 3-6 of Grad-CAM on one (C, h, w) feature map and its gradient:
    pool gradients into channel weights, take the channel mean of weighted
    activations, ReLU, then divide by the max (an all-zero map stays zero)."""
    weights = gradients.mean(axis=(1, 2))
    cam = (weights[:, None, None] * activations).mean(axis=0)
    cam = np.maximum(cam, 0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return cam


def grad_cam(model, params, image, target_class, layer_id=None):
    """Grad-CAM heatmap of ``target_class`` for a single image (1, C, H, W).

    The gradient is taken of the pre-softmax logit with respect to the
    output of ``layer_id`` (default: the last convolutional layer) in an
    eval-mode pass. The map is resized to the input size and divided by
    its max once more, since interpolation can lower the peak below 1.
    """
    image = np.asarray(image)
    if image.ndim == 3:
        image = image[None]
    if image.shape[0] != 1:
        raise ValueError(f"grad_cam takes one image, got batch of {image.shape[0]}")
    layer_id = layer_id or default_layer(model)
    if model.layer(layer_id).kind not in CONV_KINDS:
        raise GraphError(f"layer {layer_id!r} is not a convolutional layer")
    if not 0 <= target_class < model.num_classes:
        raise ValueError(f"target_class must be in [0, {model.num_classes}), got {target_class}")
    _, trace = forward(model, params, image, "eval")
    seed = np.zeros_like(trace.logits)
    seed[0, target_class] = 1
    _, feature_grads = backward(model, params, trace, seed, feature_layers=(layer_id,))
    acts = trace.outputs[model.index[layer_id]][0]
    cam = cam_from_activations(acts.astype(np.float64), feature_grads[layer_id][0].astype(np.float64))
    cam = bilinear_resize(cam[None], image.shape[2], image.shape[3])[0]
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    return Heatmap(np.clip(cam, 0.0, 1.0), layer_id, int(target_class))


def to_grayscale_uint8(image, value_range="unit"):
    """(C, H, W) preprocessed image -> (H, W) uint8 luminance (channel mean)."""
    gray = np.asarray(image, dtype=np.float64).mean(axis=0)
    if value_range == "unit":
        gray = gray * 255.0
    return np.clip(np.rint(gray), 0, 255).astype(np.uint8)


def colorize(values):
    """Map [0, 1] values through the 256-entry jet table to RGB in [0, 255]."""
    idx = np.clip((np.asarray(values) * 255.0).astype(np.int64), 0, 255)
    return JET[idx] * 255.0


def overlay(image, heatmap, alpha=0.4, colormap="jet", value_range="unit"):
    """Blend the colormapped heatmap over the grayscale image.

    pixel = (1 - alpha) * gray + alpha * jet(heat), rounded and clamped to
    [0, 255]. Returns an (H, W, 3) uint8 array.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if colormap != "jet":
        raise ValueError(f"unsupported colormap {colormap!r}")
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    gray = to_grayscale_uint8(image, value_range).astype(np.float64)
    if values.shape != gray.shape:
        raise ValueError(f"heatmap {values.shape} does not match image {gray.shape}")
    blended = (1.0 - alpha) * gray[..., None] + alpha * colorize(values)
    return np.clip(np.rint(blended), 0, 255).astype(np.uint8)


def explain_one(model, params, image, layer_id=None, alpha=0.4, value_range="unit"):
    """Predict, then explain the predicted class. Returns (pred, confidence, overlay, heatmap)."""
    probs, _ = forward(model, params, image[None], "eval")
    pred = int(probs[0].argmax())
    heat = grad_cam(model, params, image[None], pred, layer_id)
    return pred, float(probs[0, pred]), overlay(image, heat, alpha, value_range=value_range), heat


def overlay_filename(pred_name, confidence, true_name=None, stem=None):
    parts = []
    if true_name is not None:
        parts.append(f"true-{true_name}")
    parts.append(f"pred-{pred_name}")
    parts.append(f"{confidence:.2f}")
    if stem:
        parts.append(stem)
    return "_".join(parts) + ".png"


def batch_explain(model, params, images, out_dir, class_names, true_labels=None, stems=None,
                  layer_id=None, alpha=0.4, value_range="unit"):
    """Write ``out_dir/overlays/<name>.png`` per image and ``out_dir/manifest.csv``.

    Each image is explained on its own (eval mode, batch of one), so the
    output does not depend on how images are grouped. The target class is
    the predicted class. Returns the manifest rows.
    """
    gallery = os.path.join(out_dir, "overlays")
    os.makedirs(gallery, exist_ok=True)
    if not os.access(gallery, os.W_OK):
        raise PermissionError(f"output directory {gallery!r} is not writable")
    rows = []
    for i, image in enumerate(images):
        pred, conf, pixels, _ = explain_one(model, params, image, layer_id, alpha, value_range)
        true_name = None
        if true_labels is not None and true_labels[i] is not None:
            true_name = class_names[true_labels[i]]
        name = overlay_filename(class_names[pred], conf, true_name,
                                stems[i] if stems else f"{i:04d}")
        Image.fromarray(pixels).save(os.path.join(gallery, name))
        rows.append({"filename": name, "true": true_name or "",
                     "pred": class_names[pred], "confidence": f"{conf:.2f}"})
    with open(os.path.join(out_dir, "manifest.csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, ["filename", "true", "pred", "confidence"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows


def corner_mass_fraction(heatmap_values, region):
    """Share of total heatmap mass inside ``(r0, r1, c0, c1)``; 0 for an empty map."""
    total = float(heatmap_values.sum())
    if total <= 0:
        return 0.0
    r0, r1, c0, c1 = region
    return float(heatmap_values[r0:r1, c0:c1].sum()) / total
