"""Layer graph, parameter store, traced forward pass and reverse-mode backward.

A model is an ordered list of :class:`LayerSpec`. Each layer consumes the
output of the layer before it; ``residual-add`` layers additionally consume
the output of an earlier ``source`` layer. The forward pass caches every
layer output in a :class:`ForwardTrace`, which :func:`backward` walks in
reverse to produce parameter gradients and, on request, gradients with
respect to intermediate feature maps (used by Grad-CAM).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T

KINDS = (
    "conv", "depthwise-separable-conv", "batchnorm", "relu", "maxpool",
    "global-avg-pool", "flatten", "dense", "dropout", "residual-add",
    "softmax-output",
)
CONV_KINDS = ("conv", "depthwise-separable-conv")
PARAM_KINDS = ("conv", "depthwise-separable-conv", "batchnorm", "dense")
ACTIVATIONS = (None, "relu", "tanh")

BN_MOMENTUM = 0.9
BN_EPS = 1e-5


class GraphError(ValueError):
    """Invalid layer graph, or a trace that does not belong to the model."""


@dataclass
class LayerSpec:
    """One node of the graph.

    ``hp`` holds the kind-specific hyperparameters: ``filters``, ``kernel``,
    ``stride``, ``padding``, ``activation`` for convolutions; ``units``,
    ``activation``, ``l2`` for dense; ``window``/``stride`` for maxpool;
    ``rate`` for dropout; ``source`` (a layer id) for residual-add.
    ``group`` is ``"backbone"`` or ``"head"``; head layers are never frozen.
    """

    id: str
    kind: str
    hp: dict = field(default_factory=dict)
    group: str = "backbone"

    def to_dict(self):
        return {"id": self.id, "kind": self.kind, "hp": dict(self.hp), "group": self.group}

    @classmethod
    def from_dict(cls, d):
        return cls(id=d["id"], kind=d["kind"], hp=dict(d.get("hp", {})),
                   group=d.get("group", "backbone"))


class ModelGraph:
    """Ordered layers plus input shape ``(C, H, W)``; shapes are checked on construction."""

    def __init__(self, layers, input_shape, num_classes=4):
        self.layers = list(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        self.num_classes = int(num_classes)
        self.index = {}
        for i, layer in enumerate(self.layers):
            if layer.id in self.index:
                raise GraphError(f"duplicate layer id {layer.id!r}")
            if layer.kind not in KINDS:
                raise GraphError(f"unknown layer kind {layer.kind!r}")
            self.index[layer.id] = i
        self.shapes = self._infer_shapes()

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return (f"ModelGraph({len(self.layers)} layers, input={self.input_shape}, "
                f"classes={self.num_classes})")

    @property
    def output_shape(self):
        return self.shapes[-1]

    def layer(self, layer_id):
        try:
            return self.layers[self.index[layer_id]]
        except KeyError:
            raise GraphError(f"no layer with id {layer_id!r}") from None

    def conv_layer_ids(self):
        return [l.id for l in self.layers if l.kind in CONV_KINDS]

    def parameterized_layers(self, group=None):
        return [l for l in self.layers
                if l.kind in PARAM_KINDS and (group is None or l.group == group)]

    def to_dict(self):
        return {"input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d):
        return cls([LayerSpec.from_dict(l) for l in d["layers"]],
                   d["input_shape"], d.get("num_classes", 4))

    def _infer_shapes(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise GraphError(f"input shape must be (C, H, W), got {self.input_shape}")
        if not self.layers or self.layers[-1].kind != "softmax-output":
            raise GraphError("final layer must be softmax-output")
        shapes = []
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = self._layer_shape(i, layer, shape, shapes)
            except GraphError as exc:
                raise GraphError(f"layer {layer.id!r} ({layer.kind}): {exc}") from None
            shapes.append(shape)
        if shapes[-1] != (self.num_classes,):
            raise GraphError(
                f"softmax-output has width {shapes[-1]}, expected ({self.num_classes},)")
        return shapes

    def _layer_shape(self, i, layer, shape, shapes):
        kind, hp = layer.kind, layer.hp
        if kind in CONV_KINDS:
            if len(shape) != 3:
                raise GraphError(f"needs a (C, H, W) input, got {shape}")
            if hp.get("activation") not in ACTIVATIONS:
                raise GraphError(f"unknown activation {hp.get('activation')!r}")
            k, s, p = hp["kernel"], hp.get("stride", 1), hp.get("padding", 0)
            if k > shape[1] + 2 * p or k > shape[2] + 2 * p:
                raise GraphError(f"kernel {k} larger than padded input {shape}")
            return (hp["filters"], T.conv_output_size(shape[1], k, s, p),
                    T.conv_output_size(shape[2], k, s, p))
        if kind == "maxpool":
            if len(shape) != 3:
                raise GraphError(f"needs a (C, H, W) input, got {shape}")
            w, s = hp["window"], hp.get("stride", hp["window"])
            if w > shape[1] or w > shape[2]:
                raise GraphError(f"window {w} exceeds spatial extent {shape[1:]}")
            return (shape[0], (shape[1] - w) // s + 1, (shape[2] - w) // s + 1)
        if kind == "global-avg-pool":
            if len(shape) != 3:
                raise GraphError(f"needs a (C, H, W) input, got {shape}")
            return (shape[0],)
        if kind == "flatten":
            return (int(np.prod(shape)),)
        if kind == "dense":
            if len(shape) != 1:
                raise GraphError(f"needs a flat input, got {shape}")
            if hp.get("activation") not in ACTIVATIONS:
                raise GraphError(f"unknown activation {hp.get('activation')!r}")
            return (hp["units"],)
        if kind == "dropout":
            if not 0.0 <= hp.get("rate", 0.0) < 1.0:
                raise GraphError(f"dropout rate must be in [0, 1), got {hp.get('rate')}")
            return shape
        if kind == "residual-add":
            src = self.index.get(hp.get("source"))
            if src is None or src >= i:
                raise GraphError(f"skip source {hp.get('source')!r} is not an earlier layer")
            if shapes[src] != shape:
                raise GraphError(f"skip source shape {shapes[src]} != branch shape {shape}")
            return shape
        if kind == "softmax-output":
            if len(shape) != 1:
                raise GraphError(f"needs a flat input, got {shape}")
            return shape
        return shape  # relu, batchnorm


class ParamStore:
    """Named parameter tensors with per-tensor trainable flags.

    Names are ``"<layer id>/<slot>"``. Batchnorm running statistics live here
    too, as buffers: never trainable, updated only by train-mode forward
    passes through unfrozen batchnorm layers.
    """

    def __init__(self, values=None, trainable=None, buffers=()):
        self.values = dict(values or {})
        self.trainable = dict(trainable or {})
        self.buffers = set(buffers)

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def names(self):
        return list(self.values)

    def layer_names(self, layer_id):
        prefix = layer_id + "/"
        return [n for n in self.values if n.startswith(prefix)]

    def trainable_names(self):
        return [n for n in self.values if self.trainable.get(n, False)]

    def copy(self):
        return ParamStore({k: v.copy() for k, v in self.values.items()},
                          self.trainable, self.buffers)

    def astype(self, dtype):
        return ParamStore({k: v.astype(dtype) for k, v in self.values.items()},
                          self.trainable, self.buffers)


def layer_param_shapes(layer, in_shape):
    """Parameter slot -> shape for one layer (buffers included)."""
    kind, hp = layer.kind, layer.hp
    if kind == "conv":
        k = hp["kernel"]
        return {"kernel": (hp["filters"], in_shape[0], k, k), "bias": (hp["filters"],)}
    if kind == "depthwise-separable-conv":
        k = hp["kernel"]
        return {"depthwise": (in_shape[0], 1, k, k),
                "pointwise": (hp["filters"], in_shape[0], 1, 1),
                "bias": (hp["filters"],)}
    if kind == "batchnorm":
        c = (in_shape[0],)
        return {"gamma": c, "beta": c, "moving_mean": c, "moving_var": c}
    if kind == "dense":
        return {"kernel": (in_shape[0], hp["units"]), "bias": (hp["units"],)}
    return {}


BUFFER_SLOTS = ("moving_mean", "moving_var")


def init_params(model, seed=0, dtype=T.DEFAULT_DTYPE):
    """He-uniform weights, zero biases, identity batchnorm; all trainable."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for i, layer in enumerate(model.layers):
        in_shape = model.input_shape if i == 0 else model.shapes[i - 1]
        for slot, shape in layer_param_shapes(layer, in_shape).items():
            name = f"{layer.id}/{slot}"
            if slot in ("kernel", "depthwise", "pointwise"):
                fan_in = shape[0] if layer.kind == "dense" else int(np.prod(shape[1:]))
                limit = np.sqrt(6.0 / fan_in)
                value = rng.uniform(-limit, limit, size=shape)
            elif slot in ("gamma", "moving_var"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            store.values[name] = value.astype(dtype)
            store.trainable[name] = slot not in BUFFER_SLOTS
            if slot in BUFFER_SLOTS:
                store.buffers.add(name)
    return store


def check_params(model, params):
    """Raise GraphError unless ``params`` holds exactly the model's tensors."""
    expected = {}
    for i, layer in enumerate(model.layers):
        in_shape = model.input_shape if i == 0 else model.shapes[i - 1]
        for slot, shape in layer_param_shapes(layer, in_shape).items():
            expected[f"{layer.id}/{slot}"] = tuple(shape)
    if set(expected) != set(params.values):
        missing = sorted(set(expected) - set(params.values))
        extra = sorted(set(params.values) - set(expected))
        raise GraphError(f"parameter mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise GraphError(f"{name} has shape {params[name].shape}, expected {shape}")


@dataclass
class ForwardTrace:
    """Everything the backward pass needs from one forward call."""

    mode: str
    layer_ids: tuple
    input: np.ndarray
    outputs: list
    cache: dict
    logits: np.ndarray


def _activate(x, activation):
    if activation == "relu":
        return T.relu(x)
    if activation == "tanh":
        return np.tanh(x)
    return x


def _activate_backward(out, grad, activation):
    if activation == "relu":
        return T.relu_backward(out, grad)
    if activation == "tanh":
        return grad * (1 - out * out)
    return grad


def _bn_frozen(params, layer_id):
    return not params.trainable.get(f"{layer_id}/gamma", False)


def forward(model, params, batch, mode="eval", rng=None):
    """Run ``batch`` (N, C, H, W) through the model.

    ``mode="train"`` enables dropout (inverted scaling, masks drawn from
    ``rng``) and batch statistics in unfrozen batchnorm layers, whose running
    averages are updated in ``params``. Frozen batchnorm layers always use
    their running statistics. Returns ``(probs, trace)``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1:] != model.input_shape:
        raise T.ShapeError(
            f"batch shape {batch.shape} does not match model input {model.input_shape}")
    if mode == "train" and rng is None:
        rng = np.random.default_rng(0)
    outputs, cache = [], {}
    x = batch
    logits = None
    for i, layer in enumerate(model.layers):
        kind, hp, lid = layer.kind, layer.hp, layer.id
        if kind == "conv":
            y = T.conv2d(x, params[f"{lid}/kernel"], params[f"{lid}/bias"],
                         hp.get("stride", 1), hp.get("padding", 0))
            y = _activate(y, hp.get("activation"))
        elif kind == "depthwise-separable-conv":
            mid = T.depthwise_conv2d(x, params[f"{lid}/depthwise"],
                                     hp.get("stride", 1), hp.get("padding", 0))
            cache[i] = mid
            y = _activate(T.pointwise_conv(mid, params[f"{lid}/pointwise"], params[f"{lid}/bias"]),
                          hp.get("activation"))
        elif kind == "batchnorm":
            gamma, beta = params[f"{lid}/gamma"], params[f"{lid}/beta"]
            eps = hp.get("eps", BN_EPS)
            if mode == "train" and not _bn_frozen(params, lid):
                y, (xhat, inv_std, mean, var) = T.batchnorm_train(x, gamma, beta, eps)
                m = hp.get("momentum", BN_MOMENTUM)
                rm, rv = f"{lid}/moving_mean", f"{lid}/moving_var"
                params.values[rm] = (m * params[rm] + (1 - m) * mean).astype(params[rm].dtype)
                params.values[rv] = (m * params[rv] + (1 - m) * var).astype(params[rv].dtype)
                cache[i] = (xhat, inv_std, True)
            else:
                y, (xhat, inv_std) = T.batchnorm_eval(
                    x, gamma, beta, params[f"{lid}/moving_mean"], params[f"{lid}/moving_var"], eps)
                cache[i] = (xhat, inv_std, False)
        elif kind == "relu":
            y = T.relu(x)
        elif kind == "maxpool":
            w = hp["window"]
            y, argmax = T.maxpool2d(x, w, hp.get("stride", w))
            cache[i] = argmax
        elif kind == "global-avg-pool":
            y = T.global_avg_pool(x)
        elif kind == "flatten":
            y = x.reshape(x.shape[0], -1)
        elif kind == "dense":
            y = _activate(T.dense(x, params[f"{lid}/kernel"], params[f"{lid}/bias"]),
                          hp.get("activation"))
        elif kind == "dropout":
            rate = hp.get("rate", 0.0)
            if mode == "train" and rate > 0:
                mask = ((rng.random(x.shape) >= rate) / (1.0 - rate)).astype(x.dtype)
                cache[i] = mask
                y = x * mask
            else:
                y = x
        elif kind == "residual-add":
            y = x + outputs[model.index[hp["source"]]]
        elif kind == "softmax-output":
            logits = x
            y = T.softmax_rows(x)
        outputs.append(y)
        x = y
    trace = ForwardTrace(mode, tuple(l.id for l in model.layers), batch, outputs, cache, logits)
    return outputs[-1], trace


def _first_needed(model, params, feature_layers):
    first = None
    for i, layer in enumerate(model.layers):
        needs = layer.id in feature_layers or any(
            params.trainable.get(n, False) for n in params.layer_names(layer.id))
        if needs:
            first = i
            break
    if "input" in feature_layers:
        first = -1
    return first


def backward(model, params, trace, grad_logits, feature_layers=()):
    """Reverse-mode pass from a gradient with respect to the logits.

    ``grad_logits`` (N, K) is the gradient of the scalar objective with
    respect to the softmax-output layer's input. Returns
    ``(param_grads, feature_grads)``: ``param_grads`` maps every trainable
    parameter name to its gradient (frozen tensors get no entry);
    ``feature_grads`` maps each requested layer id to the gradient of that
    layer's output. The pseudo-id ``"input"`` requests the batch gradient.
    """
    if trace.layer_ids != tuple(l.id for l in model.layers):
        raise GraphError("trace was produced by a different model")
    grad_logits = np.asarray(grad_logits, dtype=trace.logits.dtype)
    if grad_logits.shape != trace.logits.shape:
        raise T.ShapeError(f"grad shape {grad_logits.shape} != logits {trace.logits.shape}")
    feature_layers = tuple(feature_layers)
    for lid in feature_layers:
        if lid != "input":
            model.layer(lid)
    param_grads, feature_grads = {}, {}
    first = _first_needed(model, params, feature_layers)
    if first is None:
        return param_grads, feature_grads

    n = len(model.layers)
    grads = [None] * n
    grads[n - 1] = grad_logits  # softmax-output passes logits gradient through
    grad_input = None

    def accumulate(j, g):
        if j < 0:
            nonlocal grad_input
            grad_input = g if grad_input is None else grad_input + g
        else:
            grads[j] = g if grads[j] is None else grads[j] + g

    def want(name):
        return params.trainable.get(name, False)

    for i in range(n - 1, max(first, 0) - 1, -1):
        layer = model.layers[i]
        kind, hp, lid = layer.kind, layer.hp, layer.id
        g = grads[i]
        if g is None:
            continue
        if lid in feature_layers:
            feature_grads[lid] = g
        x = trace.input if i == 0 else trace.outputs[i - 1]
        out = trace.outputs[i]
        need_x = i > first
        gx = None
        if kind == "softmax-output":
            gx = g
        elif kind == "conv":
            g = _activate_backward(out, g, hp.get("activation"))
            gx, gk, gb = T.conv2d_backward(x, params[f"{lid}/kernel"], g,
                                           hp.get("stride", 1), hp.get("padding", 0), need_x)
            for slot, v in (("kernel", gk), ("bias", gb)):
                if want(f"{lid}/{slot}"):
                    param_grads[f"{lid}/{slot}"] = v
        elif kind == "depthwise-separable-conv":
            g = _activate_backward(out, g, hp.get("activation"))
            mid = trace.cache[i]
            gmid, gp, gb = T.pointwise_conv_backward(mid, params[f"{lid}/pointwise"], g)
            gx, gd = T.depthwise_conv2d_backward(x, params[f"{lid}/depthwise"], gmid,
                                                 hp.get("stride", 1), hp.get("padding", 0), need_x)
            for slot, v in (("depthwise", gd), ("pointwise", gp), ("bias", gb)):
                if want(f"{lid}/{slot}"):
                    param_grads[f"{lid}/{slot}"] = v
        elif kind == "batchnorm":
            xhat, inv_std, batch_stats = trace.cache[i]
            gx, gg, gbeta = T.batchnorm_backward(g, params[f"{lid}/gamma"], xhat, inv_std,
                                                 batch_stats)
            for slot, v in (("gamma", gg), ("beta", gbeta)):
                if want(f"{lid}/{slot}"):
                    param_grads[f"{lid}/{slot}"] = v.astype(x.dtype, copy=False)
        elif kind == "relu":
            gx = T.relu_backward(out, g)
        elif kind == "maxpool":
            w = hp["window"]
            gx = T.maxpool2d_backward(g, trace.cache[i], x.shape, w, hp.get("stride", w))
        elif kind == "global-avg-pool":
            gx = T.global_avg_pool_backward(g, x.shape)
        elif kind == "flatten":
            gx = g.reshape(x.shape)
        elif kind == "dense":
            g = _activate_backward(out, g, hp.get("activation"))
            gx, gk, gb = T.dense_backward(x, params[f"{lid}/kernel"], g, need_x)
            for slot, v in (("kernel", gk), ("bias", gb)):
                if want(f"{lid}/{slot}"):
                    param_grads[f"{lid}/{slot}"] = v.astype(x.dtype, copy=False)
        elif kind == "dropout":
            gx = g * trace.cache[i] if i in trace.cache else g
        elif kind == "residual-add":
            gx = g
            src = model.index[hp["source"]]
            if src >= first:
                accumulate(src, g)
        if need_x and gx is not None:
            accumulate(i - 1, gx)
    if "input" in feature_layers:
        feature_grads["input"] = grad_input
    return param_grads, feature_grads


def freeze(model, params, trainable_last=None):
    """Return ``params`` with trainable flags set for fine-tuning.

    The returned store shares tensor values with ``params``; only the flag
    table is new.

    Backbone layers are counted in units of parameterized layers (conv,
    depthwise-separable conv, batchnorm, dense). All but the last
    ``trainable_last`` of them are frozen; head layers stay trainable.
    ``None`` makes everything trainable. Buffers are never trainable.
    """
    backbone = model.parameterized_layers("backbone")
    if trainable_last is None:
        trainable_last = len(backbone)
    if not 0 <= trainable_last <= len(backbone):
        raise ValueError(
            f"trainable_last must be in [0, {len(backbone)}], got {trainable_last}")
    cut = len(backbone) - trainable_last
    frozen_ids = {l.id for l in backbone[:cut]}
    out = ParamStore(params.values, params.trainable, params.buffers)
    for layer in model.layers:
        for name in params.layer_names(layer.id):
            out.trainable[name] = name not in params.buffers and layer.id not in frozen_ids
    return out


def param_count(model, params, include_buffers=True):
    """Return ``(total, trainable, frozen)`` scalar counts.

    Running statistics count as non-trainable when ``include_buffers`` is
    set (the usual Keras-style accounting); pass False to leave them out.
    """
    total = trainable = 0
    for name, value in params.values.items():
        if name in params.buffers and not include_buffers:
            continue
        total += value.size
        if params.trainable.get(name, False):
            trainable += value.size
    return total, trainable, total - trainable


def clone(model):
    return copy.deepcopy(model)
