"""Compare the hand-written backward pass with central finite differences.

Builds a tiny network with every smooth layer kind, then perturbs each
parameter entry by +/- eps and compares the numerical slope of the loss with
the analytic gradient. Runs in float64 so the comparison is not swamped by
rounding.

    python demos/gradient_check.py
"""

import numpy as np

from cxrcam.graph import LayerSpec, ModelGraph, backward, forward, init_params
from cxrcam.trainer import cross_entropy, cross_entropy_grad

EPS = 1e-4

# %% A network mixing plain and separable convolutions, batchnorm and a skip.
layers = [
    LayerSpec("conv", "conv", {"filters": 3, "kernel": 3, "padding": 1, "activation": "tanh"}),
    LayerSpec("bn", "batchnorm"),
    LayerSpec("sep", "depthwise-separable-conv", {"filters": 3, "kernel": 3, "padding": 1,
                                                  "activation": "tanh"}),
    LayerSpec("skip", "residual-add", {"source": "bn"}),
    LayerSpec("gap", "global-avg-pool", group="head"),
    LayerSpec("dense", "dense", {"units": 4}, "head"),
    LayerSpec("out", "softmax-output", group="head"),
]
model = ModelGraph(layers, (2, 6, 6))
params = init_params(model, seed=0, dtype=np.float64)

rng = np.random.default_rng(0)
x = rng.normal(0, 0.5, (4, 2, 6, 6))
labels = np.array([0, 1, 2, 3])


def loss():
    probs, _ = forward(model, params, x, mode="train")
    return cross_entropy(probs, labels)


# %% Analytic gradients from one forward/backward pass.
probs, trace = forward(model, params, x, mode="train")
grads, _ = backward(model, params, trace, cross_entropy_grad(probs, labels))

# %% Numerical gradients, one entry at a time.
for name in grads:
    values = params[name]
    numeric = np.zeros_like(values)
    for i in np.ndindex(values.shape):
        keep = values[i]
        values[i] = keep + EPS
        up = loss()
        values[i] = keep - EPS
        down = loss()
        values[i] = keep
        numeric[i] = (up - down) / (2 * EPS)
    scale = np.maximum(np.abs(numeric), np.abs(grads[name])).max() or 1.0
    err = np.abs(numeric - grads[name]).max() / scale
    print(f"{name:14s} {str(values.shape):16s} max relative error {err:.2e}")
