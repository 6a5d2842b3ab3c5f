"""Loss, optimizers, learning-rate schedule, early stopping and the epoch loop."""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import metrics
from .graph import backward, forward, freeze
from .templates import build_model

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
HISTORY_FIELDS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "val_auc", "lr")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    base_lr: float = 1e-4
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    l2_coeff: float = 1e-3
    plateau_factor: float = 0.5
    plateau_patience: int = 2
    plateau_min_lr: float = 1e-6
    early_stop_patience: int = 3
    min_delta: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.base_lr < 0 or self.plateau_min_lr < 0 or self.l2_coeff < 0:
            raise ValueError("learning rates and l2_coeff must be nonnegative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must be in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be >= 1")


@dataclass
class History:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return [r[name] for r in self.records]

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(HISTORY_FIELDS)
            for r in self.records:
                writer.writerow([r["epoch"]] + [_fmt(r[k]) for k in HISTORY_FIELDS[1:]])


def _fmt(v):
    return "nan" if v != v else f"{v:.8g}"


# -- loss --------------------------------------------------------------------

def _check_labels(labels, k):
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("labels must be a 1-D integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    return labels


def cross_entropy(probs, labels):
    """Mean of -log p(true class), with probabilities clamped at 1e-12."""
    probs = np.asarray(probs)
    labels = _check_labels(labels, probs.shape[1])
    if len(labels) != len(probs):
        raise ValueError(f"{len(probs)} probability rows but {len(labels)} labels")
    p = np.maximum(probs[np.arange(len(labels)), labels].astype(np.float64), PROB_FLOOR)
    return float(-np.log(p).mean())


def cross_entropy_grad(probs, labels):
    """Gradient of the mean cross-entropy with respect to the logits."""
    labels = _check_labels(labels, probs.shape[1])
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    return g / len(labels)


def l2_tensors(model):
    """Parameter names carrying the L2 penalty: kernels of layers flagged ``l2``."""
    return [f"{l.id}/kernel" for l in model.layers if l.hp.get("l2")]


def l2_penalty(model, params, coeff):
    return coeff * sum(float(np.sum(params[n].astype(np.float64) ** 2))
                       for n in l2_tensors(model))


def objective(model, params, x, labels, coeff, mode="train", rng=None):
    """Return ``(total_loss, data_loss, probs, trace)``; total adds the L2 term."""
    probs, trace = forward(model, params, x, mode, rng)
    data = cross_entropy(probs, labels)
    return data + l2_penalty(model, params, coeff), data, probs, trace


# -- optimizers --------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update of every trainable tensor in ``grads``."""
    state.t += 1
    c1 = 1 - beta1 ** state.t
    c2 = 1 - beta2 ** state.t
    for name, g in grads.items():
        if not params.trainable.get(name, False):
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        params.values[name] = (p - update).astype(p.dtype)
    return params, state


def sgd_step(params, grads, lr):
    for name, g in grads.items():
        if not params.trainable.get(name, False):
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
        params.values[name] = (p - lr * g).astype(p.dtype)
    return params


# -- schedules ---------------------------------------------------------------

class ReduceOnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs
    without a val-loss improvement larger than ``min_delta``."""

    def __init__(self, lr, factor=0.5, patience=2, min_lr=1e-6, min_delta=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.min_delta = min_delta
        self.best = np.inf
        self.wait = 0

    def step(self, val_loss):
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.wait = 0
            return self.lr
        self.wait += 1
        if self.wait >= self.patience:
            new_lr = max(self.lr * self.factor, self.min_lr)
            if new_lr < self.lr:
                logger.info("reducing learning rate %.3g -> %.3g", self.lr, new_lr)
            self.lr = new_lr
            self.wait = 0
        return self.lr


class EarlyStopping:
    """Stop after ``patience`` epochs without improvement; keeps the best weights."""

    def __init__(self, patience=3, min_delta=1e-4):
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.best_epoch = None
        self.best_params = None
        self.wait = 0

    def step(self, val_loss, params=None, epoch=None):
        """Return ``"continue"`` or ``"stop"``."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.best_epoch = epoch
            self.best_params = params.copy() if params is not None else None
            self.wait = 0
            return "continue"
        self.wait += 1
        return "stop" if self.wait >= self.patience else "continue"


# -- training loop -----------------------------------------------------------

def _split(dataset, name):
    if name not in dataset:
        raise ValueError(f"dataset has no {name!r} split")
    split = dataset[name]
    x, y = (split.tensor, split.labels) if hasattr(split, "tensor") else split
    if len(y) == 0:
        raise ValueError(f"{name!r} split is empty")
    return x, np.asarray(y)


def predict(model, params, x, batch_size=64):
    """Eval-mode class probabilities for an array of images."""
    chunks = [forward(model, params, x[i:i + batch_size], "eval")[0]
              for i in range(0, len(x), batch_size)]
    return np.concatenate(chunks)


def evaluate(model, params, x, y, batch_size=64):
    """Return ``(loss, accuracy, macro_auc, probs)`` on held-out data."""
    probs = predict(model, params, x, batch_size)
    loss = cross_entropy(probs, y)
    acc = float(np.mean(probs.argmax(axis=1) == y))
    try:
        auc = metrics.auc_ovr(probs, y, warn=False)[1]
    except ValueError:
        auc = float("nan")
    return loss, acc, auc, probs


def fit(model, params, dataset, config=None):
    """Train ``params`` in place on ``dataset["train"]``, validating on ``dataset["val"]``.

    Each split is an ``(x, labels)`` pair or an object with ``tensor`` and
    ``labels`` attributes. Mini-batches follow a fresh seeded permutation
    every epoch (the last partial batch is kept). Only trainable tensors are
    updated. Returns ``(params, history)``; if early stopping triggers, the
    best-epoch parameters are restored first.
    """
    config = config or TrainConfig()
    x_train, y_train = _split(dataset, "train")
    x_val, y_val = _split(dataset, "val")
    rng = np.random.default_rng(config.seed)
    plateau = ReduceOnPlateau(config.base_lr, config.plateau_factor, config.plateau_patience,
                              config.plateau_min_lr, config.min_delta)
    stopper = EarlyStopping(config.early_stop_patience, config.min_delta)
    state = AdamState()
    history = History()
    l2_names = [n for n in l2_tensors(model) if params.trainable.get(n, False)]
    n = len(y_train)

    for epoch in range(1, config.epochs + 1):
        lr = plateau.lr
        order = rng.permutation(n)
        loss_sum = correct = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = x_train[idx], y_train[idx]
            probs, trace = forward(model, params, xb, "train", rng)
            loss_sum += cross_entropy(probs, yb) * len(idx)
            correct += int(np.sum(probs.argmax(axis=1) == yb))
            grads, _ = backward(model, params, trace, cross_entropy_grad(probs, yb))
            for name in l2_names:
                grads[name] = grads[name] + 2 * config.l2_coeff * params[name]
            if config.optimizer == "adam":
                adam_step(params, grads, state, lr, config.beta1, config.beta2, config.adam_eps)
            else:
                sgd_step(params, grads, lr)
        val_loss, val_acc, val_auc, _ = evaluate(model, params, x_val, y_val)
        history.records.append({
            "epoch": epoch, "train_loss": loss_sum / n, "train_acc": correct / n,
            "val_loss": val_loss, "val_acc": val_acc, "val_auc": val_auc, "lr": lr,
        })
        logger.info("epoch %d: loss %.4f acc %.4f val_loss %.4f val_acc %.4f lr %.3g",
                    epoch, loss_sum / n, correct / n, val_loss, val_acc, lr)
        plateau.step(val_loss)
        if stopper.step(val_loss, params, epoch) == "stop":
            logger.info("early stop after epoch %d; restoring epoch %d",
                        epoch, stopper.best_epoch)
            params.values.update(stopper.best_params.values)
            break
    return params, history


def grid_search(template, grid, dataset, budget=10, config=None, input_shape=None,
                num_classes=4, trainable_last=None, seed=0):
    """Train one model per grid cell and pick the best by final val accuracy.

    ``grid`` maps ``head_units``, ``lr`` and ``activation`` to candidate lists
    (missing keys use the template defaults). Cells run in product order;
    ties on val accuracy go to the lower val loss, then the earlier cell.
    Each cell's seed is derived from ``(seed, cell index)``.

    Returns ``(best_cell, summaries)`` where every summary holds the cell,
    its final val accuracy/loss and the full History.
    """
    config = config or TrainConfig()
    x_train, _ = _split(dataset, "train")
    input_shape = input_shape or x_train.shape[1:]
    keys = ("head_units", "lr", "activation")
    unknown = set(grid) - set(keys)
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}")
    axes = [list(grid.get(k, [None])) for k in keys]
    if any(len(a) == 0 for a in axes):
        raise ValueError("grid axes must be nonempty")
    summaries = []
    for i, values in enumerate(itertools.product(*axes)):
        cell = dict(zip(keys, values))
        cell_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        model, params = build_model(template, input_shape, num_classes,
                                    head_units=cell["head_units"],
                                    head_activation=cell["activation"] or "relu",
                                    seed=cell_seed)
        params = freeze(model, params, trainable_last)
        cfg = replace(config, epochs=min(budget, config.epochs), seed=cell_seed,
                      base_lr=config.base_lr if cell["lr"] is None else cell["lr"])
        _, history = fit(model, params, dataset, cfg)
        last = history.records[-1] if history.records else {"val_acc": 0.0, "val_loss": np.inf}
        summaries.append({"index": i, "cell": cell, "val_acc": last["val_acc"],
                          "val_loss": last["val_loss"], "history": history,
                          "config": asdict(cfg)})
    best = max(summaries, key=lambda s: (s["val_acc"], -s["val_loss"], -s["index"]))
    return best["cell"], summaries
