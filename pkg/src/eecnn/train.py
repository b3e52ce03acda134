"""Two-stage training: the main network first, then the early-exit branch on a frozen trunk."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
from dataclasses import dataclass, fields
from typing import Callable

import numpy as np

from . import graph as G
from .augment import apply_draws, sample_draw, transform_label
from .data import PatchSet
from .errors import UsageError
from .losses import LossWeights, composite_loss
from .nn import Layer

log = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "val_precision", "val_recall", "lr", "phase")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_schedule: str = "constant"  # or "cosine": per-epoch decay from lr to lr * lr_floor
    lr_floor: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-7
    clip_norm: float | None = 2.0  # global gradient norm cap; None disables
    batch_size: int = 128
    epochs: int = 30
    patience: int = 10
    aug_boundary: int | None = None  # first epoch of phase 2; default epochs // 3
    augment: bool = True
    bn_momentum: float = 0.9
    seed: int = 0
    max_steps: int | None = None
    tau_accept: float = 0.5
    checkpoint_every: int = 0
    checkpoint_path: str | None = None

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive or None")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.aug_boundary is not None and self.aug_boundary > self.epochs:
            raise ValueError("augmentation boundary must not exceed the epoch count")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "constant" or self.epochs <= 1:
            return self.lr
        floor = self.lr * self.lr_floor
        return floor + 0.5 * (self.lr - floor) * (1.0 + math.cos(math.pi * epoch / (self.epochs - 1)))

    @property
    def phase_boundary(self) -> int:
        return self.epochs // 3 if self.aug_boundary is None else self.aug_boundary

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string values, e.g. a parsed key=value file; unknown keys are ignored."""
        kw = {}
        for f in fields(cls):
            if f.name in values and values[f.name] is not None:
                raw = values[f.name]
                typ = str(f.type)
                if "None" in typ and str(raw).lower() in ("none", ""):
                    kw[f.name] = None
                elif "bool" in typ:
                    kw[f.name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
                elif "int" in typ:
                    kw[f.name] = int(raw)
                elif "float" in typ:
                    kw[f.name] = float(raw)
                else:
                    kw[f.name] = raw
        return cls(**kw)


class Adam:
    """Adaptive-moment optimizer over the trainable arrays of a layer list."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[tuple[int, str], np.ndarray] = {}
        self.v: dict[tuple[int, str], np.ndarray] = {}

    def step(self, layers: list[Layer], grads: list[dict[str, np.ndarray]]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        lr_t = self.lr * np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for i, (layer, g) in enumerate(zip(layers, grads)):
            if layer.frozen:
                continue
            for key, grad in g.items():
                k = (i, key)
                if k not in self.m:
                    self.m[k] = np.zeros_like(grad, dtype=np.float64)
                    self.v[k] = np.zeros_like(grad, dtype=np.float64)
                self.m[k] = b1 * self.m[k] + (1 - b1) * grad
                self.v[k] = b2 * self.v[k] + (1 - b2) * grad * grad
                p = layer.params[key]
                layer.params[key] = (p - lr_t * self.m[k] / (np.sqrt(self.v[k]) + self.eps)).astype(p.dtype)


def clip_by_global_norm(grads: list[dict[str, np.ndarray]], max_norm: float | None) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``; returns the original norm.

    A single batch with a heavily weighted false positive can carry a gradient
    orders of magnitude above the rest. Unclipped, it inflates Adam's second
    moment for thousands of steps and stalls everything else.
    """
    norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for d in grads for g in d.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / norm
        for d in grads:
            for k in d:
                d[k] = d[k] * d[k].dtype.type(scale)
    return norm


# ---------------------------------------------------------------------------
# forward/backward over a whole graph
# ---------------------------------------------------------------------------


def main_loss_and_grads(
    g: G.ModelGraph, x: np.ndarray, data: PatchSet, weights: LossWeights, training: bool = True
):
    """Composite loss on the main head and gradients for every trunk layer.

    Returns (LossResult, per-layer grad dicts, per-layer caches).
    """
    caches: list[dict] = []
    out, _ = g.run_trunk(x, caches, training)
    res = composite_loss(out, data.cls, data.center, data.visibility, data.concealed, weights)
    grad = res.grad.astype(out.dtype)
    grads: list[dict] = [{} for _ in g.layers]
    for i in range(len(g.layers) - 1, -1, -1):
        grad, grads[i] = g.layers[i].backward(caches[i], grad)
    return res, grads, caches


def ee_loss_and_grads(g: G.ModelGraph, x: np.ndarray, data: PatchSet, weights: LossWeights):
    """Confidence loss on the exit logit; gradients for the branch layers only."""
    _, tap = g.run_trunk(x, stop=g.ee_tap)
    caches: list[dict] = []
    out = g.run_branch(tap, caches, training=True)
    res = composite_loss(out[:, 0], data.cls, None, data.visibility, data.concealed, weights)
    grad = res.grad.astype(out.dtype)[:, None]
    grads: list[dict] = [{} for _ in g.ee_branch]
    for i in range(len(g.ee_branch) - 1, -1, -1):
        grad, grads[i] = g.ee_branch[i].backward(caches[i], grad)
    return res, grads


def _augmented_batch(data: PatchSet, idx: np.ndarray, phase: int, strength: float, rng: np.random.Generator):
    x = data.images(idx)
    batch = data[idx]
    if strength <= 0:
        return x, batch
    draws = [sample_draw(phase, rng, strength) for _ in idx]
    x = apply_draws(x, draws)
    for j, d in enumerate(draws):
        if batch.cls[j] == 1:
            new = transform_label(batch[j].label, d)
            batch.center[j], batch.bbox[j] = new.center, new.bbox
    return x, batch


def _precision_recall(pred: np.ndarray, cls: np.ndarray) -> tuple[float, float]:
    tp = int(np.sum(pred & (cls == 1)))
    fp = int(np.sum(pred & (cls == 0)))
    fn = int(np.sum(~pred & (cls == 1)))
    return (tp / (tp + fp) if tp + fp else 1.0), (tp / (tp + fn) if tp + fn else 1.0)


def evaluate_main_loss(g: G.ModelGraph, data: PatchSet, weights: LossWeights, tau: float = 0.5, chunk: int = 1024):
    """Validation composite loss, precision and recall of the main head (inference mode)."""
    outs = [g.main_logits(data.images(slice(i, i + chunk))) for i in range(0, len(data), chunk)]
    out = np.concatenate(outs)
    res = composite_loss(out, data.cls, data.center, data.visibility, data.concealed, weights)
    p, r = _precision_recall(G.logistic(out[:, 0]) >= tau, data.cls)
    return res.loss, p, r


def evaluate_ee_loss(g: G.ModelGraph, data: PatchSet, weights: LossWeights, tau: float = 0.5, chunk: int = 1024):
    z = np.concatenate([g.ee_logits(data.images(slice(i, i + chunk))) for i in range(0, len(data), chunk)])
    res = composite_loss(z, data.cls, None, data.visibility, data.concealed, weights)
    p, r = _precision_recall(G.logistic(z) >= tau, data.cls)
    return res.loss, p, r


def _snapshot(layers: list[Layer]) -> list[dict[str, np.ndarray]]:
    return [{k: v.copy() for k, v in layer.params.items()} for layer in layers]


def _restore(layers: list[Layer], snap: list[dict[str, np.ndarray]]) -> None:
    for layer, params in zip(layers, snap):
        layer.params = {k: v.copy() for k, v in params.items()}


def _fit(
    g: G.ModelGraph,
    layers: list[Layer],
    train_set: PatchSet,
    val_set: PatchSet | None,
    config: TrainConfig,
    step_fn: Callable,
    val_fn: Callable,
    augment: bool,
    progress: Callable[[dict], None] | None,
    on_step: Callable[[int, float], None] | None,
) -> tuple[G.ModelGraph, list[dict]]:
    rng = np.random.default_rng(config.seed)
    opt = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
    history: list[dict] = []
    best, best_loss, since_best = None, np.inf, 0
    steps = 0
    for epoch in range(config.epochs):
        phase = 1 if epoch < config.phase_boundary else 2
        if not augment:
            strength = 0.0
        elif phase == 1:
            strength = min(1.0, (epoch + 1) / max(config.phase_boundary, 1))
        else:
            strength = 1.0
        opt.lr = config.lr_at(epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            x, batch = _augmented_batch(train_set, idx, phase, strength, rng)
            loss = step_fn(x, batch, opt)
            losses.append(loss)
            if on_step is not None:
                on_step(steps, loss)
            steps += 1
            if config.max_steps is not None and steps >= config.max_steps:
                break
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": opt.lr, "phase": phase}
        if val_set is not None and len(val_set):
            row["val_loss"], row["val_precision"], row["val_recall"] = val_fn(val_set)
        else:
            row["val_loss"] = row["train_loss"]
            row["val_precision"] = row["val_recall"] = float("nan")
        history.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) if isinstance(v, float) else v for k, v in row.items()})
        if progress is not None:
            progress(row)
        if row["val_loss"] < best_loss:
            best, best_loss, since_best = _snapshot(layers), row["val_loss"], 0
        else:
            since_best += 1
        if config.checkpoint_every and config.checkpoint_path and (epoch + 1) % config.checkpoint_every == 0:
            from .weights import save_weights

            save_weights(g, config.checkpoint_path)
        if since_best >= config.patience:
            log.info("early stop after epoch %d", epoch)
            break
        if config.max_steps is not None and steps >= config.max_steps:
            break
    if best is not None:
        _restore(layers, best)
    return g, history


def train_main(
    g: G.ModelGraph,
    train_set: PatchSet,
    val_set: PatchSet | None = None,
    config: TrainConfig | None = None,
    weights: LossWeights | None = None,
    progress: Callable[[dict], None] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[G.ModelGraph, list[dict]]:
    """Train the trunk on the composite loss; returns a trained copy and per-epoch history.

    Stops early when the validation loss has not improved for ``patience``
    epochs and restores the best weights seen.
    """
    if not len(train_set):
        raise UsageError("cannot train on an empty dataset")
    config = config or TrainConfig()
    weights = weights or LossWeights()
    g = copy.deepcopy(g)

    def step(x, batch, opt):
        res, grads, caches = main_loss_and_grads(g, x, batch, weights, training=True)
        clip_by_global_norm(grads, config.clip_norm)
        opt.step(g.layers, grads)
        for layer, cache in zip(g.layers, caches):
            layer.update_running_stats(cache, config.bn_momentum)
        return res.loss

    def val(v):
        return evaluate_main_loss(g, v, weights, config.tau_accept)

    return _fit(g, g.layers, train_set, val_set, config, step, val, config.augment, progress, on_step)


def train_early_exit(
    g_frozen: G.ModelGraph,
    train_set: PatchSet,
    val_set: PatchSet | None = None,
    config: TrainConfig | None = None,
    weights: LossWeights | None = None,
    augment: bool = False,
    progress: Callable[[dict], None] | None = None,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[G.ModelGraph, list[dict]]:
    """Train only the exit branch with the confidence loss (false negatives weighted up)."""
    if g_frozen.ee_tap is None:
        raise UsageError("graph has no early exit to train")
    if not all(layer.frozen for layer in g_frozen.layers):
        raise UsageError("trunk must be frozen before training the early exit")
    if not len(train_set):
        raise UsageError("cannot train on an empty dataset")
    config = config or TrainConfig()
    weights = weights or LossWeights.early_exit()
    g = copy.deepcopy(g_frozen)

    def step(x, batch, opt):
        res, grads = ee_loss_and_grads(g, x, batch, weights)
        clip_by_global_norm(grads, config.clip_norm)
        opt.step(g.ee_branch, grads)
        return res.loss

    def val(v):
        return evaluate_ee_loss(g, v, weights, 0.5)

    return _fit(g, g.ee_branch, train_set, val_set, config, step, val, augment, progress, on_step)


def write_history_csv(history: list[dict], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
        w.writeheader()
        w.writerows(history)
