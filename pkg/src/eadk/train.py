"""Optimizer, augmentation and the two training loops.

``pretrain`` fits every detector parameter plus a base-class table.
``adapt`` freezes the detector and fits only a fresh embedding table on a
handful of images.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from .detector import DetectorConfig, forward, init_embedding_table, init_weights
from .errors import ContractError, TrainingError
from .losses import batch_loss
from .matching import build_cost_matrix, hungarian

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 400
    batch_size: int = 4
    lr0: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    tokens_per_class: int = 4
    sigma_init: float = 0.02
    hflip: bool = True
    crop: bool = True
    crop_min_scale: float = 0.6
    loss_weights: tuple = (1.0, 5.0, 2.0)
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    token_agg: str = "mean"
    clip_norm: float = 0.0  # 0 disables gradient clipping
    warmup: int = 0  # linear warmup steps before the cosine decay
    aux_loss: bool = False  # also score every earlier decoder layer (pretraining only)
    channel_shuffle: float = 0.0  # probability of a random RGB channel permutation

    def __post_init__(self):
        if self.iterations < 1:
            raise ContractError("iterations must be >= 1")
        if self.lr0 <= 0:
            raise ContractError("lr0 must be positive")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


ADAPT_DEFAULTS = TrainConfig()
PRETRAIN_DEFAULTS = TrainConfig(iterations=9000, batch_size=8, lr0=1e-3, weight_decay=1e-4, clip_norm=1.0,
                                warmup=200, channel_shuffle=0.5)


def cosine_lr(step, total_steps, lr0):
    """lr0 * (1 + cos(pi * step / total_steps)) / 2."""
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0

    @classmethod
    def for_params(cls, params):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], 0)


def adamw_step(params, grads, state, lr, config=ADAPT_DEFAULTS, step=None):
    """One AdamW update in place, with bias correction and decoupled decay."""
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite gradient", step=step if step is not None else state.t)
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.data.shape != g.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.data.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if config.weight_decay:
            p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return params, state


# -- augmentation ----------------------------------------------------------
def hflip(image, boxes):
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    boxes[:, 0] = 1.0 - boxes[:, 0]
    return image[:, ::-1].copy(), boxes


def crop(image, boxes, classes, x0, y0, side):
    """Square crop at pixel (x0, y0), resized back by nearest neighbour.

    Keeps objects whose centre lies inside the crop and clips them to it.
    """
    size = image.shape[0]
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) * size
    cx, cy = boxes[:, 0], boxes[:, 1]
    keep = (cx >= x0) & (cx < x0 + side) & (cy >= y0) & (cy < y0 + side)
    b = boxes[keep]
    x1 = np.clip(b[:, 0] - b[:, 2] / 2, x0, x0 + side)
    x2 = np.clip(b[:, 0] + b[:, 2] / 2, x0, x0 + side)
    y1 = np.clip(b[:, 1] - b[:, 3] / 2, y0, y0 + side)
    y2 = np.clip(b[:, 1] + b[:, 3] / 2, y0, y0 + side)
    new = np.stack([(x1 + x2) / 2 - x0, (y1 + y2) / 2 - y0, x2 - x1, y2 - y1], axis=1) / side
    src = ((np.arange(size) + 0.5) * side / size).astype(np.intp)
    out = image[y0:y0 + side, x0:x0 + side][src][:, src]
    return out, new, np.asarray(classes)[keep]


def augment(image, boxes, classes, rng, config=ADAPT_DEFAULTS, force_flip=None, crop_scale=None):
    """Random horizontal flip (p = 0.5) and random square crop.

    With probability ``config.channel_shuffle`` the RGB channels are also
    permuted at random, so colour alone cannot carry the class.
    """
    image, boxes, classes = _flip_crop(image, boxes, classes, rng, config, force_flip, crop_scale)
    if config.channel_shuffle > 0 and rng.random() < config.channel_shuffle:
        image = image[..., rng.permutation(3)]
    return image, boxes, classes


def _flip_crop(image, boxes, classes, rng, config, force_flip, crop_scale):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.intp)
    do_flip = (rng.random() < 0.5) if force_flip is None else force_flip
    if config.hflip and do_flip:
        image, boxes = hflip(image, boxes)
    if not config.crop and crop_scale is None:
        return image, boxes, classes
    size = image.shape[0]
    for _ in range(10):
        scale = rng.uniform(config.crop_min_scale, 1.0) if crop_scale is None else crop_scale
        side = max(1, min(size, int(round(scale * size))))
        if side == size:
            return image, boxes, classes
        x0 = int(rng.integers(0, size - side + 1))
        y0 = int(rng.integers(0, size - side + 1))
        out, new_boxes, new_classes = crop(image, boxes, classes, x0, y0, side)
        if len(new_classes) or not len(classes):
            return out, new_boxes, new_classes
    return image, boxes, classes


# -- sampling ---------------------------------------------------------------
def few_shot_sample(dataset_size, k, seed):
    """k distinct image indices drawn uniformly without replacement."""
    n = dataset_size if isinstance(dataset_size, int) else len(dataset_size)
    if not 1 <= k <= n:
        raise ContractError(f"cannot draw {k} shots from {n} images")
    rng = np.random.default_rng([int(seed), int(k), 0x5EED])
    return sorted(rng.choice(n, size=k, replace=False).tolist())


# -- training loops ----------------------------------------------------------
def match_batch(probs, boxes, targets, layout, config):
    assignments = []
    for b, (gt_boxes, gt_classes) in enumerate(targets):
        if len(gt_classes) == 0:
            assignments.append(None)
            continue
        cost = build_cost_matrix(probs[b], boxes[b], gt_boxes, gt_classes, layout, config.loss_weights,
                                 config.token_agg, config.focal_alpha, config.focal_gamma)
        assignments.append(hungarian(cost))
    return assignments


def step_loss(images, targets, table, weights, config, step=None):
    """Forward, match and score one batch; returns the LossBreakdown."""
    out = forward(images, table, weights)
    if not (np.all(np.isfinite(out.logits.data)) and np.all(np.isfinite(out.boxes.data))):
        raise TrainingError("non-finite detector output", step=step)
    heads = [(out.logits, out.boxes)] + (out.aux if config.aux_loss else [])
    losses = None
    for logits, boxes in heads:
        assignments = match_batch(ad.sigmoid(logits).data, boxes.data, targets, table.layout, config)
        part = batch_loss(logits, boxes, targets, assignments, table.layout, config.loss_weights,
                          config.focal_alpha, config.focal_gamma, from_logits=True)
        if losses is None:
            losses = part
        else:
            losses.total = losses.total + part.total
    return losses


def _clip(grads, max_norm):
    if not max_norm:
        return grads
    total = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm:
        return [g * (max_norm / total) for g in grads]
    return grads


def _batch(dataset, indices, rng, config):
    images, targets = [], []
    for i in indices:
        img, boxes, classes = augment(dataset.images[i], dataset.boxes[i], dataset.classes[i], rng, config)
        images.append(img)
        targets.append((boxes, classes))
    return np.stack(images), targets


def _run(params, table, weights, dataset, config, pool, rng, callback, label):
    state = OptimizerState.for_params(params)
    history = []
    for it in range(config.iterations):
        lr = cosine_lr(it, config.iterations, config.lr0)
        if it < config.warmup:
            lr *= (it + 1) / config.warmup
        picks = rng.choice(pool, size=config.batch_size, replace=True)
        images, targets = _batch(dataset, picks, rng, config)
        losses = step_loss(images, targets, table, weights, config, step=it)
        value = losses.total.item()
        if not math.isfinite(value):
            raise TrainingError(f"{label} loss is {value}", step=it)
        grads = ad.backward(losses.total)
        g = _clip([grads.get(p, np.zeros_like(p.data)) for p in params], config.clip_norm)
        adamw_step(params, g, state, lr, config, step=it)
        record = losses.values()
        record["lr"] = lr
        history.append(record)
        if callback is not None:
            callback(it, record)
    return history


def pretrain(dataset, config=PRETRAIN_DEFAULTS, detector_config=None, init_seed=None, callback=None):
    """Train all detector weights and a base-class table on ``dataset``.

    Returns ``(weights, table, history)``; weights come back frozen.
    """
    if len(dataset) == 0:
        raise ContractError("pretraining needs a non-empty dataset")
    detector_config = detector_config or DetectorConfig()
    seed = config.seed if init_seed is None else init_seed
    weights = init_weights(detector_config, seed=seed).unfreeze()
    table = init_embedding_table(dataset.num_classes, config.tokens_per_class, detector_config.model_dim,
                                 seed=seed + 1, sigma=config.sigma_init)
    params = list(weights.params.values()) + [table.W]
    rng = np.random.default_rng([int(config.seed), 0xBA5E])
    history = _run(params, table, weights, dataset, config, np.arange(len(dataset)), rng, callback, "pretrain")
    weights.freeze()
    return weights, table, history


def adapt(weights, dataset, config=ADAPT_DEFAULTS, num_classes=None, callback=None):
    """Fit a fresh embedding table on the k images of ``dataset``; weights stay untouched."""
    if len(dataset) < 1:
        raise ContractError("adaptation needs at least one image")
    weights.freeze()
    num_classes = num_classes or dataset.num_classes
    table = init_embedding_table(num_classes, config.tokens_per_class, weights.config.model_dim,
                                 seed=config.seed, sigma=config.sigma_init)
    rng = np.random.default_rng([int(config.seed), 0xADA7])
    history = _run([table.W], table, weights, dataset, config, np.arange(len(dataset)), rng, callback, "adapt")
    return table, history


def with_overrides(config, **kwargs):
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
