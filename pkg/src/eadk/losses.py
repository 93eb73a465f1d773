"""Focal token classification loss, matched box losses and their weighted sum."""
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError
from .geometry import box_losses
from .matching import DEFAULT_WEIGHTS

PROB_EPS = 1e-8


@dataclass
class LossBreakdown:
    cls: ad.Tensor
    l1: ad.Tensor
    giou: ad.Tensor
    total: ad.Tensor

    def values(self):
        return {k: getattr(self, k).item() for k in ("total", "cls", "l1", "giou")}


def focal_loss(p, target, alpha=0.25, gamma=2.0):
    """Element-wise sigmoid focal loss on probabilities ``p`` (clamped to [1e-8, 1 - 1e-8])."""
    p = ad.clip(p, PROB_EPS, 1 - PROB_EPS)
    t = np.asarray(target, dtype=np.float64)
    one_minus = 1.0 - p
    pos = ad.log(p) * (one_minus**gamma) * (-alpha)
    neg = ad.log(one_minus) * (p**gamma) * (-(1 - alpha))
    return pos * t + neg * (1.0 - t)


def focal_loss_logits(z, target, alpha=0.25, gamma=2.0):
    """Same loss as ``focal_loss(sigmoid(z))`` but evaluated from logits.

    No clamping is needed, so saturated wrong predictions keep a gradient.
    """
    t = np.asarray(target, dtype=np.float64)
    p = ad.sigmoid(z)
    q = ad.sigmoid(-z)
    pos = ad.softplus(-z) * (q**gamma) * alpha
    neg = ad.softplus(z) * (p**gamma) * (1 - alpha)
    return pos * t + neg * (1.0 - t)


def build_targets(assignment, gt_classes, layout, num_queries):
    """0/1 matrix marking every token of the matched class on matched query rows."""
    target = np.zeros((num_queries, layout.num_tokens))
    if assignment is None:
        return target
    gt_classes = np.asarray(gt_classes, dtype=np.intp)
    for q, g in zip(assignment.pred_idx, assignment.gt_idx):
        if not 0 <= q < num_queries or not 0 <= g < len(gt_classes):
            raise ContractError(f"assignment pair ({q}, {g}) out of range")
        target[q, layout.token_slice(int(gt_classes[g]))] = 1.0
    return target


def batch_loss(scores, boxes, targets, assignments, layout, weights=DEFAULT_WEIGHTS, alpha=0.25, gamma=2.0,
               from_logits=False):
    """Sum of per-image losses over a batch.

    ``scores`` (B, N_I, N_T) holds probabilities, or logits when
    ``from_logits`` is set; ``boxes`` (B, N_I, 4) is a tensor;
    ``targets`` is a list of ``(gt_boxes cxcywh, gt_classes)`` per image and
    ``assignments`` the matching result per image (None when there is no
    ground truth).
    """
    b, n_q, _ = scores.shape
    tgt = np.zeros(scores.shape)
    norm = np.ones(b)
    pair_img, pair_q, pair_boxes, pair_w = [], [], [], []
    for i, ((gt_boxes, gt_classes), asg) in enumerate(zip(targets, assignments)):
        if asg is None or len(asg) == 0:
            continue
        tgt[i] = build_targets(asg, gt_classes, layout, n_q)
        n = len(asg)
        norm[i] = max(1, n)
        pair_img += [i] * n
        pair_q += asg.pred_idx.tolist()
        pair_boxes.append(np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)[asg.gt_idx])
        pair_w += [1.0 / n] * n

    focal = focal_loss_logits if from_logits else focal_loss
    per_elem = focal(scores, tgt, alpha, gamma)
    cls = (per_elem.sum(axis=2).sum(axis=1) * (1.0 / norm)).sum()
    if pair_img:
        matched = boxes[np.asarray(pair_img), np.asarray(pair_q)]
        l1_each, giou_each = box_losses(matched, np.concatenate(pair_boxes))
        w = np.asarray(pair_w)
        l1 = (l1_each * w).sum()
        giou = (giou_each * w).sum()
    else:
        l1 = ad.Tensor(0.0)
        giou = ad.Tensor(0.0)
    w_cls, w_l1, w_giou = weights
    total = cls * w_cls + l1 * w_l1 + giou * w_giou
    return LossBreakdown(cls, l1, giou, total)


def total_loss(probs, boxes, gt_boxes, gt_classes, assignment, layout, weights=DEFAULT_WEIGHTS, alpha=0.25, gamma=2.0):
    """Loss for one image: ``probs`` (N_I, N_T), ``boxes`` (N_I, 4)."""
    if probs.ndim == 2:
        probs = probs.reshape(1, *probs.shape)
        boxes = boxes.reshape(1, *boxes.shape)
    return batch_loss(probs, boxes, [(gt_boxes, gt_classes)], [assignment], layout, weights, alpha, gamma)


def combine(cls, l1, giou, weights=DEFAULT_WEIGHTS):
    """Weighted total from already-computed components."""
    w_cls, w_l1, w_giou = weights
    return w_cls * cls + w_l1 * l1 + w_giou * giou
