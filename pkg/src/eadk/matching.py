"""Query-to-ground-truth cost matrix and optimal bipartite assignment."""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ContractError
from .geometry import cxcywh_to_xyxy, generalized_box_iou

DEFAULT_WEIGHTS = (1.0, 5.0, 2.0)


@dataclass(frozen=True)
class Assignment:
    """Matched (prediction, ground truth) index pairs, ordered by ground truth."""

    pred_idx: np.ndarray
    gt_idx: np.ndarray
    cost: float

    @property
    def pairs(self):
        return list(zip(self.pred_idx.tolist(), self.gt_idx.tolist()))

    def __len__(self):
        return len(self.gt_idx)


def focal_cost(p, alpha=0.25, gamma=2.0, eps=1e-8):
    """Positive-minus-negative focal cost of labelling probability ``p`` positive."""
    p = np.clip(np.asarray(p, dtype=np.float64), eps, 1 - eps)
    pos = alpha * (1 - p) ** gamma * -np.log(p)
    neg = (1 - alpha) * p**gamma * -np.log(1 - p)
    return pos - neg


def build_cost_matrix(
    probs,
    pred_boxes,
    gt_boxes,
    gt_classes,
    layout,
    weights=DEFAULT_WEIGHTS,
    token_agg="mean",
    alpha=0.25,
    gamma=2.0,
):
    """Cost of assigning each prediction (rows) to each ground truth (columns).

    ``probs`` is the N_I x N_T token-probability matrix, boxes are cxcywh.
    The class term averages (or maxes) the focal cost over the class's
    token columns.  Inputs are plain arrays; nothing here is differentiated.
    """
    probs = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    pred_boxes = np.asarray(getattr(pred_boxes, "data", pred_boxes), dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.intp).reshape(-1)
    if len(gt_classes) == 0:
        raise ContractError("cost matrix needs at least one ground-truth object")
    if probs.shape[1] != layout.num_tokens:
        raise ContractError(f"probability matrix has {probs.shape[1]} tokens, layout expects {layout.num_tokens}")
    per_token = focal_cost(probs, alpha, gamma)
    cols = np.stack([per_token[:, layout.token_slice(c)] for c in gt_classes], axis=1)
    if token_agg == "mean":
        cls_cost = cols.mean(axis=2)
    elif token_agg == "max":
        cls_cost = cols.max(axis=2)
    else:
        raise ContractError(f"token_agg must be 'mean' or 'max', got {token_agg!r}")
    l1 = np.abs(pred_boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    g = generalized_box_iou(cxcywh_to_xyxy(pred_boxes), cxcywh_to_xyxy(gt_boxes))
    w_cls, w_l1, w_giou = weights
    return w_cls * cls_cost + w_l1 * l1 + w_giou * (1.0 - g)


def _solve(cost):
    rows, col_pot, row_pot = kernels.assignment_core(cost)
    return rows, float(cost[rows, np.arange(cost.shape[1])].sum()), col_pot, row_pot


def _solve_fixed(cost, fixed):
    """Optimal assignment with the columns in ``fixed`` pinned to given rows."""
    n, m = cost.shape
    rows = np.full(m, -1, dtype=np.intp)
    for j, r in fixed.items():
        rows[j] = r
    free_cols = [j for j in range(m) if j not in fixed]
    if free_cols:
        taken = set(fixed.values())
        free_rows = [i for i in range(n) if i not in taken]
        sub = cost[np.ix_(free_rows, free_cols)]
        sub_rows, _, _ = kernels.assignment_core(sub)
        for k, j in enumerate(free_cols):
            rows[j] = free_rows[sub_rows[k]]
    return rows, float(cost[rows, np.arange(m)].sum())


def hungarian(cost):
    """Minimum-cost injection of ground-truth columns into prediction rows.

    Among all optimal assignments the one whose vector of prediction indices
    (ordered by ground-truth index) is lexicographically smallest is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ContractError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if m == 0:
        return Assignment(np.zeros(0, np.intp), np.zeros(0, np.intp), 0.0)
    if n < m:
        raise ContractError(f"need at least as many predictions as ground truths, got {n} < {m}")
    if not np.all(np.isfinite(cost)):
        raise ContractError("cost matrix contains non-finite entries")

    rows, total, col_pot, row_pot = _solve(cost)
    tol = 1e-12 * max(1.0, abs(total), float(np.abs(cost).max()))
    # an edge with positive reduced cost cannot appear in any optimal assignment
    reduced = cost - col_pot[None, :] - row_pot[:, None]
    fixed = {}
    for j in range(m):
        for r in range(rows[j]):
            if r in fixed.values() or reduced[r, j] > tol:
                continue
            cand, cand_total = _solve_fixed(cost, {**fixed, j: r})
            if cand_total <= total + tol:
                rows = cand
                break
        fixed[j] = int(rows[j])
    gt_idx = np.arange(m, dtype=np.intp)
    return Assignment(rows.astype(np.intp), gt_idx, float(cost[rows, gt_idx].sum()))
