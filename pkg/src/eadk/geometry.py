"""Box conversions, IoU / GIoU and the box regression losses.

Boxes are arrays whose last axis holds four numbers, either
``(cx, cy, w, h)`` or ``(x1, y1, x2, y2)``, as fractions of image size.
The numpy functions serve matching and evaluation; the ``*_t`` variants
operate on autodiff tensors and feed the training loss.
"""
import numpy as np

from . import autodiff as ad
from .errors import ContractError


def cxcywh_to_xyxy(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    if np.any(b[..., 2:] < 0):
        raise ContractError("box width/height must be non-negative")
    cx, cy, w, h = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes):
    b = np.asarray(boxes, dtype=np.float64)
    if np.any(b[..., 2] < b[..., 0]) or np.any(b[..., 3] < b[..., 1]):
        raise ContractError("corner boxes need x2 >= x1 and y2 >= y1")
    x1, y1, x2, y2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([(x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1], axis=-1)


def _area(b):
    return (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])


def _pairwise_terms(a, b):
    a = np.asarray(a, dtype=np.float64)[:, None, :]
    b = np.asarray(b, dtype=np.float64)[None, :, :]
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = _area(a) + _area(b) - inter
    enclose = (np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])) * (
        np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    )
    return inter, union, enclose


def box_iou(a, b):
    """Pairwise IoU between corner boxes ``a`` (N, 4) and ``b`` (M, 4)."""
    inter, union, _ = _pairwise_terms(np.reshape(a, (-1, 4)), np.reshape(b, (-1, 4)))
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def generalized_box_iou(a, b):
    """Pairwise GIoU between corner boxes ``a`` (N, 4) and ``b`` (M, 4).

    Zero-area unions give IoU 0; the enclosing-area penalty still applies
    when the enclosing box has area, else GIoU is 0.
    """
    inter, union, enclose = _pairwise_terms(np.reshape(a, (-1, 4)), np.reshape(b, (-1, 4)))
    iou = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
    penalty = np.where(enclose > 0, (enclose - union) / np.where(enclose > 0, enclose, 1.0), 0.0)
    return iou - penalty


def iou(a, b):
    return float(box_iou(a, b)[0, 0])


def giou(a, b):
    return float(generalized_box_iou(a, b)[0, 0])


# -- differentiable versions -----------------------------------------
def cxcywh_to_xyxy_t(boxes):
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    half_w, half_h = w * 0.5, h * 0.5
    return [cx - half_w, cy - half_h, cx + half_w, cy + half_h]


def giou_t(pred_xyxy, gt_xyxy):
    """Row-wise GIoU for paired boxes given as lists of four coordinate tensors."""
    px1, py1, px2, py2 = pred_xyxy
    gx1, gy1, gx2, gy2 = gt_xyxy
    iw = ad.relu(ad.minimum(px2, gx2) - ad.maximum(px1, gx1))
    ih = ad.relu(ad.minimum(py2, gy2) - ad.maximum(py1, gy1))
    inter = iw * ih
    union = (px2 - px1) * (py2 - py1) + (gx2 - gx1) * (gy2 - gy1) - inter
    enclose = (ad.maximum(px2, gx2) - ad.minimum(px1, gx1)) * (ad.maximum(py2, gy2) - ad.minimum(py1, gy1))
    # keep the function total on degenerate boxes
    union_ok = (union.data > 0).astype(np.float64)
    enc_ok = (enclose.data > 0).astype(np.float64)
    iou_v = inter * union_ok / (union + (1.0 - union_ok))
    penalty = (enclose - union) * enc_ok / (enclose + (1.0 - enc_ok))
    return iou_v - penalty


def box_losses(pred, gt):
    """L1 (summed over cx, cy, w, h) and ``1 - GIoU`` for paired boxes.

    ``pred`` is a Tensor of shape (K, 4), ``gt`` an array of the same shape,
    both in cxcywh.  Returns two Tensors of shape (K,).
    """
    pred = pred if isinstance(pred, ad.Tensor) else ad.Tensor(pred)
    gt = np.asarray(gt, dtype=np.float64).reshape(pred.shape)
    if np.any(gt[..., 2:] < 0):
        raise ContractError("box width/height must be non-negative")
    l1 = (pred - gt).abs().sum(axis=-1)
    gt_t = ad.Tensor(gt)
    g = giou_t(cxcywh_to_xyxy_t(pred), cxcywh_to_xyxy_t(gt_t))
    return l1, 1.0 - g
