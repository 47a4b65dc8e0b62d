"""Prior matching, 6-dim target encode/decode, and the training loss.

Locations are regressed in SSD center-form offsets extended by two
disparity channels: dx is normalized by view width then by prior width,
dy by view height then prior height, both with the center variance, so
all six channels sit at comparable magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import StereoObject
from .model import ModelConfig
from .tensor import Tensor

DEFAULT_CLASSES = ("background", "car", "person", "bike", "trafficsign")


def padded_classes(num_classes: int) -> tuple[str, ...]:
    """Class-name tuple sized to a head wider than the vocabulary."""
    if num_classes <= len(DEFAULT_CLASSES):
        return DEFAULT_CLASSES[:num_classes]
    return DEFAULT_CLASSES + tuple(
        f"class{i}" for i in range(len(DEFAULT_CLASSES), num_classes))

IOU_MATCH_THRESHOLD = 0.5
NEG_POS_RATIO = 3

# decoded log-size offsets are clamped here to keep exp() finite
MAX_LOG_SIZE = 10.0


@dataclass
class EncodedTargets:
    labels: np.ndarray        # [N, P] int, 0 = background
    loc_targets: np.ndarray   # [N, P, 6] float, defined where labels > 0
    warnings: list[str]


def corner_to_center(boxes: np.ndarray) -> np.ndarray:
    out = np.empty_like(boxes)
    out[..., 0] = (boxes[..., 0] + boxes[..., 2]) / 2
    out[..., 1] = (boxes[..., 1] + boxes[..., 3]) / 2
    out[..., 2] = boxes[..., 2] - boxes[..., 0]
    out[..., 3] = boxes[..., 3] - boxes[..., 1]
    return out


def center_to_corner(boxes: np.ndarray) -> np.ndarray:
    out = np.empty_like(boxes)
    out[..., 0] = boxes[..., 0] - boxes[..., 2] / 2
    out[..., 1] = boxes[..., 1] - boxes[..., 3] / 2
    out[..., 2] = boxes[..., 0] + boxes[..., 2] / 2
    out[..., 3] = boxes[..., 1] + boxes[..., 3] / 2
    return out


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form box arrays [G,4] x [P,4] -> [G,P]."""
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def match_priors(gt_boxes: np.ndarray, priors: np.ndarray,
                 iou_threshold: float = IOU_MATCH_THRESHOLD) -> np.ndarray:
    """Assign each prior a ground-truth index or -1 (background).

    gt_boxes: corner-form, normalized, [G,4]. priors: center-form [P,4].
    Every gt claims its best-IoU prior (forced positive, later gt wins a
    conflict); any other prior with IoU >= threshold to some gt takes its
    argmax gt. Ties break toward the lower index.
    """
    p = priors.shape[0]
    assign = np.full(p, -1, dtype=np.int64)
    if gt_boxes.shape[0] == 0:
        return assign
    ious = iou_matrix(gt_boxes, center_to_corner(priors))  # [G, P]

    best_gt = ious.argmax(axis=0)            # lowest gt index on ties
    best_iou = ious.max(axis=0)
    assign[best_iou >= iou_threshold] = best_gt[best_iou >= iou_threshold]
    forced = ious.argmax(axis=1)             # lowest prior index on ties
    for g, pi in enumerate(forced):
        assign[pi] = g
    return assign


def stereo_objects_to_arrays(gt: list[StereoObject], config: ModelConfig,
                             class_names=DEFAULT_CLASSES):
    """(corner boxes normalized [G,4], disparities px [G,2], labels [G])."""
    boxes, disps, labels = [], [], []
    vw, vh = config.view_w, config.view_h
    for obj in gt:
        b = obj.left_box
        boxes.append((b.xmin / vw, b.ymin / vh, b.xmax / vw, b.ymax / vh))
        disps.append((obj.disparity.dx, obj.disparity.dy))
        labels.append(class_names.index(obj.label))
    return (np.array(boxes, dtype=np.float64).reshape(-1, 4),
            np.array(disps, dtype=np.float64).reshape(-1, 2),
            np.array(labels, dtype=np.int64))


def encode_targets(assign: np.ndarray, gt_boxes: np.ndarray, gt_disp: np.ndarray,
                   gt_labels: np.ndarray, priors: np.ndarray,
                   config: ModelConfig) -> EncodedTargets:
    """Encode one image's matched ground truth into per-prior targets.

    gt_boxes corner-form normalized; gt_disp in view pixels.
    """
    var_c, var_s = config.variances
    p = priors.shape[0]
    labels = np.zeros(p, dtype=np.int64)
    loc = np.zeros((p, 6), dtype=np.float64)
    warnings: list[str] = []

    gt_center = corner_to_center(gt_boxes)
    degenerate = (gt_center[:, 2] <= 0) | (gt_center[:, 3] <= 0)
    for g in np.nonzero(degenerate)[0]:
        warnings.append(f"ground truth {g} has zero area; excluded")

    pos = assign >= 0
    if pos.any():
        gi = assign[pos]
        keep = ~degenerate[gi]
        idx = np.nonzero(pos)[0][keep]
        gi = gi[keep]
        g = gt_center[gi]
        pr = priors[idx]
        labels[idx] = gt_labels[gi]
        loc[idx, 0] = ((g[:, 0] - pr[:, 0]) / pr[:, 2]) / var_c
        loc[idx, 1] = ((g[:, 1] - pr[:, 1]) / pr[:, 3]) / var_c
        loc[idx, 2] = np.log(g[:, 2] / pr[:, 2]) / var_s
        loc[idx, 3] = np.log(g[:, 3] / pr[:, 3]) / var_s
        loc[idx, 4] = ((gt_disp[gi, 0] / config.view_w) / pr[:, 2]) / var_c
        loc[idx, 5] = ((gt_disp[gi, 1] / config.view_h) / pr[:, 3]) / var_c
    return EncodedTargets(labels[None], loc[None], warnings)


def decode_locations(locations: np.ndarray, priors: np.ndarray,
                     config: ModelConfig):
    """Invert the encoding: ([...,P,6]) -> (corner boxes px, dx px, dy px).

    Overflowing size exponents are clamped; the returned flag says whether
    any clamp fired.
    """
    var_c, var_s = config.variances
    loc = np.asarray(locations, dtype=np.float64)
    cx = loc[..., 0] * var_c * priors[:, 2] + priors[:, 0]
    cy = loc[..., 1] * var_c * priors[:, 3] + priors[:, 1]
    log_w = loc[..., 2] * var_s
    log_h = loc[..., 3] * var_s
    clamped = bool((np.abs(log_w) > MAX_LOG_SIZE).any()
                   or (np.abs(log_h) > MAX_LOG_SIZE).any())
    w = np.exp(np.clip(log_w, -MAX_LOG_SIZE, MAX_LOG_SIZE)) * priors[:, 2]
    h = np.exp(np.clip(log_h, -MAX_LOG_SIZE, MAX_LOG_SIZE)) * priors[:, 3]
    vw, vh = config.view_w, config.view_h
    boxes = np.stack([(cx - w / 2) * vw, (cy - h / 2) * vh,
                      (cx + w / 2) * vw, (cy + h / 2) * vh], axis=-1)
    dx = loc[..., 4] * var_c * priors[:, 2] * vw
    dy = loc[..., 5] * var_c * priors[:, 3] * vh
    return boxes, dx, dy, clamped


# ---------------------------------------------------------------------------
# loss

def _cross_entropy_rows(conf: Tensor, rows: np.ndarray, labels: np.ndarray) -> Tensor:
    """Summed softmax cross-entropy over selected flat (image,prior) rows."""
    n, p, k = conf.shape
    logits = conf.data.reshape(n * p, k)[rows]
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    losses = lse - logits[np.arange(rows.size), labels]
    out = Tensor(np.array([losses.sum()], dtype=conf.dtype))

    def bwd(g_out: np.ndarray):
        g = g_out.reshape(-1)[0]
        soft = np.exp(logits - lse[:, None])
        soft[np.arange(rows.size), labels] -= 1.0
        grad = np.zeros((n * p, k), dtype=conf.dtype)
        np.add.at(grad, rows, (soft * g).astype(conf.dtype))
        return [grad.reshape(n, p, k)]

    return T.record("cross_entropy_rows", out, [conf], bwd)


def _smooth_l1_rows(loc: Tensor, rows: np.ndarray, targets: np.ndarray,
                    channel_weights: np.ndarray | None = None) -> Tensor:
    """Summed smooth-L1 over selected rows, optionally weighted per channel."""
    n, p, d = loc.shape
    pred = loc.data.reshape(n * p, d)[rows]
    diff = pred - targets
    a = np.abs(diff)
    per = np.where(a < 1.0, 0.5 * diff * diff, a - 0.5)
    w = np.ones(d) if channel_weights is None else np.asarray(channel_weights)
    out = Tensor(np.array([(per * w).sum()], dtype=loc.dtype))

    def bwd(g_out: np.ndarray):
        g = g_out.reshape(-1)[0]
        d_diff = np.clip(diff, -1.0, 1.0) * w * g
        grad = np.zeros((n * p, d), dtype=loc.dtype)
        np.add.at(grad, rows, d_diff.astype(loc.dtype))
        return [grad.reshape(n, p, d)]

    return T.record("smooth_l1_rows", out, [loc], bwd)


def select_hard_negatives(background_losses: np.ndarray, labels: np.ndarray,
                          neg_pos_ratio: int) -> np.ndarray:
    """Flat indices of the hardest background priors, per image.

    background_losses, labels: [N, P]. Keeps ratio * (positives in that
    image) negatives, ranked by loss descending, ties to lower index.
    """
    n, p = labels.shape
    chosen = []
    for i in range(n):
        n_pos = int((labels[i] > 0).sum())
        neg_idx = np.nonzero(labels[i] == 0)[0]
        if n_pos == 0 or neg_idx.size == 0:
            continue
        order = np.argsort(-background_losses[i, neg_idx], kind="stable")
        take = neg_idx[order[: neg_pos_ratio * n_pos]]
        chosen.extend(i * p + int(j) for j in take)
    return np.array(sorted(chosen), dtype=np.int64)


def multibox_disparity_loss(confidences: Tensor, locations: Tensor,
                            targets: EncodedTargets,
                            neg_pos_ratio: int = NEG_POS_RATIO,
                            disparity_weight: float = 1.0):
    """(1/N_pos) * [cross-entropy over positives + hardest negatives
    + smooth-L1 over positive locations, all six dims].

    Returns (scalar loss Tensor, breakdown dict).
    """
    labels, loc_targets = targets.labels, targets.loc_targets
    n, p, k = confidences.shape
    if locations.shape != (n, p, 6) or labels.shape != (n, p):
        raise T.ShapeError(
            f"loss shape mismatch: conf {confidences.shape}, "
            f"loc {locations.shape}, labels {labels.shape}")

    pos_mask = labels > 0
    n_pos = int(pos_mask.sum())
    if n_pos == 0:
        zero = Tensor(np.zeros(1, dtype=confidences.dtype))
        return zero, {"classification": 0.0, "regression": 0.0,
                      "n_pos": 0, "warning": "no positive priors in batch"}

    # rank negatives by their background cross-entropy (selection carries
    # no gradient)
    logits = confidences.data
    m = logits.max(axis=2, keepdims=True)
    lse = m[..., 0] + np.log(np.exp(logits - m).sum(axis=2))
    bg_loss = lse - logits[..., 0]
    neg_rows = select_hard_negatives(bg_loss, labels, neg_pos_ratio)

    pos_rows = np.nonzero(pos_mask.reshape(-1))[0]
    cls_rows = np.concatenate([pos_rows, neg_rows])
    cls_labels = np.concatenate(
        [labels.reshape(-1)[pos_rows], np.zeros(neg_rows.size, dtype=np.int64)])

    ce = _cross_entropy_rows(confidences, cls_rows, cls_labels)
    weights = np.array([1.0, 1.0, 1.0, 1.0, disparity_weight, disparity_weight])
    sl1 = _smooth_l1_rows(locations, pos_rows,
                          loc_targets.reshape(-1, 6)[pos_rows], weights)
    total = T.scale(T.add(ce, sl1), 1.0 / n_pos)
    breakdown = {"classification": ce.item() / n_pos,
                 "regression": sl1.item() / n_pos,
                 "n_pos": n_pos, "n_neg": int(neg_rows.size)}
    return total, breakdown
