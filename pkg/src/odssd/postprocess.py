"""Raw network scores to detections: softmax, NMS, paired-box assembly."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import codec
from .codec import DEFAULT_CLASSES
from .geometry import BBox
from .model import ModelConfig


@dataclass
class Detection:
    class_id: int
    label: str
    score: float
    left_box: BBox
    dx: float
    dy: float

    @property
    def right_box(self) -> BBox:
        # same object in the right view sits (dx, dy) to the left/up
        return self.left_box.shifted(-self.dx, -self.dy)

    @property
    def display_disparity(self) -> tuple[int, int]:
        return int(round(self.dx)), int(round(self.dy))


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
        top_k: int | None = None) -> list[int]:
    """Greedy hard suppression; returns kept indices, score-descending.

    Ties break toward the lower input index, so the result is independent
    of input ordering for distinct scores.
    """
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError(f"{boxes.shape[0]} boxes vs {scores.shape[0]} scores")
    order = np.argsort(-scores, kind="stable")
    kept: list[int] = []
    areas = (boxes[:, 2] - boxes[:, 0]).clip(min=0) * \
            (boxes[:, 3] - boxes[:, 1]).clip(min=0)
    suppressed = np.zeros(len(order), dtype=bool)
    for oi, i in enumerate(order):
        if suppressed[oi]:
            continue
        kept.append(int(i))
        if top_k is not None and len(kept) >= top_k:
            break
        rest = order[oi + 1:]
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            ious = np.where(union > 0, inter / union, 0.0)
        suppressed[oi + 1:] |= ious > iou_threshold
    return kept


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def detect(confidences: np.ndarray, locations: np.ndarray, priors: np.ndarray,
           config: ModelConfig,
           class_names: tuple[str, ...] | None = None) -> list[list[Detection]]:
    """Decode raw forward() outputs into per-image detection lists.

    Per non-background class: softmax score threshold, decode, class-wise
    NMS; then a global top_k cap, score-descending.
    """
    if class_names is None:
        class_names = codec.padded_classes(config.num_classes)
    scores = softmax(np.asarray(confidences, dtype=np.float64), axis=2)
    boxes_px, dx_px, dy_px, _ = codec.decode_locations(locations, priors, config)

    results: list[list[Detection]] = []
    for n in range(scores.shape[0]):
        dets: list[Detection] = []
        for c in range(1, len(class_names)):
            cls_scores = scores[n, :, c]
            mask = cls_scores >= config.score_threshold
            if not mask.any():
                continue
            idx = np.nonzero(mask)[0]
            keep = nms(boxes_px[n, idx], cls_scores[idx],
                       config.nms_iou_threshold, config.top_k)
            for k in keep:
                pi = idx[k]
                b = boxes_px[n, pi]
                dets.append(Detection(
                    class_id=c, label=class_names[c],
                    score=float(cls_scores[pi]),
                    left_box=BBox(*(float(v) for v in b)),
                    dx=float(dx_px[n, pi]), dy=float(dy_px[n, pi])))
        dets.sort(key=lambda d: -d.score)
        results.append(dets[: config.top_k])
    return results


# ---------------------------------------------------------------------------
# detection record file: one tab-separated row per detection

def write_detections(path, per_image: dict[str, list[Detection]]) -> None:
    lines = []
    for image_id in sorted(per_image):
        for d in per_image[image_id]:
            b = d.left_box
            lines.append("\t".join([
                image_id, d.label, repr(d.score),
                repr(b.xmin), repr(b.ymin), repr(b.xmax), repr(b.ymax),
                repr(d.dx), repr(d.dy)]))
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_detections(path, class_names=DEFAULT_CLASSES) -> dict[str, list[Detection]]:
    per_image: dict[str, list[Detection]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 9:
            raise ValueError(f"bad detection record: {line!r}")
        image_id, label, score, x0, y0, x1, y1, dx, dy = parts
        per_image.setdefault(image_id, []).append(Detection(
            class_id=class_names.index(label), label=label, score=float(score),
            left_box=BBox(float(x0), float(y0), float(x1), float(y1)),
            dx=float(dx), dy=float(dy)))
    return per_image
