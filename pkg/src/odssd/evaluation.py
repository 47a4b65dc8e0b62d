"""Evaluation protocol: dense-GT percentiles, precision/recall, error histogram."""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .annotation import DatasetIndex, doc_to_targets, parse_annotation
from .geometry import BBox, StereoObject, iou
from .postprocess import Detection

PR_IOU_THRESHOLD = 0.5

# classes absent from the KITTI dense disparity ground truth; excluded
# from precision/recall when dense-GT mode is on
DENSE_GT_MASKED_CLASSES = ("person", "bike")


class DisparityFormatError(ValueError):
    pass


@dataclass
class DisparityMap:
    """Per-pixel disparity with validity mask (invalid where raw PNG is 0)."""

    disparity: np.ndarray  # [H, W] float
    valid: np.ndarray      # [H, W] bool

    @property
    def width(self) -> int:
        return self.disparity.shape[1]

    @property
    def height(self) -> int:
        return self.disparity.shape[0]


@dataclass
class DetectionRow:
    image_id: str
    label: str
    confidence: float
    predicted_dx: float
    gt_dx: float | None
    kitti_95_dx: float | None = None
    kitti_97_dx: float | None = None


@dataclass
class EvalReport:
    total_images: int
    per_class_precision: dict[str, float]
    per_class_recall: dict[str, float]
    mean_abs_error: float
    max_abs_error: float
    histogram: list[int]           # unit bins [0,1), [1,2), ...
    rows: list[DetectionRow]
    matched_objects: int
    missing_files: list[str] = field(default_factory=list)
    dense_gt_used: bool = False


def read_disparity_gt(png_bytes: bytes) -> DisparityMap:
    """Decode a 16-bit single-channel disparity PNG: disparity = raw / 256,
    raw 0 marks an invalid pixel."""
    img = Image.open(io.BytesIO(png_bytes))
    if img.mode not in ("I", "I;16", "I;16B"):
        raise DisparityFormatError(
            f"expected 16-bit single-channel PNG, got mode {img.mode!r}")
    raw = np.asarray(img, dtype=np.uint32)
    if raw.ndim != 2:
        raise DisparityFormatError(f"expected one channel, got shape {raw.shape}")
    return DisparityMap(disparity=raw / 256.0, valid=raw > 0)


def bbox_percentile_disparity(dmap: DisparityMap, box: BBox, q: float) -> float | None:
    """Nearest-rank percentile of valid disparities inside the box.

    Sorted ascending, index ceil(q*n/100) - 1. Returns None when the box
    holds no valid pixel.
    """
    if not 0 < q <= 100:
        raise ValueError(f"percentile {q} outside (0, 100]")
    x0 = max(0, int(np.floor(box.xmin)))
    y0 = max(0, int(np.floor(box.ymin)))
    x1 = min(dmap.width, int(np.ceil(box.xmax)))
    y1 = min(dmap.height, int(np.ceil(box.ymax)))
    if x1 <= x0 or y1 <= y0:
        return None
    patch = dmap.disparity[y0:y1, x0:x1]
    mask = dmap.valid[y0:y1, x0:x1]
    vals = np.sort(patch[mask])
    if vals.size == 0:
        return None
    rank = int(np.ceil(q * vals.size / 100.0)) - 1
    return float(vals[rank])


def match_detections(dets: list[Detection], gts: list[StereoObject],
                     iou_threshold: float = PR_IOU_THRESHOLD):
    """Greedy score-descending matching of detections to ground truth.

    Returns (tp, fp, fn, matched pairs [(det, gt)]). One gt per detection;
    IoU on left boxes; ties to lower gt index.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken = [False] * len(gts)
    pairs: list[tuple[Detection, StereoObject]] = []
    fp = 0
    for di in order:
        d = dets[di]
        best, best_iou = -1, 0.0
        for gi, g in enumerate(gts):
            if taken[gi] or g.label != d.label:
                continue
            v = iou(d.left_box, g.left_box)
            if v > best_iou:  # strict: ties keep the lower gt index
                best, best_iou = gi, v
        if best >= 0 and best_iou >= iou_threshold:
            taken[best] = True
            pairs.append((d, gts[best]))
        else:
            fp += 1
    tp = len(pairs)
    fn = len(gts) - tp
    return tp, fp, fn, pairs


def disparity_error_histogram(errors: list[float]):
    """Unit-width bins [0,1), [1,2), ... plus mean and max."""
    if any(e < 0 for e in errors):
        raise ValueError("absolute errors must be >= 0")
    if not errors:
        return [], 0.0, 0.0
    nbins = max(1, int(np.ceil(max(errors))))
    if max(errors) == nbins:  # value exactly on the last edge
        nbins += 1
    bins = [0] * nbins
    for e in errors:
        bins[int(e)] += 1
    return bins, float(np.mean(errors)), float(np.max(errors))


def evaluate(index: DatasetIndex, detections: dict[str, list[Detection]],
             dense_gt_dir: str | Path | None = None,
             iou_threshold: float = PR_IOU_THRESHOLD) -> EvalReport:
    """Score detections against a dataset index of annotations.

    Absolute disparity error compares predicted dx to the annotated gt dx.
    With a dense-GT directory (16-bit PNGs named <image stem>.png), the
    95%/97% percentile columns are filled and classes absent from the
    dense ground truth are dropped from precision/recall.
    """
    dense_dir = Path(dense_gt_dir) if dense_gt_dir is not None else None
    missing: list[str] = []
    rows: list[DetectionRow] = []
    errors: list[float] = []
    cls_tp: dict[str, int] = {}
    cls_fp: dict[str, int] = {}
    cls_fn: dict[str, int] = {}
    total_images = 0

    for entry in index.entries:
        ann_path = Path(entry.annotation_path)
        if not ann_path.exists():
            missing.append(str(ann_path))
            continue
        total_images += 1
        doc = parse_annotation(ann_path.read_bytes())
        gts, _ = doc_to_targets(doc)
        image_id = Path(entry.image_path).stem
        dets = detections.get(image_id, [])

        dmap = None
        if dense_dir is not None:
            gt_png = dense_dir / (image_id + ".png")
            if gt_png.exists():
                dmap = read_disparity_gt(gt_png.read_bytes())
            else:
                missing.append(str(gt_png))
        if dmap is not None:
            dets = [d for d in dets if d.label not in DENSE_GT_MASKED_CLASSES]
            gts = [g for g in gts if g.label not in DENSE_GT_MASKED_CLASSES]

        tp, fp, fn, pairs = match_detections(dets, gts, iou_threshold)
        for d, g in pairs:
            errors.append(abs(d.dx - g.disparity.dx))
            cls_tp[d.label] = cls_tp.get(d.label, 0) + 1
            row = DetectionRow(image_id, d.label, d.score, d.dx, g.disparity.dx)
            if dmap is not None:
                row.kitti_95_dx = bbox_percentile_disparity(dmap, d.left_box, 95)
                row.kitti_97_dx = bbox_percentile_disparity(dmap, d.left_box, 97)
            rows.append(row)
        matched_dets = {id(d) for d, _ in pairs}
        for d in dets:
            if id(d) not in matched_dets:
                cls_fp[d.label] = cls_fp.get(d.label, 0) + 1
                rows.append(DetectionRow(image_id, d.label, d.score, d.dx, None))
        matched_gts = {id(g) for _, g in pairs}
        for g in gts:
            if id(g) not in matched_gts:
                cls_fn[g.label] = cls_fn.get(g.label, 0) + 1

    bins, mean_err, max_err = disparity_error_histogram(errors)
    classes = sorted(set(cls_tp) | set(cls_fp) | set(cls_fn))
    precision = {c: cls_tp.get(c, 0) / max(1, cls_tp.get(c, 0) + cls_fp.get(c, 0))
                 for c in classes}
    recall = {c: cls_tp.get(c, 0) / max(1, cls_tp.get(c, 0) + cls_fn.get(c, 0))
              for c in classes}
    return EvalReport(
        total_images=total_images,
        per_class_precision=precision, per_class_recall=recall,
        mean_abs_error=mean_err, max_abs_error=max_err,
        histogram=bins, rows=rows, matched_objects=len(errors),
        missing_files=missing, dense_gt_used=dense_dir is not None)


def format_report(report: EvalReport) -> str:
    """Plain-text report mirroring the per-detection and summary tables."""
    out = []
    out.append(f"Total test stereo images\t{report.total_images}")
    for c in sorted(report.per_class_precision):
        out.append(f"Precision ({c})\t{report.per_class_precision[c] * 100:.1f}%")
        out.append(f"Recall ({c})\t{report.per_class_recall[c] * 100:.1f}%")
    out.append(f"Mean abs obj disparity error\t{report.mean_abs_error:.2f} pixels")
    out.append(f"Max abs obj disparity error\t{report.max_abs_error:.2f} pixels")
    out.append("Abs obj disparity error histogram (pixel)\tNumber of objects")
    for i, n in enumerate(report.histogram):
        out.append(f"[{i}, {i + 1})\t{n}")
    out.append("")
    out.append("image\tobj detected\tconfidence\tpredicted dx\tground truth dx"
               "\t95% dx\t97% dx")
    for r in report.rows:
        def fmt(v):
            return "-" if v is None else f"{v:.0f}"
        out.append(f"{r.image_id}\t{r.label}\t{r.confidence:.2f}\t"
                   f"{fmt(r.predicted_dx)}\t{fmt(r.gt_dx)}\t"
                   f"{fmt(r.kitti_95_dx)}\t{fmt(r.kitti_97_dx)}")
    return "\n".join(out) + "\n"


def report_keyvalues(report: EvalReport) -> dict[str, float | int]:
    kv: dict[str, float | int] = {
        "total_images": report.total_images,
        "matched_objects": report.matched_objects,
        "mean_abs_error_px": report.mean_abs_error,
        "max_abs_error_px": report.max_abs_error,
    }
    for c in report.per_class_precision:
        kv[f"precision_{c}"] = report.per_class_precision[c]
        kv[f"recall_{c}"] = report.per_class_recall[c]
    for i, n in enumerate(report.histogram):
        kv[f"hist_{i}_{i + 1}"] = n
    return kv
