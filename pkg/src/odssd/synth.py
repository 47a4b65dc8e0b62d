"""Deterministic synthetic stereo scenes and the desk-scale training loop.

Scenes are textured rectangles/ellipses over a shared noise background;
the right view repeats each object shifted by its sampled (dx, dy), so
annotations are exact by construction and the generator doubles as its
own ground truth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import annotation as ann
from . import codec
from . import tensor as T
from .geometry import BBox, ObjectDisparity, StereoObject, object_disparity
from .model import Model, ModelConfig, build_model, generate_priors, save_weights
from .tensor import Tensor


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    view_size: tuple[int, int] = (160, 80)        # (width, height)
    object_count: tuple[int, int] = (1, 1)        # inclusive range
    disparity_range: tuple[int, int] = (4, 36)    # px, must fit in view_w/4... see check
    dy_jitter: tuple[int, int] = (0, 0)           # px, inclusive, signed
    object_size: tuple[int, int] = (24, 48)       # px edge length range
    background_noise: float = 18.0                # grey-level sigma
    max_retries: int = 20

    def __post_init__(self):
        if not 0 <= self.disparity_range[0] <= self.disparity_range[1] <= self.view_size[0] // 4:
            raise ValueError(f"disparity range {self.disparity_range} outside "
                             f"[0, {self.view_size[0] // 4}]")
        if max(abs(self.dy_jitter[0]), abs(self.dy_jitter[1])) > 16:
            raise ValueError(f"dy jitter {self.dy_jitter} outside +-16 px")


def _rng_for(spec: SceneSpec, index: int) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index])


def generate_scene(spec: SceneSpec, index: int):
    """One deterministic scene: (left, right uint8 HxWx3, targets, skipped)."""
    rng = _rng_for(spec, index)
    w, h = spec.view_size
    base = np.clip(rng.normal(110, spec.background_noise, (h, w, 3)), 0, 255)
    left = base.astype(np.uint8)
    right = left.copy()  # background at zero disparity

    n_objects = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    targets: list[StereoObject] = []
    skipped = 0
    placed: list[BBox] = []
    for _ in range(n_objects):
        for _attempt in range(spec.max_retries):
            ow = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
            oh = int(rng.integers(spec.object_size[0], spec.object_size[1] + 1))
            dx = int(rng.integers(spec.disparity_range[0], spec.disparity_range[1] + 1))
            dy = int(rng.integers(spec.dy_jitter[0], spec.dy_jitter[1] + 1))
            # the right-view copy sits at (-dx, -dy); keep both in frame
            x0_lo, x0_hi = dx, w - ow
            y0_lo, y0_hi = max(0, dy), min(h - oh, h - oh + dy)
            if x0_hi <= x0_lo or y0_hi <= y0_lo:
                continue
            x0 = int(rng.integers(x0_lo, x0_hi))
            y0 = int(rng.integers(y0_lo, y0_hi))
            lbox = BBox(x0, y0, x0 + ow, y0 + oh)
            if any(_boxes_overlap(lbox, b) for b in placed):
                continue
            rbox = lbox.shifted(-dx, -dy)
            if any(_boxes_overlap(rbox, b.shifted(-t.disparity.dx, -t.disparity.dy))
                   for b, t in zip(placed, targets)):
                continue
            patch = _object_patch(rng, ow, oh)
            _paste(left, patch, x0, y0)
            _paste(right, patch, x0 - dx, y0 - dy)
            placed.append(lbox)
            disp = object_disparity(lbox, rbox, w, h)
            targets.append(StereoObject("car", lbox, rbox, disp))
            break
        else:
            skipped += 1
    return left, right, targets, skipped


def _boxes_overlap(a: BBox, b: BBox, margin: float = 4.0) -> bool:
    return not (a.xmax + margin <= b.xmin or b.xmax + margin <= a.xmin or
                a.ymax + margin <= b.ymin or b.ymax + margin <= a.ymin)


def _object_patch(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    """Noise-filled textured patch with a bright border, so matching cannot
    rely on silhouette alone."""
    color = rng.integers(40, 220, 3)
    patch = np.clip(color[None, None, :] + rng.normal(0, 35, (h, w, 3)), 0, 255)
    # a few texture stripes
    for _ in range(3):
        x = int(rng.integers(0, max(1, w - 3)))
        patch[:, x:x + 2] = np.clip(patch[:, x:x + 2] + rng.integers(-80, 80), 0, 255)
    patch[0], patch[-1] = 235, 235
    patch[:, 0], patch[:, -1] = 235, 235
    return patch.astype(np.uint8)


def _paste(img: np.ndarray, patch: np.ndarray, x0: int, y0: int) -> None:
    h, w = patch.shape[:2]
    img[y0:y0 + h, x0:x0 + w] = patch


def make_dataset(spec: SceneSpec, out_dir: str | Path, count: int,
                 start_index: int = 0, source: str = "synth") -> ann.DatasetIndex:
    """Write stacked PNGs plus extended-VOC XML and a dataset index."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "annotations").mkdir(parents=True, exist_ok=True)
    w, h = spec.view_size
    entries = []
    for i in range(start_index, start_index + count):
        left, right, targets, _ = generate_scene(spec, i)
        stacked = ann.stack_pair(left, right)
        name = f"scene_{i:05d}"
        img_path = out / "images" / f"{name}.png"
        Image.fromarray(stacked).save(img_path)
        objects = [
            ann.AnnotatedObject(
                name=t.label, bndbox=t.left_box,
                bndbox2=t.right_box.shifted(0, h),
                delta=t.disparity)
            for t in targets
        ]
        doc = ann.AnnotationDoc(
            folder="images", filename=f"{name}.png", path=str(img_path),
            stacked_size=(w, 2 * h, 3), objects=objects)
        ann_path = out / "annotations" / f"{name}.xml"
        ann_path.write_bytes(ann.write_annotation(doc))
        entries.append(ann.IndexEntry(str(img_path), str(ann_path), source))
    index = ann.DatasetIndex(entries)
    index.write(out / "index.txt")
    return index


# ---------------------------------------------------------------------------
# training

TOY_CONFIG = ModelConfig(
    view_size=(160, 80), num_classes=2, channel_scale=0.25,
    # desk-scale confidences stay uncalibrated, so favor recall
    score_threshold=0.05)

TOY_CLASSES = ("background", "car")


def normalize_image(img: np.ndarray) -> np.ndarray:
    """uint8 HxWxC -> float32 CxHxW in [-1, 1]."""
    return (img.astype(np.float32) / 127.5 - 1.0).transpose(2, 0, 1)


@dataclass
class TrainResult:
    model: Model
    loss_curve: list[float]
    diverged: bool = False


def encode_scene(targets: list[StereoObject], priors: np.ndarray,
                 config: ModelConfig, class_names=TOY_CLASSES):
    gt_boxes, gt_disp, gt_labels = codec.stereo_objects_to_arrays(
        targets, config, class_names)
    assign = codec.match_priors(gt_boxes, priors)
    return codec.encode_targets(assign, gt_boxes, gt_disp, gt_labels,
                                priors, config)


def shift_scene(stacked: np.ndarray, targets: list[StereoObject],
                rng: np.random.Generator):
    """Translate both views (and all boxes) by a random in-frame offset.

    Disparities are translation-invariant, so this multiplies the
    effective pose diversity of a small scene set without touching the
    (dx, dy) targets. Backgrounds wrap around; objects never do.
    """
    if not targets:
        return stacked, targets
    left, right = ann.unstack_pair(stacked)
    h, w = left.shape[:2]
    lo_x = -min(min(t.left_box.xmin, t.right_box.xmin) for t in targets)
    hi_x = min(w - max(t.left_box.xmax, t.right_box.xmax) for t in targets)
    lo_y = -min(min(t.left_box.ymin, t.right_box.ymin) for t in targets)
    hi_y = min(h - max(t.left_box.ymax, t.right_box.ymax) for t in targets)
    tx = int(rng.integers(lo_x, hi_x + 1))
    ty = int(rng.integers(lo_y, hi_y + 1))
    moved = ann.stack_pair(np.roll(left, (ty, tx), axis=(0, 1)),
                           np.roll(right, (ty, tx), axis=(0, 1)))
    shifted = [
        StereoObject(t.label,
                     BBox(t.left_box.xmin + tx, t.left_box.ymin + ty,
                          t.left_box.xmax + tx, t.left_box.ymax + ty),
                     BBox(t.right_box.xmin + tx, t.right_box.ymin + ty,
                          t.right_box.xmax + tx, t.right_box.ymax + ty),
                     t.disparity)
        for t in targets
    ]
    return moved, shifted


def train_toy(config: ModelConfig, scenes: list[tuple[np.ndarray, list[StereoObject]]],
              epochs: int = 150, batch_size: int = 8, lr: float = 1e-3,
              betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
              disparity_weight: float = 1.0, augment: bool = True,
              seed: int = 0, class_names=TOY_CLASSES,
              checkpoint_path: str | Path | None = None,
              log=None) -> TrainResult:
    """Adam loop over the multibox+disparity loss.

    scenes: (stacked uint8 image, targets) pairs. Deterministic for a
    fixed seed. On divergence (NaN loss) the last good parameters win.
    With augment, each epoch re-renders every scene at a random shared
    translation (shift_scene).
    """
    model = build_model(config, seed=seed)
    priors = generate_priors(config)
    inputs = np.stack([normalize_image(img) for img, _ in scenes])
    encoded = [encode_scene(t, priors, config, class_names) for _, t in scenes]

    params = list(model.parameters().values())
    m1 = [np.zeros_like(p.data) for p in params]
    m2 = [np.zeros_like(p.data) for p in params]
    b1, b2 = betas
    step = 0
    rng = np.random.default_rng(seed)
    curve: list[float] = []
    snapshot = [p.data.copy() for p in params]
    diverged = False

    for epoch in range(epochs):
        order = rng.permutation(len(scenes))
        if augment:
            views, enc = [], []
            for img, targets in scenes:
                moved, shifted = shift_scene(img, targets, rng)
                views.append(normalize_image(moved))
                enc.append(encode_scene(shifted, priors, config, class_names))
            inputs, encoded = np.stack(views), enc
        epoch_loss, n_batches = 0.0, 0
        for at in range(0, len(order), batch_size):
            idx = order[at:at + batch_size]
            x = Tensor(inputs[idx])
            labels = np.concatenate([encoded[i].labels for i in idx])
            locs = np.concatenate([encoded[i].loc_targets for i in idx])
            batch_targets = codec.EncodedTargets(labels, locs, [])

            model.zero_grad()
            with T.Graph() as g:
                conf, loc = model.forward(x)
                loss, _ = codec.multibox_disparity_loss(
                    conf, loc, batch_targets, disparity_weight=disparity_weight)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                diverged = True
                break
            T.backward(g, loss, parameters=params)
            step += 1
            c1 = 1.0 - b1 ** step
            c2 = 1.0 - b2 ** step
            for p, mi, vi in zip(params, m1, m2):
                mi *= b1
                mi += (1.0 - b1) * p.grad
                vi *= b2
                vi += (1.0 - b2) * p.grad ** 2
                p.data -= lr * (mi / c1) / (np.sqrt(vi / c2) + eps)
            epoch_loss += loss_val
            n_batches += 1
        if diverged:
            for p, snap in zip(params, snapshot):
                p.data = snap.copy()
            break
        snapshot = [p.data.copy() for p in params]
        curve.append(epoch_loss / max(1, n_batches))
        if log is not None:
            log(f"epoch {epoch}: loss {curve[-1]:.4f}")

    if checkpoint_path is not None:
        save_weights(model, checkpoint_path, "fp32")
    return TrainResult(model=model, loss_curve=curve, diverged=diverged)


def load_scenes(spec: SceneSpec, count: int, start_index: int = 0):
    """Generate (stacked image, targets) pairs in memory."""
    scenes = []
    for i in range(start_index, start_index + count):
        left, right, targets, _ = generate_scene(spec, i)
        scenes.append((ann.stack_pair(left, right), targets))
    return scenes


# ---------------------------------------------------------------------------
# the shifted-object consistency probe

def shift_object_right_view(right: np.ndarray, target: StereoObject,
                            shift: int) -> np.ndarray:
    """Translate one object in the right view by `shift` px of extra
    disparity (leftwards), filling the vacated strip with nearby background."""
    edited = right.copy()
    b = target.right_box
    x0, y0 = int(b.xmin), int(b.ymin)
    x1, y1 = int(b.xmax), int(b.ymax)
    patch = right[y0:y1, x0:x1].copy()
    # fill the old area by tiling the row just above (or below) the object
    src_row = y0 - 1 if y0 > 0 else y1
    edited[y0:y1, x0:x1] = right[src_row:src_row + 1, x0:x1]
    nx0 = x0 - shift
    if nx0 < 0:
        raise ValueError(f"shift {shift} pushes the object out of frame")
    edited[y0:y1, nx0:nx0 + (x1 - x0)] = patch
    return edited


def predicted_dx_for(model: Model, priors: np.ndarray, stacked: np.ndarray,
                     left_box: BBox, class_names=TOY_CLASSES):
    """Best-overlap detection for a known left box; None when undetected."""
    from . import postprocess
    from .geometry import iou as box_iou

    x = Tensor(normalize_image(stacked)[None])
    conf, loc = model.forward(x)
    dets = postprocess.detect(conf.data, loc.data, priors, model.config,
                              class_names)[0]
    best, best_iou = None, 0.1
    for d in dets:
        v = box_iou(d.left_box, left_box)
        if v > best_iou:
            best, best_iou = d, v
    return best


def shift_object_test(model: Model, spec: SceneSpec, scene_index: int,
                      shift: int, class_names=TOY_CLASSES):
    """Predicted dx before/after adding `shift` px of disparity in the
    right view. Returns (before det, after det); either may be None."""
    priors = generate_priors(model.config)
    left, right, targets, _ = generate_scene(spec, scene_index)
    if not targets:
        raise ValueError(f"scene {scene_index} has no objects")
    target = targets[0]
    before = predicted_dx_for(model, priors, ann.stack_pair(left, right),
                              target.left_box, class_names)
    edited = shift_object_right_view(right, target, shift)
    after = predicted_dx_for(model, priors, ann.stack_pair(left, edited),
                             target.left_box, class_names)
    return before, after
