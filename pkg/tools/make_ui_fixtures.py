#!/usr/bin/env python3
"""Generate scripted annotation sessions for the frontend test suite.

Each fixture replays a sequence of editing operations against the
session rules (clamped boxes, 1 px minimum size), then records the
resulting objects, their disparities, and the canonical XML bytes the
backend writer produces for the same document. The frontend tests
replay the same operations and must reproduce both.
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from odssd import annotation as ann
from odssd.geometry import BBox, object_disparity

VIEW_W, VIEW_H = 160, 80


def clamp(v, lo, hi):
    return min(hi, max(lo, v))


class Session:
    """Reference implementation of the UI editing rules."""

    def __init__(self, pair_id: str, view_w: int, view_h: int):
        self.pair_id = pair_id
        self.view_w = view_w
        self.view_h = view_h
        self.objects: list[dict] = []

    def apply(self, op: dict) -> None:
        kind = op["op"]
        if kind == "add":
            x0, y0, x1, y1 = op["box"]
            cx0 = clamp(x0, 0, self.view_w - 1)
            cy0 = clamp(y0, 0, self.view_h - 1)
            box = [cx0, cy0, clamp(x1, cx0 + 1, self.view_w),
                   clamp(y1, cy0 + 1, self.view_h)]
            self.objects.append({"name": op["name"], "left": box, "right": list(box)})
        elif kind == "drag":
            self._move(op["index"], op["view"], *op["to"])
        elif kind == "nudge":
            box = self.objects[op["index"]][op["view"]]
            self._move(op["index"], op["view"], box[0] + op["dx"], box[1] + op["dy"])
        elif kind == "resize":
            box = self.objects[op["index"]][op["view"]]
            v = op["value"]
            edge = op["edge"]
            if edge == "xmin":
                box[0] = clamp(v, 0, box[2] - 1)
            elif edge == "xmax":
                box[2] = clamp(v, box[0] + 1, self.view_w)
            elif edge == "ymin":
                box[1] = clamp(v, 0, box[3] - 1)
            else:
                box[3] = clamp(v, box[1] + 1, self.view_h)
        elif kind == "label":
            self.objects[op["index"]]["name"] = op["name"]
        elif kind == "remove":
            del self.objects[op["index"]]
        else:
            raise ValueError(f"unknown op {kind}")

    def _move(self, index: int, view: str, x, y) -> None:
        box = self.objects[index][view]
        bw, bh = box[2] - box[0], box[3] - box[1]
        box[0] = clamp(x, 0, self.view_w - bw)
        box[1] = clamp(y, 0, self.view_h - bh)
        box[2] = box[0] + bw
        box[3] = box[1] + bh

    def to_doc(self) -> ann.AnnotationDoc:
        objects = []
        for obj in self.objects:
            left = BBox(*obj["left"])
            right = BBox(*obj["right"])
            objects.append(ann.AnnotatedObject(
                name=obj["name"], bndbox=left,
                bndbox2=right.shifted(0, self.view_h),
                delta=object_disparity(left, right, self.view_w, self.view_h)))
        return ann.AnnotationDoc(
            folder="images", filename=f"{self.pair_id}.png",
            path=f"images/{self.pair_id}.png",
            stacked_size=(self.view_w, 2 * self.view_h, 3), objects=objects)


def scripted_sessions() -> list[list[dict]]:
    """Hand-written scripts covering every truncation branch, plus
    seeded random edit sequences."""
    scripts = [
        # plain center-branch object with a horizontal shift
        [{"op": "add", "name": "car", "box": [40, 20, 90, 55]},
         {"op": "drag", "index": 0, "view": "right", "to": [28, 20]}],
        # left-edge truncation in the right view (dx from xmax)
        [{"op": "add", "name": "car", "box": [10, 12, 58, 48]},
         {"op": "drag", "index": 0, "view": "right", "to": [-5, 12]}],
        # right-edge truncation in the left view (dx from xmin)
        [{"op": "add", "name": "car", "box": [120, 10, 160, 40]},
         {"op": "nudge", "index": 0, "view": "right", "dx": -22, "dy": 0}],
        # top-edge truncation (dy from ymax)
        [{"op": "add", "name": "person", "box": [60, 0, 100, 30]},
         {"op": "drag", "index": 0, "view": "right", "to": [45, 3]}],
        # bottom-edge truncation (dy from ymin)
        [{"op": "add", "name": "bike", "box": [30, 50, 70, 80]},
         {"op": "drag", "index": 0, "view": "right", "to": [18, 44]}],
        # vertical jitter only, then a relabel
        [{"op": "add", "name": "car", "box": [50, 25, 95, 60]},
         {"op": "nudge", "index": 0, "view": "right", "dx": -12, "dy": -3},
         {"op": "label", "index": 0, "name": "trafficsign"}],
        # two objects, remove the first
        [{"op": "add", "name": "car", "box": [10, 10, 40, 40]},
         {"op": "add", "name": "person", "box": [90, 30, 120, 70]},
         {"op": "drag", "index": 1, "view": "right", "to": [75, 30]},
         {"op": "remove", "index": 0}],
        # resize after placement; fractional edge
        [{"op": "add", "name": "car", "box": [20, 15, 60, 50]},
         {"op": "resize", "index": 0, "view": "left", "edge": "xmax", "value": 70.5},
         {"op": "drag", "index": 0, "view": "right", "to": [6, 16]}],
        # clamped add (drawn past the view) and clamped drag
        [{"op": "add", "name": "car", "box": [130, 60, 200, 120]},
         {"op": "drag", "index": 0, "view": "right", "to": [999, 999]}],
        # resize that hits the 1 px minimum
        [{"op": "add", "name": "person", "box": [80, 20, 110, 45]},
         {"op": "resize", "index": 0, "view": "right", "edge": "xmin", "value": 150},
         {"op": "drag", "index": 0, "view": "right", "to": [70, 20]}],
    ]
    rng = np.random.default_rng(2024)
    labels = list(ann.CLASS_NAMES)
    while len(scripts) < 20:
        ops = []
        n_objects = int(rng.integers(1, 3))
        for k in range(n_objects):
            x0 = int(rng.integers(5, VIEW_W - 40))
            y0 = int(rng.integers(3, VIEW_H - 30))
            ops.append({"op": "add", "name": str(rng.choice(labels)),
                        "box": [x0, y0, x0 + int(rng.integers(20, 40)),
                                y0 + int(rng.integers(18, 30))]})
            ops.append({"op": "drag", "index": k, "view": "right",
                        "to": [x0 - int(rng.integers(4, 30)),
                               y0 + int(rng.integers(-4, 5))]})
        for _ in range(int(rng.integers(0, 3))):
            k = int(rng.integers(0, n_objects))
            kind = rng.choice(["nudge", "resize", "label"])
            if kind == "nudge":
                ops.append({"op": "nudge", "index": k,
                            "view": str(rng.choice(["left", "right"])),
                            "dx": int(rng.integers(-6, 7)),
                            "dy": int(rng.integers(-3, 4))})
            elif kind == "resize":
                ops.append({"op": "resize", "index": k,
                            "view": str(rng.choice(["left", "right"])),
                            "edge": str(rng.choice(["xmin", "ymin", "xmax", "ymax"])),
                            "value": int(rng.integers(0, VIEW_W))})
            else:
                ops.append({"op": "label", "index": k,
                            "name": str(rng.choice(labels))})
        scripts.append(ops)
    return scripts


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default=str(Path(__file__).resolve().parents[1]
                                             / "frontend/test/fixtures/sessions.json"))
    args = parser.parse_args()

    fixtures = []
    for i, ops in enumerate(scripted_sessions()):
        pair_id = f"pair_{i:05d}"
        session = Session(pair_id, VIEW_W, VIEW_H)
        for op in ops:
            session.apply(op)
        doc = session.to_doc()
        fixtures.append({
            "pair_id": pair_id,
            "view": {"width": VIEW_W, "height": VIEW_H},
            "ops": ops,
            "expected": {
                "objects": [
                    {"name": obj["name"], "left": obj["left"], "right": obj["right"],
                     "dx": object_disparity(BBox(*obj["left"]), BBox(*obj["right"]),
                                            VIEW_W, VIEW_H).dx,
                     "dy": object_disparity(BBox(*obj["left"]), BBox(*obj["right"]),
                                            VIEW_W, VIEW_H).dy}
                    for obj in session.objects
                ],
                "xml": ann.write_annotation(doc).decode(),
            },
        })

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(fixtures, indent=2) + "\n")
    print(f"wrote {len(fixtures)} sessions to {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
