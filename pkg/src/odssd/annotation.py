"""Extended Pascal-VOC stereo annotation format, image stacking, dataset index.

Each annotated object carries a left-view ``bndbox``, a ``delta`` element
with the object disparity (dx, dy), and a ``bndbox2`` for the right view.
Both boxes are stored in the stacked-frame coordinates (left view on top,
right view below, so bndbox2 y-coordinates are offset by the view height).
"""

from __future__ import annotations

import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import BBox, ObjectDisparity, StereoObject, object_disparity

# Tolerance for agreement between the stored delta and the delta
# recomputed from the boxes; past it a warning is attached.
DELTA_TOLERANCE_PX = 0.5

CLASS_NAMES = ("car", "person", "bike", "trafficsign")


class AnnotationSchemaError(ValueError):
    """Malformed or incomplete annotation XML."""


@dataclass
class AnnotatedObject:
    name: str
    bndbox: BBox
    bndbox2: BBox  # stacked coordinates, y offset by view height
    delta: ObjectDisparity
    pose: str = "Unspecified"
    truncated: str = "0"
    difficult: str = "0"
    # unknown child elements preserved for round trips: (tag, text)
    extras: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class AnnotationDoc:
    folder: str
    filename: str
    path: str
    stacked_size: tuple[int, int, int]  # width, height, depth
    objects: list[AnnotatedObject]
    database: str = "Unknown"
    segmented: str = "0"
    warnings: list[str] = field(default_factory=list)
    extras: list[tuple[str, str]] = field(default_factory=list)

    @property
    def view_height(self) -> int:
        return self.stacked_size[1] // 2

    @property
    def view_width(self) -> int:
        return self.stacked_size[0]


@dataclass
class IndexEntry:
    image_path: str
    annotation_path: str
    source: str


@dataclass
class DatasetIndex:
    entries: list[IndexEntry]

    @classmethod
    def read(cls, path: str | Path) -> "DatasetIndex":
        entries = []
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"bad index line (need 3 tab-separated fields): {line!r}")
            entries.append(IndexEntry(*parts))
        return cls(entries)

    def write(self, path: str | Path) -> None:
        lines = [
            f"{e.image_path}\t{e.annotation_path}\t{e.source}" for e in self.entries
        ]
        Path(path).write_text("".join(line + "\n" for line in lines))


def _req(parent: ET.Element, tag: str) -> ET.Element:
    el = parent.find(tag)
    if el is None:
        raise AnnotationSchemaError(f"missing <{tag}> element")
    return el


def _text(parent: ET.Element, tag: str, default: str | None = None) -> str:
    el = parent.find(tag)
    if el is None:
        if default is not None:
            return default
        raise AnnotationSchemaError(f"missing <{tag}> element")
    return el.text or ""


def _parse_box(el: ET.Element, where: str) -> BBox:
    vals = {}
    for tag in ("xmin", "ymin", "xmax", "ymax"):
        children = el.findall(tag)
        if len(children) != 1:
            raise AnnotationSchemaError(
                f"{where} needs exactly one <{tag}>, found {len(children)}"
            )
        try:
            vals[tag] = float(children[0].text)
        except (TypeError, ValueError):
            raise AnnotationSchemaError(f"non-numeric <{tag}> in {where}")
    return BBox(vals["xmin"], vals["ymin"], vals["xmax"], vals["ymax"])


def _fmt_coord(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


def _fmt_delta(v: float) -> str:
    # delta keeps one decimal ("28.0"), more if the value needs them
    return f"{v:.1f}" if round(v, 1) == v else repr(float(v))


def parse_annotation(xml_bytes: bytes | str) -> AnnotationDoc:
    """Parse an extended-VOC stereo annotation document.

    Objects must carry bndbox, delta, and bndbox2; bndbox must sit in the
    top (left-view) half and bndbox2 in the bottom half. A stored delta
    disagreeing with the boxes by more than DELTA_TOLERANCE_PX attaches a
    warning to the document (the stored delta stays authoritative).
    """
    try:
        root = ET.fromstring(xml_bytes)
    except ET.ParseError as e:
        raise AnnotationSchemaError(f"malformed XML: {e}") from e
    if root.tag != "annotation":
        raise AnnotationSchemaError(f"root element is <{root.tag}>, expected <annotation>")

    size = _req(root, "size")
    width = int(_text(size, "width"))
    height = int(_text(size, "height"))
    depth = int(_text(size, "depth"))
    if height % 2 != 0:
        raise AnnotationSchemaError(f"stacked height {height} is odd")
    if depth != 3:
        raise AnnotationSchemaError(f"depth {depth}, expected 3")
    view_h = height // 2

    source = root.find("source")
    database = _text(source, "database", "Unknown") if source is not None else "Unknown"

    known_doc_tags = {"folder", "filename", "path", "source", "size", "segmented", "object"}
    doc_extras = [
        (el.tag, el.text or "") for el in root if el.tag not in known_doc_tags
    ]

    warnings: list[str] = []
    objects: list[AnnotatedObject] = []
    for i, obj_el in enumerate(root.findall("object")):
        name = _text(obj_el, "name")
        bndbox = _parse_box(_req(obj_el, "bndbox"), f"object[{i}]/bndbox")
        delta_el = _req(obj_el, "delta")
        try:
            delta = ObjectDisparity(
                float(_text(delta_el, "dx")), float(_text(delta_el, "dy"))
            )
        except ValueError:
            raise AnnotationSchemaError(f"non-numeric delta in object[{i}]")
        bndbox2 = _parse_box(_req(obj_el, "bndbox2"), f"object[{i}]/bndbox2")

        if bndbox.ymax > view_h:
            raise AnnotationSchemaError(
                f"object[{i}]/bndbox extends below the left-view half "
                f"(ymax {bndbox.ymax} > {view_h})"
            )
        if bndbox2.ymin < view_h:
            raise AnnotationSchemaError(
                f"object[{i}]/bndbox2 starts in the top half "
                f"(ymin {bndbox2.ymin} < {view_h})"
            )

        right_view = bndbox2.shifted(0, -view_h)
        recomputed = object_disparity(bndbox, right_view, width, view_h)
        if (
            abs(recomputed.dx - delta.dx) > DELTA_TOLERANCE_PX
            or abs(recomputed.dy - delta.dy) > DELTA_TOLERANCE_PX
        ):
            warnings.append(
                f"object[{i}] ({name}): stored delta ({delta.dx}, {delta.dy}) "
                f"disagrees with boxes ({recomputed.dx}, {recomputed.dy})"
            )

        known_obj_tags = {"name", "pose", "truncated", "difficult", "bndbox", "delta", "bndbox2"}
        extras = [(el.tag, el.text or "") for el in obj_el if el.tag not in known_obj_tags]
        objects.append(
            AnnotatedObject(
                name=name,
                bndbox=bndbox,
                bndbox2=bndbox2,
                delta=delta,
                pose=_text(obj_el, "pose", "Unspecified"),
                truncated=_text(obj_el, "truncated", "0"),
                difficult=_text(obj_el, "difficult", "0"),
                extras=extras,
            )
        )

    return AnnotationDoc(
        folder=_text(root, "folder", ""),
        filename=_text(root, "filename", ""),
        path=_text(root, "path", ""),
        stacked_size=(width, height, depth),
        objects=objects,
        database=database,
        segmented=_text(root, "segmented", "0"),
        warnings=warnings,
        extras=doc_extras,
    )


def write_annotation(doc: AnnotationDoc) -> bytes:
    """Serialize a document back to extended-VOC XML (bndbox, delta, bndbox2 order)."""
    width, height, depth = doc.stacked_size
    if height % 2 != 0:
        raise AnnotationSchemaError(f"stacked height {height} is odd; refusing to serialize")
    view_h = height // 2

    root = ET.Element("annotation")
    ET.SubElement(root, "folder").text = doc.folder
    ET.SubElement(root, "filename").text = doc.filename
    ET.SubElement(root, "path").text = doc.path
    source = ET.SubElement(root, "source")
    ET.SubElement(source, "database").text = doc.database
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(width)
    ET.SubElement(size, "height").text = str(height)
    ET.SubElement(size, "depth").text = str(depth)
    ET.SubElement(root, "segmented").text = doc.segmented
    for tag, text in doc.extras:
        ET.SubElement(root, tag).text = text

    for i, obj in enumerate(doc.objects):
        if obj.bndbox.ymax > view_h or obj.bndbox2.ymin < view_h:
            raise AnnotationSchemaError(
                f"object[{i}] violates half-plane invariants; refusing to serialize"
            )
        obj_el = ET.SubElement(root, "object")
        ET.SubElement(obj_el, "name").text = obj.name
        ET.SubElement(obj_el, "pose").text = obj.pose
        ET.SubElement(obj_el, "truncated").text = obj.truncated
        ET.SubElement(obj_el, "difficult").text = obj.difficult
        box_el = ET.SubElement(obj_el, "bndbox")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"),
                          (obj.bndbox.xmin, obj.bndbox.ymin, obj.bndbox.xmax, obj.bndbox.ymax)):
            ET.SubElement(box_el, tag).text = _fmt_coord(v)
        delta_el = ET.SubElement(obj_el, "delta")
        ET.SubElement(delta_el, "dx").text = _fmt_delta(obj.delta.dx)
        ET.SubElement(delta_el, "dy").text = _fmt_delta(obj.delta.dy)
        box2_el = ET.SubElement(obj_el, "bndbox2")
        for tag, v in zip(("xmin", "ymin", "xmax", "ymax"),
                          (obj.bndbox2.xmin, obj.bndbox2.ymin, obj.bndbox2.xmax, obj.bndbox2.ymax)):
            ET.SubElement(box2_el, tag).text = _fmt_coord(v)
        for tag, text in obj.extras:
            ET.SubElement(obj_el, tag).text = text

    ET.indent(root, space="  ")
    return ET.tostring(root, encoding="utf-8", xml_declaration=False)


def stack_pair(left_img: np.ndarray, right_img: np.ndarray) -> np.ndarray:
    """Stack a stereo pair vertically: left view on top, right view below."""
    if left_img.shape != right_img.shape:
        raise ValueError(
            f"stereo pair shape mismatch: left {left_img.shape}, right {right_img.shape}"
        )
    return np.concatenate([left_img, right_img], axis=0)


def unstack_pair(stacked: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a stacked image back into its (left, right) views."""
    h = stacked.shape[0]
    if h % 2 != 0:
        raise ValueError(f"stacked height {h} is odd")
    return stacked[: h // 2], stacked[h // 2 :]


def doc_to_targets(doc: AnnotationDoc) -> tuple[list[StereoObject], list[str]]:
    """Convert a document to per-view ground truth.

    Right boxes are mapped from stacked coordinates into the right-view
    frame. The stored delta is authoritative; objects whose recomputed
    delta disagrees past the tolerance are kept, with a warning.
    """
    view_h = doc.view_height
    targets: list[StereoObject] = []
    warnings: list[str] = []
    for i, obj in enumerate(doc.objects):
        right_view = obj.bndbox2.shifted(0, -view_h)
        recomputed = object_disparity(obj.bndbox, right_view, doc.view_width, view_h)
        if (
            abs(recomputed.dx - obj.delta.dx) > DELTA_TOLERANCE_PX
            or abs(recomputed.dy - obj.delta.dy) > DELTA_TOLERANCE_PX
        ):
            warnings.append(
                f"object[{i}] ({obj.name}): stored delta ({obj.delta.dx}, {obj.delta.dy}) "
                f"vs recomputed ({recomputed.dx}, {recomputed.dy})"
            )
        targets.append(
            StereoObject(
                label=obj.name,
                left_box=obj.bndbox,
                right_box=right_view,
                disparity=obj.delta,
            )
        )
    return targets, warnings
