"""Annotated scenes and the COCO-style manifest they are stored in."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class BoxAnnotation:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self}")

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def center_pixel(self, width: int, height: int) -> tuple[int, int]:
        cx, cy = self.center
        px = min(max(int(math.floor(cx)), 0), width - 1)
        py = min(max(int(math.floor(cy)), 0), height - 1)
        return px, py

    def clipped(self, width: int, height: int) -> "BoxAnnotation":
        return BoxAnnotation(
            max(0.0, self.x_min), max(0.0, self.y_min),
            min(float(width), self.x_max), min(float(height), self.y_max),
        )

    @classmethod
    def from_xywh(cls, x, y, w, h) -> "BoxAnnotation":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max - self.x_min, self.y_max - self.y_min]


@dataclass
class AnnotatedScene:
    image_id: int
    width: int
    height: int
    boxes: list[BoxAnnotation]
    label: str = "object"
    category_id: int = 0
    exemplar_ids: list[int] = field(default_factory=list)
    file_name: str | None = None
    image: np.ndarray | None = None  # H x W x 3 uint8, optional

    @property
    def count(self) -> int:
        return len(self.boxes)

    def center_pixels(self) -> np.ndarray:
        """(N, 2) integer array of (x, y) center pixels."""
        if not self.boxes:
            return np.zeros((0, 2), dtype=np.int64)
        return np.array([b.center_pixel(self.width, self.height) for b in self.boxes], dtype=np.int64)

    @property
    def exemplar_boxes(self) -> list[BoxAnnotation]:
        return [self.boxes[i] for i in self.exemplar_ids]


def occlusion_record(mask) -> dict[str, Any]:
    """The per-image ``occlusion`` entry of an OCC manifest."""
    return {
        "rectangles": [list(map(int, r)) for r in mask.rectangles],
        "occluded_ids": [int(i) for i in mask.occluded_instance_ids],
    }


def write_manifest(path, scenes: Iterable[AnnotatedScene], occlusions: dict[int, dict] | None = None,
                   categories: list[dict] | None = None, extra: dict | None = None) -> dict:
    images, annotations = [], []
    ann_id = 1
    cats = {}
    for scene in scenes:
        entry = {"id": scene.image_id, "file_name": scene.file_name or f"{scene.image_id:06d}.png",
                 "width": scene.width, "height": scene.height, "label": scene.label,
                 "category_id": scene.category_id, "exemplar_ids": list(scene.exemplar_ids)}
        if occlusions is not None and scene.image_id in occlusions:
            entry["occlusion"] = occlusions[scene.image_id]
        images.append(entry)
        cats.setdefault(scene.category_id, scene.label)
        for k, box in enumerate(scene.boxes):
            annotations.append({"id": ann_id, "image_id": scene.image_id, "instance_index": k,
                                "category_id": scene.category_id, "bbox": box.to_xywh(),
                                "area": (box.x_max - box.x_min) * (box.y_max - box.y_min)})
            ann_id += 1
    if categories is None:
        categories = [{"id": cid, "name": name} for cid, name in sorted(cats.items())]
    doc = {"images": images, "annotations": annotations, "categories": categories}
    if extra:
        doc["info"] = extra
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))
    return doc


def read_manifest(path) -> tuple[list[AnnotatedScene], dict[int, dict], dict]:
    """Load scenes (images not loaded) and their occlusion records."""
    doc = json.loads(Path(path).read_text())
    by_image: dict[int, list[dict]] = {}
    for ann in doc.get("annotations", []):
        by_image.setdefault(ann["image_id"], []).append(ann)
    names = {c["id"]: c["name"] for c in doc.get("categories", [])}
    scenes, occlusions = [], {}
    for entry in doc["images"]:
        anns = sorted(by_image.get(entry["id"], []), key=lambda a: (a.get("instance_index", 0), a["id"]))
        boxes = [BoxAnnotation.from_xywh(*a["bbox"]).clipped(entry["width"], entry["height"]) for a in anns]
        cid = entry.get("category_id", anns[0]["category_id"] if anns else 0)
        scenes.append(AnnotatedScene(
            image_id=entry["id"], width=entry["width"], height=entry["height"], boxes=boxes,
            label=entry.get("label", names.get(cid, "object")), category_id=cid,
            exemplar_ids=list(entry.get("exemplar_ids", [])), file_name=entry.get("file_name"),
        ))
        if "occlusion" in entry:
            occlusions[entry["id"]] = entry["occlusion"]
    return scenes, occlusions, doc


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.uint8)


def save_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(image)).save(path)


def save_gray(path, values: np.ndarray) -> None:
    """Write an 8-bit single-channel raster; ``.pgm`` gets a binary P5 file, anything else PNG."""
    values = np.ascontiguousarray(values, dtype=np.uint8)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        h, w = values.shape
        path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + values.tobytes())
    else:
        Image.fromarray(values).save(path)


def read_gray(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("L"), dtype=np.uint8)
