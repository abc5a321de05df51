"""Held-out evaluation of a checkpoint on an OCC manifest."""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Callable, Iterable

import torch

from .metrics import ImageRecord, MetricsReport
from .occlusion import OcclusionMask, count_occluded_instances, mask_from_record
from .scene import AnnotatedScene, load_image, read_manifest

# (scene with pixels, mask) -> (total, visible, occluded)
Predictor = Callable[[AnnotatedScene, OcclusionMask], tuple[float, float, float]]


class ManifestError(ValueError):
    pass


def load_split(manifest_path) -> list[tuple[AnnotatedScene | None, OcclusionMask | None, dict | None]]:
    """(scene, mask, error) per manifest image; broken images give ``(None, None, error)``."""
    manifest_path = Path(manifest_path)
    scenes, occlusions, _ = read_manifest(manifest_path)
    items = []
    for scene in scenes:
        try:
            path = manifest_path.parent / (scene.file_name or "")
            if not scene.file_name or not path.is_file():
                raise ManifestError(f"image file {scene.file_name!r} not found")
            image = load_image(path)
            if image.shape[:2] != (scene.height, scene.width):
                raise ManifestError(f"image is {image.shape[1]}x{image.shape[0]}, manifest says "
                                    f"{scene.width}x{scene.height}")
            scene = dataclasses.replace(scene, image=image)
            items.append((scene, mask_from_record(occlusions.get(scene.image_id), scene), None))
        except (ManifestError, OSError, ValueError) as exc:
            items.append((None, None, {"id": scene.image_id, "error": str(exc)}))
    return items


def evaluate_items(items: Iterable, predictor: Predictor, extra: dict | None = None) -> MetricsReport:
    """Score every loadable image; failures become error entries. Ground-truth split is by mask geometry."""
    records, errors = [], []
    for scene, mask, error in items:
        if error is not None:
            errors.append(error)
            continue
        try:
            total, vis, occ = predictor(scene, mask)
        except (ValueError, RuntimeError) as exc:
            errors.append({"id": scene.image_id, "error": str(exc)})
            continue
        gt_vis, gt_occ = count_occluded_instances(mask, scene.boxes)
        records.append(ImageRecord(id=scene.image_id, y=float(scene.count), y_hat=total, y_vis=float(gt_vis),
                                   y_hat_vis=vis, y_occ=float(gt_occ), y_hat_occ=occ))
    if not records:
        raise ManifestError(f"no image could be evaluated ({len(errors)} errors)")
    return MetricsReport.from_records(records, errors=sorted(errors, key=lambda e: e["id"]), extra=extra)


def model_predictor(model, bypass_frm: bool = False) -> Predictor:
    from .harness.model import make_batch, predict_counts

    stride, dims = model.cfg.strides[0], model.dims[0]
    expected = tuple(model.cfg.image_size)

    @torch.no_grad()
    def predict(scene: AnnotatedScene, mask: OcclusionMask):
        if (scene.height, scene.width) != expected:
            raise ValueError(f"model expects {expected[1]}x{expected[0]} images, got {scene.width}x{scene.height}")
        batch = make_batch([scene], [mask], stride, dims, model.cfg.exemplars)
        out = model.forward_student(batch, bypass_frm=bypass_frm)
        return predict_counts(out.density[0], out.level_masks[0][0])

    return predict


def evaluate_split(checkpoint, manifest, bypass_frm: bool = False) -> MetricsReport:
    from .checkpoint import load_checkpoint

    model, cfg = load_checkpoint(checkpoint)
    torch.set_num_threads(cfg.threads)
    return evaluate_items(load_split(manifest), model_predictor(model, bypass_frm),
                          extra={"checkpoint": Path(checkpoint).name, "manifest": Path(manifest).name,
                                 "frm": "bypassed" if bypass_frm else "on"})
