"""Synthetic dot scenes: coloured discs on a dark noisy background."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene import AnnotatedScene, BoxAnnotation

CLASS_NAMES = ("red disc", "green disc", "blue disc", "yellow disc")
CLASS_COLORS = np.array([(225, 45, 40), (40, 205, 65), (55, 85, 235), (225, 205, 40)], dtype=np.float64)


@dataclass
class SceneConfig:
    width: int = 64
    height: int = 64
    count_min: int = 3
    count_max: int = 12
    radius_min: float = 2.5
    radius_max: float = 3.5
    num_classes: int = 4
    min_gap: float = 1.0       # minimum free space between disc rims
    background_max: int = 24   # background noise is uniform in [0, background_max]
    exemplars: int = 3
    layout: str = "lattice"    # "lattice" (regular rows, like trays or parking rows) or "random"
    spacing: int = 8           # lattice pitch in pixels
    shade_jitter: float = 0.0  # per-object brightness spread


def _place_centers(cfg: SceneConfig, n: int, radii: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    centers = np.zeros((n, 2))
    for i in range(n):
        r = radii[i]
        for _ in range(1000):
            c = rng.uniform([r, r], [cfg.width - r, cfg.height - r])
            if i == 0 or np.all(np.hypot(*(centers[:i] - c).T) >= radii[:i] + r + cfg.min_gap):
                break
        else:
            raise RuntimeError("could not place discs; lower count_max or radius")
        centers[i] = c
    return centers


def _lattice_centers(cfg: SceneConfig, n: int, r: float, rng: np.random.Generator) -> np.ndarray:
    """Row-major fill of a random-width grid; the last row may be partial."""
    sp = cfg.spacing
    max_cols = int((cfg.width - 2 * r) // sp) + 1
    max_rows = int((cfg.height - 2 * r) // sp) + 1
    lo = max(1, -(-n // max_rows))
    cols = int(rng.integers(lo, min(max_cols, n) + 1))
    rows = -(-n // cols)
    span_x, span_y = (cols - 1) * sp, (rows - 1) * sp
    ox = rng.uniform(r, cfg.width - r - span_x)
    oy = rng.uniform(r, cfg.height - r - span_y)
    k = np.arange(n)
    return np.stack([ox + (k % cols) * sp, oy + (k // cols) * sp], axis=1)


def generate_scene(cfg: SceneConfig, rng: np.random.Generator, image_id: int = 0) -> AnnotatedScene:
    """One scene with N ~ U{count_min..count_max} non-overlapping discs of a single class."""
    n = int(rng.integers(cfg.count_min, cfg.count_max + 1))
    cls = int(rng.integers(cfg.num_classes))
    if cfg.layout == "lattice":
        radii = np.full(n, rng.uniform(cfg.radius_min, cfg.radius_max))
        centers = _lattice_centers(cfg, n, radii[0], rng)
    else:
        radii = rng.uniform(cfg.radius_min, cfg.radius_max, size=n)
        centers = _place_centers(cfg, n, radii, rng)
    shade = rng.uniform(0.85, 1.0) * (1.0 - cfg.shade_jitter * rng.random(n))

    img = rng.integers(0, cfg.background_max + 1, size=(cfg.height, cfg.width, 3)).astype(np.float64)
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width] + 0.5
    for (cx, cy), r, a in zip(centers, radii, shade):
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[inside] = CLASS_COLORS[cls % len(CLASS_COLORS)] * a
    image = np.clip(np.round(img), 0, 255).astype(np.uint8)

    boxes = [BoxAnnotation(max(0.0, cx - r), max(0.0, cy - r), min(float(cfg.width), cx + r),
                           min(float(cfg.height), cy + r)) for (cx, cy), r in zip(centers, radii)]
    exemplar_ids = sorted(int(i) for i in rng.choice(n, size=min(cfg.exemplars, n), replace=False))
    return AnnotatedScene(image_id=image_id, width=cfg.width, height=cfg.height, boxes=boxes,
                          label=CLASS_NAMES[cls % len(CLASS_NAMES)], category_id=cls,
                          exemplar_ids=exemplar_ids, file_name=f"{image_id:06d}.png", image=image)


def generate_scenes(cfg: SceneConfig, count: int, seed: int, start_id: int = 0) -> list[AnnotatedScene]:
    rng = np.random.default_rng(seed)
    return [generate_scene(cfg, rng, start_id + i) for i in range(count)]


def carpk_like_scene(rng: np.random.Generator, image_id: int = 0, width: int = 256, height: int = 256,
                     car: tuple[int, int] = (10, 18)) -> AnnotatedScene:
    """Rows of parked-car boxes with jitter and gaps, annotations only."""
    cw, ch = car
    boxes = []
    row_gap = int(rng.integers(4, 14))
    y = int(rng.integers(2, 12))
    while y + ch <= height - 2:
        x = int(rng.integers(2, 10))
        while x + cw <= width - 2:
            if rng.random() < 0.8:
                jx, jy = rng.uniform(-1.0, 1.0, size=2)
                boxes.append(BoxAnnotation(x + jx, y + jy, x + jx + cw, y + jy + ch).clipped(width, height))
            x += cw + int(rng.integers(1, 4))
        y += ch + row_gap
    if not boxes:
        boxes.append(BoxAnnotation(0, 0, cw, ch))
    return AnnotatedScene(image_id=image_id, width=width, height=height, boxes=boxes, label="car")
