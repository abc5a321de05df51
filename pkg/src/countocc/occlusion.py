"""Rectangular occluders: object-aware training masks and benchmark-style evaluation masks.

Instance membership is decided by the center pixel of each box: an instance is
occluded iff ``mask[cy, cx] == 1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .scene import AnnotatedScene, BoxAnnotation

_EPS = 1e-9


@dataclass
class TrainOccConfig:
    apply_probability: float = 0.5
    alpha_min: float = 0.15
    alpha_max: float = 0.50
    side_min: int = 128
    side_max: int = 256
    max_attempts: int = 50

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must lie in [0, 1]")
        if not 0.0 <= self.alpha_min <= self.alpha_max <= 1.0:
            raise ValueError("need 0 <= alpha_min <= alpha_max <= 1")
        if not 1 <= self.side_min <= self.side_max:
            raise ValueError("need 1 <= side_min <= side_max")
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")


@dataclass
class EvalOccConfig:
    target_lo: float = 0.25
    target_hi: float = 0.35
    side_max: int = 256
    side_min: int = 64
    # candidate sizes tried per anchor, largest area first
    candidates: int = 8
    # None means as many rectangles as needed
    max_rectangles: int | None = None

    def __post_init__(self):
        if not 0.0 <= self.target_lo <= self.target_hi <= 1.0:
            raise ValueError("need 0 <= target_lo <= target_hi <= 1")
        if not 1 <= self.side_min <= self.side_max:
            raise ValueError("need 1 <= side_min <= side_max")


@dataclass
class OcclusionMask:
    mask: np.ndarray  # H x W uint8 in {0, 1}
    rectangles: list[tuple[int, int, int, int]] = field(default_factory=list)
    occluded_instance_ids: list[int] = field(default_factory=list)
    fallback: bool = False
    infeasible: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    @classmethod
    def empty(cls, width: int, height: int) -> "OcclusionMask":
        return cls(np.zeros((height, width), dtype=np.uint8))

    @classmethod
    def from_rectangles(cls, rectangles, width: int, height: int, centers: np.ndarray | None = None,
                        **flags) -> "OcclusionMask":
        rects = [tuple(int(v) for v in r) for r in rectangles]
        mask = rasterize(rects, width, height)
        ids = centers_in_mask(mask, centers) if centers is not None else []
        return cls(mask, rects, ids, **flags)

    def to_raster(self) -> np.ndarray:
        """0 = visible, 255 = occluded."""
        return (self.mask.astype(np.uint8) * 255)


def rasterize(rectangles, width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=np.uint8)
    for x, y, w, h in rectangles:
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > width or y + h > height:
            raise ValueError(f"rectangle {(x, y, w, h)} outside {width}x{height} image")
        mask[y:y + h, x:x + w] = 1
    return mask


def centers_in_mask(mask: np.ndarray, centers: np.ndarray) -> list[int]:
    if len(centers) == 0:
        return []
    hit = mask[centers[:, 1], centers[:, 0]] > 0
    return [int(i) for i in np.flatnonzero(hit)]


def occluded_count_range(n: int, cfg: TrainOccConfig) -> tuple[int, int]:
    """Allowed number of hidden centers for a scene with ``n`` instances."""
    if n < 4:
        return 1, min(2, n)
    return math.ceil(cfg.alpha_min * n - _EPS), math.floor(cfg.alpha_max * n + _EPS)


def _place(cx: float, cy: float, w: int, h: int, width: int, height: int) -> tuple[int, int, int, int]:
    # sides never exceed the image, then shift so the rectangle lies fully inside
    w, h = min(w, width), min(h, height)
    x = int(round(cx - w / 2.0))
    y = int(round(cy - h / 2.0))
    x = min(max(x, 0), width - w)
    y = min(max(y, 0), height - h)
    return x, y, w, h


def _count_in_rect(centers: np.ndarray, rect) -> np.ndarray:
    x, y, w, h = rect
    return (centers[:, 0] >= x) & (centers[:, 0] < x + w) & (centers[:, 1] >= y) & (centers[:, 1] < y + h)


def sample_training_mask(scene: AnnotatedScene, cfg: TrainOccConfig, rng: np.random.Generator) -> OcclusionMask:
    """Object-aware training occluder.

    With probability ``1 - apply_probability`` the mask is empty. Otherwise up to
    ``max_attempts`` rectangles centered on a random instance are tried until one
    hides an allowed number of centers; failing that, one rectangle of the same
    size range is dropped at a random position.
    """
    n = scene.count
    if n == 0:
        raise ValueError("no instances to anchor")
    W, H = scene.width, scene.height
    if rng.random() >= cfg.apply_probability:
        return OcclusionMask.empty(W, H)

    lo, hi = occluded_count_range(n, cfg)
    centers = scene.center_pixels()
    for _ in range(cfg.max_attempts):
        anchor = scene.boxes[int(rng.integers(n))]
        w = int(rng.integers(cfg.side_min, cfg.side_max + 1))
        h = int(rng.integers(cfg.side_min, cfg.side_max + 1))
        rect = _place(*anchor.center, w, h, W, H)
        hidden = int(_count_in_rect(centers, rect).sum())
        if lo <= hidden <= hi:
            return OcclusionMask.from_rectangles([rect], W, H, centers)

    w = min(int(rng.integers(cfg.side_min, cfg.side_max + 1)), W)
    h = min(int(rng.integers(cfg.side_min, cfg.side_max + 1)), H)
    x = int(rng.integers(0, W - w + 1))
    y = int(rng.integers(0, H - h + 1))
    return OcclusionMask.from_rectangles([(x, y, w, h)], W, H, centers, fallback=True)


def eval_count_window(n: int, cfg: EvalOccConfig) -> tuple[int, int, bool]:
    """(lo, hi, feasible) bounds on hidden centers for an evaluation mask."""
    lo = math.ceil(cfg.target_lo * n - _EPS)
    hi = math.floor(cfg.target_hi * n + _EPS)
    if lo <= hi and hi >= 1:
        return max(lo, 1), hi, True
    target = max(1, int(round(0.5 * (cfg.target_lo + cfg.target_hi) * n)))
    target = min(target, n)
    return target, target, False


def build_eval_mask(scene: AnnotatedScene, cfg: EvalOccConfig, rng: np.random.Generator) -> OcclusionMask:
    """Benchmark occluders: center-anchored rectangles hiding a target fraction of instances.

    A target count is drawn inside the window and rectangles are added greedily,
    each centered on a still-visible instance, trying larger sizes first and
    rejecting any that would overshoot the window. Masks that cannot reach the
    window are returned as-is with ``infeasible=True``.
    """
    n = scene.count
    if n == 0:
        raise ValueError("no instances to anchor")
    W, H = scene.width, scene.height
    lo, hi, feasible = eval_count_window(n, cfg)
    target = int(rng.integers(lo, hi + 1))
    centers = scene.center_pixels()

    hidden = np.zeros(n, dtype=bool)
    rects: list[tuple[int, int, int, int]] = []
    for anchor in rng.permutation(n):
        if hidden.sum() >= target:
            break
        if cfg.max_rectangles is not None and len(rects) >= cfg.max_rectangles:
            break
        if hidden[anchor]:
            continue
        sizes = rng.integers(cfg.side_min, cfg.side_max + 1, size=(cfg.candidates, 2))
        sizes = sorted(map(tuple, sizes), key=lambda s: -s[0] * s[1]) + [(cfg.side_min, cfg.side_min)]
        cx, cy = scene.boxes[int(anchor)].center
        for w, h in sizes:
            rect = _place(cx, cy, int(w), int(h), W, H)
            new = hidden | _count_in_rect(centers, rect)
            if new.sum() <= hi:
                hidden = new
                rects.append(rect)
                break

    got = int(hidden.sum())
    infeasible = (not feasible) or not (lo <= got <= hi)
    if not rects:
        return OcclusionMask(np.zeros((H, W), dtype=np.uint8), infeasible=True)
    return OcclusionMask.from_rectangles(rects, W, H, centers, infeasible=infeasible)


def apply_mask(image: np.ndarray, mask) -> np.ndarray:
    """Black out occluded pixels in every channel; everything else is copied untouched."""
    m = mask.mask if isinstance(mask, OcclusionMask) else np.asarray(mask)
    if m.shape != image.shape[:2]:
        raise ValueError(f"mask {m.shape} does not match image {image.shape[:2]}")
    out = image.copy()
    out[m.astype(bool)] = 0
    return out


def count_occluded_instances(mask, boxes: list[BoxAnnotation]) -> tuple[int, int]:
    """(visible, occluded) counts by center-pixel membership."""
    m = mask.mask if isinstance(mask, OcclusionMask) else np.asarray(mask)
    H, W = m.shape
    occluded = sum(1 for b in boxes if m[b.center_pixel(W, H)[::-1]] > 0)
    return len(boxes) - occluded, occluded


def mask_from_record(record: dict | None, scene: AnnotatedScene) -> OcclusionMask:
    if not record or not record.get("rectangles"):
        return OcclusionMask.empty(scene.width, scene.height)
    return OcclusionMask.from_rectangles(record["rectangles"], scene.width, scene.height, scene.center_pixels())
