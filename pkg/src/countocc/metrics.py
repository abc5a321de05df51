"""Counting error metrics and per-image reports."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence


def _check(preds: Sequence[float], gts: Sequence[float]) -> None:
    if len(preds) != len(gts):
        raise ValueError("predictions and ground truth differ in length")
    if len(preds) == 0:
        raise ValueError("need at least one image")


def mae(preds: Sequence[float], gts: Sequence[float]) -> float:
    _check(preds, gts)
    return math.fsum(abs(float(p) - float(g)) for p, g in zip(preds, gts)) / len(preds)


def rmse(preds: Sequence[float], gts: Sequence[float]) -> float:
    _check(preds, gts)
    return math.sqrt(math.fsum((float(p) - float(g)) ** 2 for p, g in zip(preds, gts)) / len(preds))


@dataclass
class ImageRecord:
    id: int
    y: float
    y_hat: float
    y_vis: float
    y_hat_vis: float
    y_occ: float
    y_hat_occ: float


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    n_images: int
    records: list[ImageRecord] = field(default_factory=list)
    errors: list[dict] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_records(cls, records: Sequence[ImageRecord], errors=None, extra=None) -> "MetricsReport":
        records = sorted(records, key=lambda r: r.id)
        preds = [r.y_hat for r in records]
        gts = [r.y for r in records]
        return cls(mae(preds, gts), rmse(preds, gts), len(records), list(records), list(errors or []),
                   dict(extra or {}))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        d = json.loads(text)
        d["records"] = [ImageRecord(**r) for r in d["records"]]
        return cls(**d)
