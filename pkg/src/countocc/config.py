"""Flat run configuration: JSON file, then ``COUNTOCC_*`` environment overrides, then CLI flags."""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "COUNTOCC_"


@dataclass
class Config:
    seed: int = 0
    threads: int = 1

    # synthetic scenes
    image_size: int = 64
    count_min: int = 3
    count_max: int = 12
    num_classes: int = 4
    layout: str = "lattice"
    spacing: int = 16
    radius_min: float = 5.0
    radius_max: float = 6.5
    background_max: int = 24
    train_scenes: int = 2000
    eval_scenes: int = 200

    # model
    channels: tuple = (16, 32, 64)
    strides: tuple = (4, 8, 16)
    fusion_dim: int = 32
    head_hidden: int = 64
    frm_heads: int = 4
    frm_layers: int = 1
    frm_levels: str = "all"  # "all", "one" or comma-separated level ids
    pre_norm: bool = False
    sa_residual: bool = True

    # occlusion
    train_occ_p: float = 0.5
    alpha_min: float = 0.15
    alpha_max: float = 0.50
    train_side_min: int = 10
    train_side_max: int = 20
    max_attempts: int = 50
    target_lo: float = 0.25
    target_hi: float = 0.35
    eval_side_min: int = 8
    eval_side_max: int = 20

    # curriculum
    batch_size: int = 16
    teacher_steps: int = 400
    stage1_steps: int = 2500
    stage2_steps: int = 300
    optimizer: str = "adam"
    lr_teacher: float = 3e-3
    lr_stage1: float = 1e-2
    lr_stage2: float = 5e-4
    momentum: float = 0.0
    lr_schedule: str = "cosine"  # "cosine" decays to zero over each stage, "constant" keeps lr fixed
    grad_clip: float = 5.0       # global grad-norm clip; 0 disables
    head_trainable: bool = True

    # losses
    lambda_l2: float = 1.0
    lambda_cos: float = 1.0
    lambda_char: float = 1.0
    eps_char: float = 1e-3
    lambda_sim_l2: float = 1.0
    lambda_sim_cos: float = 1.0
    tau: float = 0.5
    count_weight: float = 1.0
    rec_weight: float = 1.0
    viseq_weight: float = 1.0
    topk: int = 900
    normalize_maps: bool = True
    second_order: bool = False

    log_every: int = 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "Config":
        known = {f.name: f for f in fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for k, v in data.items():
            kwargs[k] = tuple(v) if isinstance(known[k].default, tuple) else v
        return cls(**kwargs)

    @classmethod
    def load(cls, path=None, env=None, **overrides) -> "Config":
        data = json.loads(Path(path).read_text()) if path else {}
        cfg = cls.from_dict(data)
        cfg = cfg.with_env(os.environ if env is None else env)
        return cfg.replace(**{k: v for k, v in overrides.items() if v is not None})

    def with_env(self, env) -> "Config":
        updates = {}
        for f in fields(self):
            key = ENV_PREFIX + f.name.upper()
            if key in env:
                updates[f.name] = _parse(env[key], f.default)
        return self.replace(**updates)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    def active_levels(self) -> list[int] | None:
        if self.frm_levels == "all":
            return None
        if self.frm_levels == "one":
            return [0]
        return [int(x) for x in self.frm_levels.split(",") if x.strip()]


def _parse(raw: str, default):
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(int(x) for x in raw.split(","))
    return raw
