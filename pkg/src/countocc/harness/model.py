"""Toy teacher/student counting model built around the feature reconstructor."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..frm import FeatureReconstructor, FrmConfig, Reconstruction, reconstruct_pyramid
from ..pyramid import FeaturePyramid, downsample_mask
from ..scene import AnnotatedScene


class ToyBackbone(nn.Module):
    """Frozen strided patch projections, one per level."""

    def __init__(self, channels=(16, 32, 64), strides=(4, 8, 16), seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.strides = tuple(strides)
        self.convs = nn.ModuleList()
        for c, s in zip(channels, strides):
            conv = nn.Conv2d(3, c, kernel_size=s, stride=s)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * (2.0 / math.sqrt(3 * s * s)))
                conv.bias.copy_(0.1 * torch.randn(conv.bias.shape, generator=gen))
            self.convs.append(conv)
        self.requires_grad_(False)

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        return FeaturePyramid([conv(images) for conv in self.convs])

    def level_dims(self, height: int, width: int) -> list[tuple[int, int]]:
        return [(height // s, width // s) for s in self.strides]


class ToyFusion(nn.Module):
    """Fused prompt tokens: class embedding joined with each exemplar's pooled level-0 feature."""

    def __init__(self, num_classes: int, fusion_dim: int, exemplar_channels: int):
        super().__init__()
        self.class_embedding = nn.Embedding(num_classes, fusion_dim)
        self.proj = nn.Linear(fusion_dim + exemplar_channels, fusion_dim)

    @property
    def vocabulary(self) -> torch.Tensor:
        return self.class_embedding.weight

    def forward(self, level0: torch.Tensor, class_ids: torch.Tensor, exemplar_pool: torch.Tensor) -> torch.Tensor:
        b, c, h, w = level0.shape
        pooled = exemplar_pool.to(level0.dtype) @ level0.reshape(b, c, h * w).transpose(1, 2)  # B x E x C
        emb = self.class_embedding(class_ids)[:, None, :].expand(-1, pooled.shape[1], -1)
        return self.proj(torch.cat([emb, pooled], dim=-1))


class ToyHead(nn.Module):
    """Per-position queries at level-0 resolution; logits against the class vocabulary.

    The count map is ``softplus(logit of the prompted class + bias)``.
    """

    def __init__(self, channels, fusion_dim: int, hidden: int = 64):
        super().__init__()
        self.inp = nn.Linear(sum(channels), hidden)
        self.out = nn.Linear(hidden, fusion_dim)
        self.density_bias = nn.Parameter(torch.tensor(-4.0))
        self.fusion_dim = fusion_dim

    def queries(self, pyramid: FeaturePyramid) -> torch.Tensor:
        h0, w0 = pyramid.dims[0]
        feats = [pyramid.levels[0]] + [F.interpolate(z, size=(h0, w0), mode="nearest") for z in pyramid.levels[1:]]
        x = torch.cat(feats, dim=1).flatten(2).transpose(1, 2)  # B x Q x sum(C)
        return self.out(F.gelu(self.inp(x)))

    def logits(self, pyramid: FeaturePyramid, vocabulary: torch.Tensor) -> torch.Tensor:
        return self.queries(pyramid) @ vocabulary.T.to(pyramid.levels[0].dtype) / math.sqrt(self.fusion_dim)

    def forward(self, pyramid: FeaturePyramid, vocabulary: torch.Tensor, class_ids: torch.Tensor):
        logits = self.logits(pyramid, vocabulary)
        chosen = logits.gather(2, class_ids[:, None, None].expand(-1, logits.shape[1], 1))[..., 0]
        density = F.softplus(chosen + self.density_bias)
        h0, w0 = pyramid.dims[0]
        return logits, density.reshape(-1, h0, w0)


@dataclass
class Batch:
    images: torch.Tensor         # B x 3 x H x W in [0, 1]
    masks: torch.Tensor          # B x H x W in {0, 1}
    counts: torch.Tensor         # B
    class_ids: torch.Tensor      # B
    exemplar_pool: torch.Tensor  # B x E x (h0 * w0)

    @property
    def occluded_images(self) -> torch.Tensor:
        return self.images * (1.0 - self.masks[:, None])

    def to(self, dtype) -> "Batch":
        return Batch(self.images.to(dtype), self.masks.to(dtype), self.counts.to(dtype), self.class_ids,
                     self.exemplar_pool.to(dtype))


def exemplar_pool_matrix(scene: AnnotatedScene, stride: int, dims: tuple[int, int], exemplars: int) -> np.ndarray:
    """Rows average the level-0 cells covered by each exemplar box; missing exemplars are zero rows."""
    h, w = dims
    pool = np.zeros((exemplars, h * w))
    for e, box in enumerate(scene.exemplar_boxes[:exemplars]):
        x0 = min(int(box.x_min // stride), w - 1)
        y0 = min(int(box.y_min // stride), h - 1)
        x1 = max(int(math.ceil(box.x_max / stride)), x0 + 1)
        y1 = max(int(math.ceil(box.y_max / stride)), y0 + 1)
        cells = [yy * w + xx for yy in range(y0, min(y1, h)) for xx in range(x0, min(x1, w))]
        pool[e, cells] = 1.0 / len(cells)
    return pool


def make_batch(scenes, masks, stride: int, dims, exemplars: int = 3) -> Batch:
    images = np.stack([s.image for s in scenes]).astype(np.float32) / 255.0
    return Batch(
        images=torch.from_numpy(images).permute(0, 3, 1, 2).contiguous(),
        masks=torch.from_numpy(np.stack([np.asarray(m.mask if hasattr(m, "mask") else m) for m in masks])
                               .astype(np.float32)),
        counts=torch.tensor([float(s.count) for s in scenes]),
        class_ids=torch.tensor([s.category_id for s in scenes], dtype=torch.long),
        exemplar_pool=torch.from_numpy(np.stack([exemplar_pool_matrix(s, stride, dims, exemplars)
                                                 for s in scenes]).astype(np.float32)),
    )


@dataclass
class BranchOutput:
    pyramid: FeaturePyramid       # teacher: raw features; student: completed features
    logits: torch.Tensor
    density: torch.Tensor         # B x h0 x w0
    z_vt: torch.Tensor
    raw: FeaturePyramid | None = None
    reconstruction: Reconstruction | None = None
    level_masks: list[torch.Tensor] | None = None

    @property
    def counts(self) -> torch.Tensor:
        return self.density.flatten(1).sum(1)


@dataclass
class ModelConfig:
    channels: tuple = (16, 32, 64)
    strides: tuple = (4, 8, 16)
    image_size: tuple = (64, 64)
    num_classes: int = 4
    fusion_dim: int = 32
    head_hidden: int = 64
    exemplars: int = 3
    backbone_seed: int = 0


class CountingModel(nn.Module):
    """Shared frozen backbone; frozen teacher fusion/head; trainable student fusion/head and FRM."""

    def __init__(self, cfg: ModelConfig, frm_cfg: FrmConfig | None = None):
        super().__init__()
        self.cfg = cfg
        self.backbone = ToyBackbone(cfg.channels, cfg.strides, cfg.backbone_seed)
        dims = self.backbone.level_dims(*cfg.image_size)
        self.dims = dims
        self.teacher_fusion = ToyFusion(cfg.num_classes, cfg.fusion_dim, cfg.channels[0])
        self.teacher_head = ToyHead(cfg.channels, cfg.fusion_dim, cfg.head_hidden)
        self.fusion = copy.deepcopy(self.teacher_fusion)
        self.head = copy.deepcopy(self.teacher_head)
        self.frm = FeatureReconstructor(cfg.channels, dims, cfg.fusion_dim, frm_cfg)

    def freeze_teacher(self, copy_to_student: bool = True):
        """Freeze the teacher branch and (by default) start the student from a copy of it."""
        self.teacher_fusion.requires_grad_(False)
        self.teacher_head.requires_grad_(False)
        if copy_to_student:
            self.fusion.load_state_dict(self.teacher_fusion.state_dict())
            self.head.load_state_dict(self.teacher_head.state_dict())

    def level_masks(self, masks: torch.Tensor) -> list[torch.Tensor]:
        return [downsample_mask(masks, d).to(masks.dtype) for d in self.dims]

    def forward_teacher(self, batch: Batch) -> BranchOutput:
        pyr = self.backbone(batch.images)
        z_vt = self.teacher_fusion(pyr.levels[0], batch.class_ids, batch.exemplar_pool)
        logits, density = self.teacher_head(pyr, self.teacher_fusion.vocabulary, batch.class_ids)
        return BranchOutput(pyr, logits, density, z_vt)

    def forward_student(self, batch: Batch, bypass_frm: bool = False) -> BranchOutput:
        raw = self.backbone(batch.occluded_images)
        z_vt = self.fusion(raw.levels[0], batch.class_ids, batch.exemplar_pool)
        lms = self.level_masks(batch.masks)
        rec = reconstruct_pyramid(raw, lms, z_vt, self.frm, bypass=bypass_frm)
        logits, density = self.head(rec.pyramid, self.fusion.vocabulary, batch.class_ids)
        return BranchOutput(rec.pyramid, logits, density, z_vt, raw, rec, lms)

    def teacher_head_fn(self, batch: Batch):
        return lambda p: self.teacher_head.logits(p, self.teacher_fusion.vocabulary)

    def student_head_fn(self, batch: Batch):
        return lambda p: self.head.logits(p, self.fusion.vocabulary)

    def trainable_parameters(self, head: bool = True):
        params = list(self.frm.parameters())
        if head:
            params += list(self.fusion.parameters()) + list(self.head.parameters())
        return params


def predict_counts(density: torch.Tensor, count_mask: torch.Tensor) -> tuple[float, float, float]:
    """(total, visible, occluded) from one count map and its binary mask at the same resolution.

    Cells are summed in float64; the total is defined as visible + occluded.
    """
    d = density.detach().to(torch.float64).reshape(-1)
    m = count_mask.detach().reshape(-1) > 0.5
    vis = float(d[~m].sum())
    occ = float(d[m].sum())
    return vis + occ, vis, occ
