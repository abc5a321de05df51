"""Feature pyramids, per-level occlusion masks and the visible/occluded token split."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class FeaturePyramid:
    levels: list[torch.Tensor]  # each B x C_l x H_l x W_l

    def __post_init__(self):
        if not self.levels:
            raise ValueError("a pyramid needs at least one level")
        batch = self.levels[0].shape[0]
        prev = None
        for z in self.levels:
            if z.dim() != 4 or z.shape[0] != batch:
                raise ValueError("levels must be 4-D and share the batch dimension")
            if prev is not None and not (z.shape[2] < prev[0] and z.shape[3] < prev[1]):
                raise ValueError("spatial dims must strictly decrease with level")
            prev = z.shape[2:]

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def batch_size(self) -> int:
        return self.levels[0].shape[0]

    @property
    def dims(self) -> list[tuple[int, int]]:
        return [tuple(z.shape[2:]) for z in self.levels]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid([z.detach() for z in self.levels])


@dataclass
class TokenSplit:
    visible_tokens: list[torch.Tensor]      # per batch element: N_v x C
    occluded_indices: list[torch.Tensor]    # per batch element: N_o flat row-major positions
    visible_indices: list[torch.Tensor]
    num_positions: int

    @property
    def n_visible(self) -> list[int]:
        return [len(i) for i in self.visible_indices]

    @property
    def n_occluded(self) -> list[int]:
        return [len(i) for i in self.occluded_indices]


def downsample_mask(mask, level_dims: tuple[int, int]) -> torch.Tensor:
    """Area-pool a full-resolution mask to ``level_dims`` and threshold at 0.5.

    ``mask`` is H x W or B x H x W (numpy or torch); the result is B x h x w float
    in {0, 1}.
    """
    m = torch.as_tensor(np.asarray(mask) if not torch.is_tensor(mask) else mask)
    if m.dim() == 2:
        m = m.unsqueeze(0)
    pooled = F.adaptive_avg_pool2d(m.to(torch.float64).unsqueeze(1), level_dims).squeeze(1)
    return (pooled >= 0.5).to(torch.float32)


def _flat(level_features: torch.Tensor) -> torch.Tensor:
    b, c, h, w = level_features.shape
    return level_features.reshape(b, c, h * w).transpose(1, 2)  # B x HW x C


def separate_tokens(level_features: torch.Tensor, level_mask: torch.Tensor) -> TokenSplit:
    b, c, h, w = level_features.shape
    if tuple(level_mask.shape) != (b, h, w):
        raise ValueError(f"mask shape {tuple(level_mask.shape)} does not match level {(b, h, w)}")
    flat = _flat(level_features)
    m = level_mask.reshape(b, h * w) > 0.5
    vis_tokens, occ_idx, vis_idx = [], [], []
    for i in range(b):
        occ = torch.nonzero(m[i], as_tuple=False).flatten()
        vis = torch.nonzero(~m[i], as_tuple=False).flatten()
        occ_idx.append(occ)
        vis_idx.append(vis)
        vis_tokens.append(flat[i, vis])
    return TokenSplit(vis_tokens, occ_idx, vis_idx, h * w)


def occluded_values(level_features: torch.Tensor, split: TokenSplit) -> list[torch.Tensor]:
    flat = _flat(level_features)
    return [flat[i, idx] for i, idx in enumerate(split.occluded_indices)]


def reassemble(level_features: torch.Tensor, level_mask: torch.Tensor,
               reconstructed: Sequence[torch.Tensor]) -> torch.Tensor:
    """Put reconstructed tokens at the occluded positions; visible positions pass through."""
    b, c, h, w = level_features.shape
    split = separate_tokens(level_features, level_mask)
    if len(reconstructed) != b:
        raise ValueError(f"expected {b} reconstructed token sets, got {len(reconstructed)}")
    flat = _flat(level_features)
    rows = []
    for i in range(b):
        idx = split.occluded_indices[i]
        rec = reconstructed[i]
        if rec.shape[0] != len(idx) or (len(idx) and rec.shape[-1] != c):
            raise ValueError(f"batch element {i}: got {tuple(rec.shape)} tokens for {len(idx)} occluded positions")
        if len(idx) == 0:
            rows.append(flat[i])
        else:
            rows.append(flat[i].index_put((idx,), rec.to(flat.dtype)))
    return torch.stack(rows).transpose(1, 2).reshape(b, c, h, w)


def dump_pyramid(path, pyramid: FeaturePyramid) -> None:
    """Little-endian dump: per level a header (level, B, C, H, W) of int32 then float32 data."""
    with open(path, "wb") as f:
        for lvl, z in enumerate(pyramid.levels):
            b, c, h, w = z.shape
            f.write(struct.pack("<5i", lvl, b, c, h, w))
            f.write(z.detach().cpu().numpy().astype("<f4", copy=False).tobytes(order="C"))


def load_pyramid(path) -> FeaturePyramid:
    data = open(path, "rb").read()
    levels, off = [], 0
    while off < len(data):
        lvl, b, c, h, w = struct.unpack_from("<5i", data, off)
        off += 20
        n = b * c * h * w
        arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(b, c, h, w)
        off += 4 * n
        levels.append(torch.from_numpy(arr.copy()))
    return FeaturePyramid(levels)
