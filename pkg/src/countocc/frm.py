"""Feature reconstruction: per-level attention decoders that fill occluded pyramid positions.

Each level runs, for every batch element, the stack

    Q0    = mask_embedding + pos(occluded positions)
    Qsa   = SelfAttn(Q0) + Q0        (the "+ Q0" is dropped when sa_residual is off)
    Qvis  = CrossAttn(Qsa, visible tokens) + Qsa
    Zcond = CrossAttn(Qvis, semantic tokens) + Qvis
    Zocc  = MLP(Zcond) + Zcond

and the reconstructed tokens are scattered back into the level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from .pyramid import FeaturePyramid, TokenSplit, reassemble, separate_tokens


def _frequencies(n: int, count: int) -> torch.Tensor:
    # radians per cell, log-spaced from a 2-cell period (Nyquist) to an n-cell period
    if count == 1 or n <= 2:
        return torch.full((count,), math.pi, dtype=torch.float64)
    return math.pi * (2.0 / n) ** (torch.arange(count, dtype=torch.float64) / (count - 1))


def sinusoidal_position_table(height: int, width: int, channels: int) -> torch.Tensor:
    """Fixed 2-D sine/cosine table, (H*W) x C in row-major order; first half encodes y, second x."""
    if channels % 4:
        raise ValueError("positional encoding needs channels divisible by 4")
    quarter = channels // 4
    ys = torch.arange(height, dtype=torch.float64)[:, None] * _frequencies(height, quarter)
    xs = torch.arange(width, dtype=torch.float64)[:, None] * _frequencies(width, quarter)
    ey = torch.cat([torch.sin(ys), torch.cos(ys)], dim=1)  # H x C/2
    ex = torch.cat([torch.sin(xs), torch.cos(xs)], dim=1)  # W x C/2
    table = torch.cat([ey[:, None, :].expand(height, width, -1), ex[None, :, :].expand(height, width, -1)], dim=2)
    return table.reshape(height * width, channels).to(torch.float32)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product multi-head attention without residual."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        if channels % heads:
            raise ValueError(f"{heads} heads do not divide {channels} channels")
        self.heads = heads
        self.q = nn.Linear(channels, channels)
        self.k = nn.Linear(channels, channels)
        self.v = nn.Linear(channels, channels)
        self.o = nn.Linear(channels, channels)

    def forward(self, queries, keys_values, key_pos=None, return_weights=False):
        n, c = queries.shape
        m = keys_values.shape[0]
        d = c // self.heads
        keys = keys_values if key_pos is None else keys_values + key_pos
        q = self.q(queries).reshape(n, self.heads, d).transpose(0, 1)
        k = self.k(keys).reshape(m, self.heads, d).transpose(0, 1)
        v = self.v(keys_values).reshape(m, self.heads, d).transpose(0, 1)
        weights = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(d), dim=-1)  # heads x n x m
        out = self.o((weights @ v).transpose(0, 1).reshape(n, c))
        return (out, weights) if return_weights else out


def attend(queries: torch.Tensor, keys_values: torch.Tensor, attention: MultiHeadAttention,
           key_pos: torch.Tensor | None = None) -> torch.Tensor:
    """Cross-attention update with residual: ``attention(queries, kv) + queries``."""
    if keys_values.shape[0] == 0:
        raise ValueError("attention needs a non-empty key/value set")
    return attention(queries, keys_values, key_pos) + queries


class DecoderBlock(nn.Module):
    def __init__(self, channels: int, heads: int, mlp_ratio: int = 4, pre_norm: bool = False,
                 sa_residual: bool = True):
        super().__init__()
        self.sa_residual = sa_residual
        self.self_attn = MultiHeadAttention(channels, heads)
        self.visible_attn = MultiHeadAttention(channels, heads)
        self.semantic_attn = MultiHeadAttention(channels, heads)
        self.mlp = nn.Sequential(nn.Linear(channels, mlp_ratio * channels), nn.GELU(),
                                 nn.Linear(mlp_ratio * channels, channels))
        self.pre_norm = pre_norm
        if pre_norm:
            self.norms = nn.ModuleList(nn.LayerNorm(channels) for _ in range(4))

    def _n(self, i, x):
        return self.norms[i](x) if self.pre_norm else x

    def forward(self, q0, visible, visible_pos, semantic):
        q = self._n(0, q0)
        q_sa = self.self_attn(q, q)
        if self.sa_residual:
            q_sa = q_sa + q0
        if visible.shape[0] > 0:
            q_vis = self.visible_attn(self._n(1, q_sa), visible, visible_pos) + q_sa
        else:
            q_vis = q_sa
        z_cond = self.semantic_attn(self._n(2, q_vis), semantic) + q_vis
        return self.mlp(self._n(3, z_cond)) + z_cond


class FrmLevel(nn.Module):
    """Reconstructor for one pyramid level."""

    def __init__(self, channels: int, height: int, width: int, fusion_dim: int,
                 heads: int = 4, layers: int = 1, mlp_ratio: int = 4, pre_norm: bool = False,
                 sa_residual: bool = True):
        super().__init__()
        self.channels = channels
        self.mask_embedding = nn.Parameter(0.02 * torch.randn(channels))
        self.semantic_proj = nn.Linear(fusion_dim, channels)
        self.blocks = nn.ModuleList(DecoderBlock(channels, heads, mlp_ratio, pre_norm, sa_residual) for _ in range(layers))
        self.register_buffer("pos", sinusoidal_position_table(height, width, channels), persistent=False)

    def init_queries(self, occluded_index: torch.Tensor) -> torch.Tensor:
        return self.mask_embedding[None, :] + self.pos[occluded_index].to(self.mask_embedding.dtype)

    def project_semantic(self, z_vt: torch.Tensor) -> torch.Tensor:
        return self.semantic_proj(z_vt)

    def reconstruct_element(self, visible, visible_index, occluded_index, semantic):
        pos_occ = self.pos[occluded_index].to(visible.dtype)
        pos_vis = self.pos[visible_index].to(visible.dtype)
        q = self.init_queries(occluded_index)
        for i, block in enumerate(self.blocks):
            if i:
                q = q + pos_occ
            q = block(q, visible, pos_vis, semantic)
        return q


def reconstruct_level(level_features: torch.Tensor, level_mask: torch.Tensor, z_vt: torch.Tensor,
                      params: FrmLevel, split: TokenSplit | None = None) -> list[torch.Tensor]:
    """Reconstructed tokens (N_o x C per batch element) for the occluded positions of one level.

    ``z_vt`` holds fused text/exemplar tokens, B x N_t x fusion_dim.
    """
    if z_vt is None or z_vt.shape[1] == 0:
        raise ValueError("semantic guidance required")
    if split is None:
        split = separate_tokens(level_features, level_mask)
    semantic = params.project_semantic(z_vt)
    out = []
    for b, occ in enumerate(split.occluded_indices):
        if len(occ) == 0:
            out.append(level_features.new_zeros((0, level_features.shape[1])))
            continue
        out.append(params.reconstruct_element(split.visible_tokens[b], split.visible_indices[b], occ, semantic[b]))
    return out


@dataclass
class FrmConfig:
    heads: int = 4
    layers: int = 1
    mlp_ratio: int = 4
    pre_norm: bool = False
    # residual around self-attention; off gives Qsa = SelfAttn(Q0) with no skip
    sa_residual: bool = True
    # which pyramid levels get a reconstructor; None means all
    active_levels: list[int] | None = None


class FeatureReconstructor(nn.Module):
    def __init__(self, channels: Sequence[int], dims: Sequence[tuple[int, int]], fusion_dim: int,
                 cfg: FrmConfig | None = None):
        super().__init__()
        cfg = cfg or FrmConfig()
        self.cfg = cfg
        self.levels = nn.ModuleList(
            FrmLevel(c, h, w, fusion_dim, cfg.heads, cfg.layers, cfg.mlp_ratio, cfg.pre_norm, cfg.sa_residual)
            for c, (h, w) in zip(channels, dims)
        )
        self.active_levels = list(range(len(channels))) if cfg.active_levels is None else list(cfg.active_levels)


@dataclass
class Reconstruction:
    pyramid: FeaturePyramid
    tokens: list[list[torch.Tensor] | None] = field(default_factory=list)  # None for inactive levels
    splits: list[TokenSplit] = field(default_factory=list)


def reconstruct_pyramid(pyramid: FeaturePyramid, level_masks: Sequence[torch.Tensor], z_vt: torch.Tensor,
                        frm: FeatureReconstructor, bypass: bool = False) -> Reconstruction:
    """Complete every active level; inactive levels and mask-free levels pass through untouched."""
    levels, tokens, splits = [], [], []
    for lvl, (z, m) in enumerate(zip(pyramid.levels, level_masks)):
        split = separate_tokens(z, m)
        splits.append(split)
        if bypass or lvl not in frm.active_levels or sum(split.n_occluded) == 0:
            levels.append(z)
            tokens.append(None)
            continue
        rec = reconstruct_level(z, m, z_vt, frm.levels[lvl], split)
        tokens.append(rec)
        levels.append(reassemble(z, m, rec))
    return Reconstruction(FeaturePyramid(levels), tokens, splits)
