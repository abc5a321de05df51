"""Language-conditioned GradCAM over a feature pyramid.

The gradient of the matching score w.r.t. each level is supplied by a
``GradientOracle``: reverse-mode autodiff (:func:`autodiff_oracle`) or central
finite differences (:func:`finite_difference_oracle`). Channel weights and level
weights built from those gradients are constants for the returned map unless
``second_order`` is requested; the map itself stays differentiable in the level
features it was computed from.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .pyramid import FeaturePyramid

Head = Callable[[FeaturePyramid], torch.Tensor]  # pyramid -> logits B x Q x C


class GradientOracle(Protocol):
    def __call__(self, pyramid: FeaturePyramid, score_fn: Callable[[FeaturePyramid], torch.Tensor]
                 ) -> tuple[torch.Tensor, list[torch.Tensor]]: ...


def matching_score(logits: torch.Tensor, k: int = 900) -> torch.Tensor:
    """Mean of the ``k`` largest per-query maxima; one score per batch element.

    ``k`` is clamped to the number of queries.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if logits.dim() == 2:
        logits = logits[None]
    per_query = logits.max(dim=-1).values  # B x Q
    k = min(k, per_query.shape[1])
    return per_query.topk(k, dim=1).values.mean(dim=1)


def channel_weights(level_gradient: torch.Tensor) -> torch.Tensor:
    """Global-average-pooled gradient, B x C."""
    return level_gradient.mean(dim=(-2, -1))


def level_attention(alpha: torch.Tensor, level_features: torch.Tensor) -> torch.Tensor:
    """ReLU of the alpha-weighted channel sum, B x h x w."""
    return torch.relu((alpha[:, :, None, None] * level_features).sum(dim=1))


def gradient_energy(level_gradients: Sequence[torch.Tensor]) -> torch.Tensor:
    """Sum of absolute gradient entries per batch element and level, B x L."""
    return torch.stack([g.abs().flatten(1).sum(1) for g in level_gradients], dim=1)


@dataclass
class AttentionMap:
    G: torch.Tensor               # B x H x W, non-negative
    omegas: list[torch.Tensor]    # per level, B x h x w
    betas: torch.Tensor           # B x L, rows sum to 1
    energies: torch.Tensor        # B x L
    scores: torch.Tensor | None = None


def aggregate_levels(omegas: Sequence[torch.Tensor], level_gradients: Sequence[torch.Tensor],
                     output_dims: tuple[int, int]) -> AttentionMap:
    energies = gradient_energy(level_gradients)
    betas = torch.softmax(energies, dim=1)
    up = [F.interpolate(o[:, None], size=output_dims, mode="bilinear", align_corners=False)[:, 0] for o in omegas]
    G = sum(betas[:, i, None, None].to(u.dtype) * u for i, u in enumerate(up))
    return AttentionMap(G, list(omegas), betas, energies)


def autodiff_oracle(pyramid: FeaturePyramid, score_fn, create_graph: bool = False):
    """Reverse-mode gradients of the summed per-element scores."""
    if create_graph:
        # keep graph-carrying levels; constant levels (e.g. frozen, unreconstructed) become fresh leaves
        leaves = [z if z.requires_grad else z.detach().requires_grad_(True) for z in pyramid.levels]
    else:
        leaves = [z.detach().requires_grad_(True) for z in pyramid.levels]
    with torch.enable_grad():
        s = score_fn(FeaturePyramid(leaves))
        if not s.requires_grad:  # score independent of the features
            grads = [None] * len(leaves)
        else:
            grads = torch.autograd.grad(s.sum(), leaves, allow_unused=True, create_graph=create_graph)
    grads = [torch.zeros_like(z) if g is None else g for z, g in zip(leaves, grads)]
    return (s if create_graph else s.detach()), grads


def finite_difference_oracle(pyramid: FeaturePyramid, score_fn, step: float = 1e-5):
    """Central differences, one feature entry at a time; meant for small pyramids."""
    levels = [z.detach().clone() for z in pyramid.levels]
    with torch.no_grad():
        s = score_fn(FeaturePyramid(levels))
        grads = []
        for li, z in enumerate(levels):
            g = torch.zeros_like(z)
            flat, gflat = z.view(-1), g.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                up = score_fn(FeaturePyramid(levels)).sum().item()
                flat[j] = orig - step
                down = score_fn(FeaturePyramid(levels)).sum().item()
                flat[j] = orig
                gflat[j] = (up - down) / (2 * step)
            grads.append(g)
    return s, grads


def gradcam(pyramid: FeaturePyramid, head: Head, oracle: GradientOracle | None = None, k: int = 900,
            output_dims: tuple[int, int] | None = None, second_order: bool = False) -> AttentionMap:
    if output_dims is None:
        output_dims = pyramid.dims[0]

    def score_fn(p):
        return matching_score(head(p), k)

    if oracle is None:
        s, grads = autodiff_oracle(pyramid, score_fn, create_graph=second_order)
    else:
        s, grads = oracle(pyramid, score_fn)
    if len(grads) != len(pyramid) or any(g.shape != z.shape for g, z in zip(grads, pyramid.levels)):
        raise ValueError("gradient oracle returned shapes that do not match the pyramid")
    if not second_order:
        grads = [g.detach() for g in grads]
    omegas = [level_attention(channel_weights(g).to(z.dtype), z) for g, z in zip(grads, pyramid.levels)]
    amap = aggregate_levels(omegas, grads, output_dims)
    amap.scores = s
    return amap


def normalize_max(G: torch.Tensor) -> torch.Tensor:
    """Scale each map to max 1; all-zero maps stay zero."""
    m = G.flatten(1).max(dim=1).values
    safe = torch.where(m > 0, m, torch.ones_like(m))
    return G / safe[:, None, None]


def heatmap_bytes(G: torch.Tensor) -> np.ndarray:
    """8-bit rendering ``round(255 * G / max G)`` of a single H x W map."""
    g = G.detach().cpu().double().numpy()
    m = g.max()
    if m <= 0:
        return np.zeros(g.shape, dtype=np.uint8)
    return np.clip(np.round(255.0 * g / m), 0, 255).astype(np.uint8)
