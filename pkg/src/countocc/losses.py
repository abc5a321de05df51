"""Distillation and attention-consistency objectives.

All functions take torch tensors and are differentiable w.r.t. the student side.
Zero-norm vectors get cosine similarity 0, so the cosine term then contributes
its full weight instead of NaN.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch


@dataclass
class LossWeights:
    l2: float = 1.0
    cos: float = 1.0
    char: float = 1.0
    eps: float = 1e-3

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("Charbonnier epsilon must be positive")
        if min(self.l2, self.cos, self.char) < 0:
            raise ValueError("loss weights must be non-negative")


# Reconstruction-loss ablation rows: plain l2, l2 + cosine, l2 + cosine + Charbonnier.
ABLATIONS = {
    "l2": LossWeights(l2=1.0, cos=0.0, char=0.0),
    "l2+cos": LossWeights(l2=1.0, cos=1.0, char=0.0),
    "l2+cos+charb": LossWeights(l2=1.0, cos=1.0, char=1.0),
}


@dataclass
class RecLoss:
    total: torch.Tensor
    l2: torch.Tensor
    charb: torch.Tensor
    cos: torch.Tensor
    positions: int

    def as_dict(self) -> dict[str, float]:
        return {"l2": float(self.l2), "charb": float(self.charb), "cos": float(self.cos)}


def safe_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Row-wise cosine similarity along the last dim, 0 where either row has zero norm."""
    dot = (a * b).sum(-1)
    denom = a.norm(dim=-1) * b.norm(dim=-1)
    ok = denom > 0
    return torch.where(ok, dot / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(dot))


def _stack_level(tokens) -> torch.Tensor | None:
    if tokens is None:
        return None
    if torch.is_tensor(tokens):
        return tokens.reshape(-1, tokens.shape[-1])
    tokens = [t for t in tokens if t is not None and t.shape[0] > 0]
    if not tokens:
        return None
    return torch.cat([t.reshape(-1, t.shape[-1]) for t in tokens], dim=0)


def reconstruction_loss(student: Sequence, teacher: Sequence, weights: LossWeights) -> RecLoss:
    """Multi-scale l2 + Charbonnier + cosine loss summed over levels and occluded positions.

    ``student[l]`` / ``teacher[l]`` hold the tokens of level ``l`` as a P x C tensor or
    a per-batch list of such tensors, aligned position by position.
    """
    if len(student) != len(teacher):
        raise ValueError("student and teacher must have the same number of levels")
    l2_sum = char_sum = cos_sum = None
    positions = 0
    for s_lvl, t_lvl in zip(student, teacher):
        s, t = _stack_level(s_lvl), _stack_level(t_lvl)
        if s is None and t is None:
            continue
        if s is None or t is None or s.shape != t.shape:
            raise ValueError("student and teacher tokens are not aligned")
        t = t.detach()
        sq = ((s - t) ** 2).sum(-1)
        l2 = sq.sum()
        ch = torch.sqrt(sq + weights.eps ** 2).sum()
        cs = (1.0 - safe_cosine(s, t)).sum()
        l2_sum = l2 if l2_sum is None else l2_sum + l2
        char_sum = ch if char_sum is None else char_sum + ch
        cos_sum = cs if cos_sum is None else cos_sum + cs
        positions += s.shape[0]
    if l2_sum is None:
        z = torch.zeros((), dtype=torch.float32)
        return RecLoss(z, z, z, z, 0)
    l2_t = weights.l2 * l2_sum
    ch_t = weights.char * char_sum
    cs_t = weights.cos * cos_sum
    return RecLoss(l2_t + ch_t + cs_t, l2_t, ch_t, cs_t, positions)


@dataclass
class SimLoss:
    total: torch.Tensor
    l2: torch.Tensor
    cos: torch.Tensor


def attention_similarity_loss(g_teacher: torch.Tensor, g_student: torch.Tensor, weights: LossWeights) -> SimLoss:
    """Pixel-wise squared distance plus (1 - cosine) of the flattened maps, summed over the batch."""
    if g_teacher.shape != g_student.shape:
        raise ValueError("attention maps differ in shape")
    t = g_teacher.detach()
    b = t.shape[0] if t.dim() == 3 else 1
    t2, s2 = t.reshape(b, -1), g_student.reshape(b, -1)
    l2 = weights.l2 * ((t2 - s2) ** 2).sum()
    cs = weights.cos * (1.0 - safe_cosine(t2, s2)).sum()
    return SimLoss(l2 + cs, l2, cs)


def roi_mask(g_teacher: torch.Tensor, g_student: torch.Tensor, tau: float) -> torch.Tensor:
    return ((g_teacher + g_student) >= tau).to(g_student.dtype)


@dataclass
class RoiStats:
    mean: torch.Tensor  # per batch element
    std: torch.Tensor
    size: torch.Tensor

    @property
    def empty(self) -> torch.Tensor:
        return self.size == 0


def roi_stats(g: torch.Tensor, roi: torch.Tensor) -> RoiStats:
    """Masked mean and population standard deviation per batch element."""
    if g.dim() == 2:
        g, roi = g[None], roi[None]
    b = g.shape[0]
    g2, m2 = g.reshape(b, -1), roi.reshape(b, -1).to(g.dtype)
    size = m2.sum(-1)
    denom = torch.where(size > 0, size, torch.ones_like(size))
    r = g2 * m2
    mean = r.sum(-1) / denom
    var = (m2 * (r - mean[:, None]) ** 2).sum(-1) / denom
    pos = var > 0
    std = torch.where(pos, torch.sqrt(torch.where(pos, var, torch.ones_like(var))), torch.zeros_like(var))
    return RoiStats(mean, std, size)


def consistency_loss(stats_t: RoiStats, stats_s: RoiStats, tau: float) -> torch.Tensor:
    """Batch mean of sigma_T + sigma_S + hinge(tau/2 - mu_T) + hinge(tau/2 - mu_S); empty RoIs add 0."""
    half = 0.5 * tau
    per = (stats_t.std + stats_s.std
           + torch.clamp(half - stats_t.mean, min=0.0) + torch.clamp(half - stats_s.mean, min=0.0))
    valid = (stats_t.size > 0) & (stats_s.size > 0)
    per = torch.where(valid, per, torch.zeros_like(per))
    return per.mean()


def viseq_losses(g_teacher: torch.Tensor, g_student: torch.Tensor, weights: LossWeights, tau: float):
    """(similarity breakdown, consistency loss) for one pair of attention maps."""
    sim = attention_similarity_loss(g_teacher, g_student, weights)
    roi = roi_mask(g_teacher.detach(), g_student.detach(), tau)
    cst = consistency_loss(roi_stats(g_teacher.detach(), roi), roi_stats(g_student, roi), tau)
    return sim, cst
