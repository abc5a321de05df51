"""Finite-difference suites behind ``countocc losscheck``.

Every check runs in float64 with central differences at step ``1e-5`` and
reports the worst relative error it saw.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .config import Config
from .gradcam import finite_difference_oracle, gradcam
from .losses import LossWeights, viseq_losses
from .occlusion import OcclusionMask
from .pyramid import FeaturePyramid, downsample_mask

STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    instances: int
    worst: float
    tolerance: float
    details: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        # a zero tolerance means the quantity must vanish exactly
        return self.worst == 0.0 if self.tolerance == 0 else self.worst < self.tolerance

    def line(self) -> str:
        return (f"{'PASS' if self.passed else 'FAIL'} {self.name}: worst {self.worst:.3e} "
                f"(tol {self.tolerance:g}, {self.instances} instances)")


def relative_error(analytic: float, numeric: float, floor: float = 1e-12) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def tiny_config(seed: int) -> Config:
    return Config(seed=seed, image_size=16, channels=(8, 8), strides=(4, 8), fusion_dim=8, head_hidden=8,
                  count_min=2, count_max=4, layout="random", radius_min=1.5, radius_max=2.0, batch_size=2)


def tiny_setup(seed: int):
    """A float64 counting model on two 16x16 scenes, each with one random occluding rectangle."""
    from .harness.model import make_batch
    from .harness.synthetic import generate_scenes
    from .harness.train import build_model, scene_config

    cfg = tiny_config(seed)
    model = build_model(cfg)
    model.freeze_teacher()
    torch.manual_seed(seed + 1)
    with torch.no_grad():  # move the student off the teacher so every loss term is generic
        for p in list(model.fusion.parameters()) + list(model.head.parameters()):
            p.add_(0.05 * torch.randn_like(p))
    model.double()
    rng = np.random.default_rng([seed, 99])
    scenes = generate_scenes(scene_config(cfg), 2, seed=[seed, 98])
    masks = []
    for s in scenes:
        while True:  # every level needs occluded and visible cells, or some FRM weights get no gradient
            w, h = rng.integers(8, 13, size=2)
            x, y = rng.integers(0, 16 - w + 1), rng.integers(0, 16 - h + 1)
            m = OcclusionMask.from_rectangles([(int(x), int(y), int(w), int(h))], 16, 16, s.center_pixels())
            cover = [downsample_mask(m.mask[None], d)[0] for d in model.dims]
            if all(0 < float(c.sum()) < c.numel() for c in cover):
                break
        masks.append(m)
    batch = make_batch(scenes, masks, cfg.strides[0], model.dims[0], model.cfg.exemplars).to(torch.float64)
    return model, batch, cfg


def stage1_gradient_check(seeds=range(20)) -> tuple[CheckResult, CheckResult]:
    """Directional derivatives of the stage-1 objective along one direction per FRM tensor,
    plus the frozen-backbone contract (no gradient ever reaches it)."""
    from .harness.train import curriculum_loss

    worst, details, backbone_max = 0.0, [], 0.0
    for seed in seeds:
        model, batch, cfg = tiny_setup(seed)
        rec_w = LossWeights(cfg.lambda_l2, cfg.lambda_cos, cfg.lambda_char, cfg.eps_char)
        sim_w = LossWeights(cfg.lambda_sim_l2, cfg.lambda_sim_cos, 0.0, cfg.eps_char)

        def loss():
            return curriculum_loss(model, batch, 1, cfg, rec_w, sim_w)[0]

        model.zero_grad(set_to_none=True)
        loss().backward()
        for p in model.backbone.parameters():
            if p.grad is not None:
                backbone_max = max(backbone_max, float(p.grad.abs().max()))
        gen = torch.Generator().manual_seed(seed)
        pairs = []
        for name, p in model.frm.named_parameters():
            # half random, half along the analytic gradient: a nearly orthogonal random direction would
            # have a derivative below finite-difference resolution, while a wrong gradient still shows up
            v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            v /= v.norm()
            gn = p.grad.norm()
            if gn > 0:
                v = v + p.grad / gn
                v /= v.norm()
            analytic = float((p.grad * v).sum())
            with torch.no_grad():
                p.add_(STEP * v)
                up = float(loss())
                p.sub_(2 * STEP * v)
                down = float(loss())
                p.add_(STEP * v)
            pairs.append((name, analytic, (up - down) / (2 * STEP)))
        # key biases shift every score of a softmax row equally, so their exact derivative is 0;
        # the floor keeps such rows from measuring pure rounding noise
        floor = 1e-6 * max(abs(a) for _, a, _ in pairs)
        for name, a, n in pairs:
            err = relative_error(a, n, floor)
            details.append((seed, name, err))
            worst = max(worst, err)
    grads = CheckResult("stage-1 loss vs FRM parameters", len(list(seeds)), worst, 1e-4, details)
    frozen = CheckResult("backbone gradient", len(list(seeds)), backbone_max, 0.0)
    frozen.details = ["max |grad| over backbone parameters (None counts as 0)"]
    return grads, frozen


def sample_maps(rng: np.random.Generator, shape=(2, 6, 6), tau: float = 0.5, margin: float = 1e-3):
    """Random teacher/student maps in [0, 1] with no pixel pair within ``margin`` of the RoI threshold."""
    while True:
        g_t, g_s = rng.random(shape), rng.random(shape)
        if np.all(np.abs(g_t + g_s - tau) > margin):
            return torch.from_numpy(g_t), torch.from_numpy(g_s)


def viseq_gradient_check(seeds=range(20), tau: float = 0.5) -> list[CheckResult]:
    """Full elementwise gradient of L_sim and L_cst w.r.t. the student map."""
    w = LossWeights(1.0, 1.0, 0.0)
    terms = {"L_sim": lambda t, s: viseq_losses(t, s, w, tau)[0].total,
             "L_cst": lambda t, s: viseq_losses(t, s, w, tau)[1]}
    results = []
    for name, fn in terms.items():
        worst, details = 0.0, []
        for seed in seeds:
            g_t, g_s = sample_maps(np.random.default_rng([seed, 7]), tau=tau)
            leaf = g_s.clone().requires_grad_(True)
            (analytic,) = torch.autograd.grad(fn(g_t, leaf), leaf)
            numeric = torch.zeros_like(g_s)
            flat, nflat = g_s.view(-1), numeric.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + STEP
                up = float(fn(g_t, g_s))
                flat[j] = orig - STEP
                down = float(fn(g_t, g_s))
                flat[j] = orig
                nflat[j] = (up - down) / (2 * STEP)
            err = float((analytic - numeric).abs().max()) / max(float(numeric.abs().max()), 1e-12)
            details.append((seed, err))
            worst = max(worst, err)
        results.append(CheckResult(f"{name} vs student map", len(list(seeds)), worst, 1e-4, details))
    return results


def gradcam_dual_oracle_check(seeds=range(5)) -> CheckResult:
    """Autodiff and finite-difference oracles give the same attention map on a 2-level pyramid."""
    worst, details = 0.0, []
    for seed in seeds:
        gen = torch.Generator().manual_seed(seed)
        pyr = FeaturePyramid([torch.randn(1, 4, 4, 4, generator=gen, dtype=torch.float64),
                              torch.randn(1, 6, 2, 2, generator=gen, dtype=torch.float64)])
        w0 = torch.randn(4, 3, generator=gen, dtype=torch.float64)
        w1 = torch.randn(6, 3, generator=gen, dtype=torch.float64)

        def head(p):
            up = torch.nn.functional.interpolate(p.levels[1], size=(4, 4), mode="nearest")
            q = p.levels[0].flatten(2).transpose(1, 2) @ w0 + torch.tanh(up.flatten(2).transpose(1, 2) @ w1)
            return q

        a = gradcam(pyr, head, k=5, output_dims=(8, 8)).G
        f = gradcam(pyr, head, oracle=lambda p, fn: finite_difference_oracle(p, fn, STEP), k=5,
                    output_dims=(8, 8)).G
        err = float((a - f).abs().max())
        details.append((seed, err))
        worst = max(worst, err)
    return CheckResult("GradCAM autodiff vs finite differences (max abs)", len(list(seeds)), worst, 1e-3, details)


def run_all(instances: int = 20) -> list[CheckResult]:
    torch.use_deterministic_algorithms(True)
    grads, frozen = stage1_gradient_check(range(instances))
    return [grads, frozen, *viseq_gradient_check(range(instances)), gradcam_dual_oracle_check()]
