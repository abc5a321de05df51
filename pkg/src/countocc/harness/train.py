"""Two-stage teacher/student curriculum on synthetic dot scenes.

Stage 1 trains the reconstructor (and the student head) with the reconstruction
and counting losses; stage 2 adds attention similarity and RoI consistency on
teacher/student GradCAM maps. The backbone is frozen throughout and the teacher
branch is fixed once its warm-up is done.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..config import Config
from ..frm import FrmConfig
from ..gradcam import gradcam, normalize_max
from ..losses import LossWeights, reconstruction_loss, viseq_losses
from ..occlusion import EvalOccConfig, OcclusionMask, TrainOccConfig, build_eval_mask, sample_training_mask
from ..pyramid import FeaturePyramid, occluded_values
from .model import Batch, CountingModel, ModelConfig, make_batch, predict_counts
from .synthetic import SceneConfig, generate_scenes

log = logging.getLogger(__name__)

# fixed sub-stream ids derived from the master seed
STREAM_TRAIN_SCENES, STREAM_EVAL_SCENES, STREAM_EVAL_MASKS, STREAM_STEPS, STREAM_TEACHER = range(5)


class NonFiniteLoss(RuntimeError):
    def __init__(self, record):
        super().__init__(f"non-finite loss: {record}")
        self.record = record


def stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag])


def scene_config(cfg: Config) -> SceneConfig:
    return SceneConfig(width=cfg.image_size, height=cfg.image_size, count_min=cfg.count_min,
                       count_max=cfg.count_max, num_classes=cfg.num_classes, layout=cfg.layout,
                       spacing=cfg.spacing, radius_min=cfg.radius_min, radius_max=cfg.radius_max,
                       background_max=cfg.background_max)


def train_occ_config(cfg: Config) -> TrainOccConfig:
    return TrainOccConfig(cfg.train_occ_p, cfg.alpha_min, cfg.alpha_max, cfg.train_side_min,
                          cfg.train_side_max, cfg.max_attempts)


def eval_occ_config(cfg: Config) -> EvalOccConfig:
    return EvalOccConfig(cfg.target_lo, cfg.target_hi, cfg.eval_side_max, cfg.eval_side_min)


def build_model(cfg: Config) -> CountingModel:
    torch.manual_seed(cfg.seed)
    mcfg = ModelConfig(channels=tuple(cfg.channels), strides=tuple(cfg.strides),
                       image_size=(cfg.image_size, cfg.image_size), num_classes=cfg.num_classes,
                       fusion_dim=cfg.fusion_dim, head_hidden=cfg.head_hidden, backbone_seed=cfg.seed)
    fcfg = FrmConfig(heads=cfg.frm_heads, layers=cfg.frm_layers, pre_norm=cfg.pre_norm, sa_residual=cfg.sa_residual,
                     active_levels=cfg.active_levels())
    return CountingModel(mcfg, fcfg)


def make_optimizer(cfg: Config, params, lr: float) -> torch.optim.Optimizer:
    if cfg.optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=cfg.momentum)
    if cfg.optimizer == "adam":
        return torch.optim.Adam(params, lr=lr)
    raise ValueError(f"unknown optimizer {cfg.optimizer!r}")


def make_schedule(cfg: Config, optimizer, steps: int):
    if cfg.lr_schedule == "cosine":
        return torch.optim.lr_scheduler.LambdaLR(
            optimizer, lambda i: 0.5 * (1.0 + math.cos(math.pi * min(i, steps) / max(steps, 1))))
    if cfg.lr_schedule == "constant":
        return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda i: 1.0)
    raise ValueError(f"unknown lr schedule {cfg.lr_schedule!r}")


def attention_maps(model: CountingModel, batch: Batch, teacher, student, cfg: Config):
    """(G_T, G_S) at input resolution, max-normalised when configured."""
    size = (batch.images.shape[2], batch.images.shape[3])
    g_t = gradcam(teacher.pyramid, model.teacher_head_fn(batch), k=cfg.topk, output_dims=size).G.detach()
    g_s = gradcam(student.pyramid, model.student_head_fn(batch), k=cfg.topk, output_dims=size,
                  second_order=cfg.second_order).G
    if cfg.normalize_maps:
        g_t, g_s = normalize_max(g_t), normalize_max(g_s)
    return g_t, g_s


def teacher_tokens(teacher_pyramid, student) -> list:
    """Teacher features at each level's occluded positions, aligned with the student's tokens."""
    out = []
    for lvl, rec in enumerate(student.reconstruction.tokens):
        if rec is None:
            out.append(None)
            continue
        out.append(occluded_values(teacher_pyramid.levels[lvl], student.reconstruction.splits[lvl]))
    return out


def student_rec_tokens(student) -> list:
    return [t for t in student.reconstruction.tokens]


def curriculum_loss(model: CountingModel, batch: Batch, stage: int, cfg: Config,
                    rec_weights: LossWeights, sim_weights: LossWeights):
    """Stage-1 objective (reconstruction + counting), plus similarity and consistency in stage 2.

    Sums over positions are divided by the batch size so the learning rate does not depend on it.
    """
    b = batch.images.shape[0]
    with torch.no_grad():
        teacher = model.forward_teacher(batch)
    student = model.forward_student(batch)
    rec = reconstruction_loss(student_rec_tokens(student), teacher_tokens(teacher.pyramid, student), rec_weights)
    count = ((student.counts - batch.counts) ** 2).mean()
    total = cfg.rec_weight * rec.total / b + cfg.count_weight * count
    record = {"stage": stage, "l2": rec.l2.item() / b, "charb": rec.charb.item() / b,
              "cos": rec.cos.item() / b, "count": count.item()}
    if stage == 2:
        g_t, g_s = attention_maps(model, batch, teacher, student, cfg)
        sim, cst = viseq_losses(g_t, g_s, sim_weights, cfg.tau)
        total = total + cfg.viseq_weight * (sim.total / b + cst)
        record.update(sim_l2=sim.l2.item() / b, sim_cos=sim.cos.item() / b, cst=cst.item())
    record["total"] = total.item()
    return total, record


@dataclass
class Trainer:
    cfg: Config
    model: CountingModel = None
    train_scenes: list = field(default_factory=list)
    eval_scenes: list = field(default_factory=list)
    eval_masks: list = field(default_factory=list)
    log_records: list = field(default_factory=list)
    step: int = 0

    def __post_init__(self):
        cfg = self.cfg
        torch.set_num_threads(cfg.threads)
        torch.use_deterministic_algorithms(True)
        if self.model is None:
            self.model = build_model(cfg)
        scfg = scene_config(cfg)
        if not self.train_scenes:
            self.train_scenes = generate_scenes(scfg, cfg.train_scenes, seed=[cfg.seed, STREAM_TRAIN_SCENES])
        if not self.eval_scenes:
            self.eval_scenes = generate_scenes(scfg, cfg.eval_scenes, seed=[cfg.seed, STREAM_EVAL_SCENES],
                                               start_id=1_000_000)
        if not self.eval_masks:
            rng = stream(cfg.seed, STREAM_EVAL_MASKS)
            self.eval_masks = [build_eval_mask(s, eval_occ_config(cfg), rng) for s in self.eval_scenes]
        self.rng = stream(cfg.seed, STREAM_STEPS)
        self.rec_weights = LossWeights(cfg.lambda_l2, cfg.lambda_cos, cfg.lambda_char, cfg.eps_char)
        self.sim_weights = LossWeights(cfg.lambda_sim_l2, cfg.lambda_sim_cos, 0.0, cfg.eps_char)
        self.occ_cfg = train_occ_config(cfg)
        self._backbone_init = {k: v.clone() for k, v in self.model.backbone.state_dict().items()}

    # -- batches -------------------------------------------------------------------------

    def _batch(self, scenes, masks) -> Batch:
        m = self.model
        return make_batch(scenes, masks, m.cfg.strides[0], m.dims[0], m.cfg.exemplars)

    def sample_batch(self, rng=None, occlude: bool = True) -> Batch:
        rng = self.rng if rng is None else rng
        idx = rng.choice(len(self.train_scenes), size=self.cfg.batch_size, replace=False)
        scenes = [self.train_scenes[i] for i in idx]
        if occlude:
            masks = [sample_training_mask(s, self.occ_cfg, rng) for s in scenes]
        else:
            masks = [OcclusionMask.empty(s.width, s.height) for s in scenes]
        return self._batch(scenes, masks)

    def eval_batches(self, size: int = 50):
        for i in range(0, len(self.eval_scenes), size):
            yield self.eval_scenes[i:i + size], self._batch(self.eval_scenes[i:i + size], self.eval_masks[i:i + size])

    # -- teacher warm-up -----------------------------------------------------------------

    def pretrain_teacher(self) -> None:
        """Fit the teacher's fusion/head on clean scenes, then freeze it and copy it into the student."""
        m, cfg = self.model, self.cfg
        params = list(m.teacher_fusion.parameters()) + list(m.teacher_head.parameters())
        opt = make_optimizer(cfg, params, cfg.lr_teacher)
        rng = stream(cfg.seed, STREAM_TEACHER)
        for _ in range(cfg.teacher_steps):
            batch = self.sample_batch(rng, occlude=False)
            out = m.forward_teacher(batch)
            loss = ((out.counts - batch.counts) ** 2).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        m.freeze_teacher()

    # -- one optimisation step ----------------------------------------------------------

    def losses(self, batch: Batch, stage: int):
        """(total loss, log record) for one batch; teacher targets carry no gradient."""
        return curriculum_loss(self.model, batch, stage, self.cfg, self.rec_weights, self.sim_weights)

    def train_step(self, batch: Batch, stage: int, optimizer: torch.optim.Optimizer) -> dict:
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        m, cfg = self.model, self.cfg
        total, record = self.losses(batch, stage)
        record = {"step": self.step, **record}
        if not all(math.isfinite(v) for v in record.values() if isinstance(v, float)):
            raise NonFiniteLoss(record)
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        for p in m.backbone.parameters():
            if p.grad is not None and bool((p.grad != 0).any()):
                raise RuntimeError("backbone received a gradient")
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_([p for g in optimizer.param_groups for p in g["params"]], cfg.grad_clip)
        optimizer.step()
        self.step += 1
        return record

    def run_stage(self, stage: int, steps: int, lr: float, log_file=None) -> None:
        params = self.model.trainable_parameters(head=self.cfg.head_trainable)
        opt = make_optimizer(self.cfg, params, lr)
        sched = make_schedule(self.cfg, opt, steps)
        self.model.train()
        for _ in range(steps):
            rec = self.train_step(self.sample_batch(), stage, opt)
            sched.step()
            if rec["step"] % self.cfg.log_every == 0:
                self.log_records.append(rec)
                if log_file is not None:
                    log_file.write(json.dumps(rec, sort_keys=True) + "\n")

    def backbone_unchanged(self) -> bool:
        return all(torch.equal(v, self._backbone_init[k]) for k, v in self.model.backbone.state_dict().items())

    # -- held-out measurements ------------------------------------------------------------

    @torch.no_grad()
    def heldout_reconstruction_loss(self) -> float:
        m, total, n = self.model, 0.0, 0
        for scenes, batch in self.eval_batches():
            teacher = m.forward_teacher(batch)
            student = m.forward_student(batch)
            rec = reconstruction_loss(student_rec_tokens(student), teacher_tokens(teacher.pyramid, student),
                                      self.rec_weights)
            total += float(rec.total)
            n += len(scenes)
        return total / n

    @torch.no_grad()
    def heldout_predictions(self, bypass_frm: bool = False) -> list[dict]:
        m, rows = self.model, []
        for scenes, batch in self.eval_batches():
            student = m.forward_student(batch, bypass_frm=bypass_frm)
            lm0 = student.level_masks[0]
            for i, s in enumerate(scenes):
                tot, vis, occ = predict_counts(student.density[i], lm0[i])
                rows.append({"id": s.image_id, "pred": tot, "pred_vis": vis, "pred_occ": occ})
        for row, scene, mask in zip(rows, self.eval_scenes, self.eval_masks):
            n_occ = len(mask.occluded_instance_ids)
            row.update(gt=float(scene.count), gt_vis=float(scene.count - n_occ), gt_occ=float(n_occ))
        return rows

    def heldout_attention_l2(self, reconstructor: str = "frm") -> float:
        """Mean per-image L2 distance ||G_T - G_S|| between teacher and student attention maps.

        ``reconstructor="teacher"`` fills the occluded cells with the teacher's own features instead of the
        FRM output: a perfect reconstructor, so the result is the floor any FRM can reach.
        """
        m, total, n = self.model, 0.0, 0
        for scenes, batch in self.eval_batches():
            with torch.no_grad():
                teacher = m.forward_teacher(batch)
                student = m.forward_student(batch)
            if reconstructor == "teacher":
                levels = [torch.where(lm[:, None] > 0.5, zt, zr) for lm, zt, zr in
                          zip(student.level_masks, teacher.pyramid.levels, student.raw.levels)]
                student = dataclasses.replace(student, pyramid=FeaturePyramid(levels))
            elif reconstructor != "frm":
                raise ValueError(f"unknown reconstructor {reconstructor!r}")
            g_t, g_s = attention_maps(m, batch, teacher, student, self.cfg)
            total += float((g_t - g_s).detach().flatten(1).norm(dim=1).sum())
            n += len(scenes)
        return total / n
