"""Full curriculum run: teacher warm-up, stage 1, stage 2, held-out measurements and artifacts."""

from __future__ import annotations

import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..checkpoint import save_checkpoint
from ..config import Config
from ..losses import LossWeights
from ..metrics import ImageRecord, MetricsReport
from ..occlusion import apply_mask
from ..scene import occlusion_record, save_gray, save_image, write_manifest
from . import train as T

log = logging.getLogger(__name__)


def git_describe(cwd=None) -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=cwd or Path(__file__).parent,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


def report_from_rows(rows: list[dict], extra=None) -> MetricsReport:
    records = [ImageRecord(id=r["id"], y=r["gt"], y_hat=r["pred"], y_vis=r["gt_vis"], y_hat_vis=r["pred_vis"],
                           y_occ=r["gt_occ"], y_hat_occ=r["pred_occ"]) for r in rows]
    return MetricsReport.from_records(records, extra=extra)


@dataclass
class RunResult:
    rec_initial: float
    rec_stage1: float
    report_bypass: MetricsReport
    report_stage1: MetricsReport
    report_stage2: MetricsReport
    attention_l2_start: float
    attention_l2_end: float
    attention_l2_floor: float  # stage-2 start model with teacher features in the occluded cells
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def rec_reduction(self) -> float:
        return 1.0 - self.rec_stage1 / self.rec_initial

    @property
    def attention_reduction(self) -> float:
        return 1.0 - self.attention_l2_end / self.attention_l2_start

    @property
    def attention_reduction_bound(self) -> float:
        """Largest reduction a perfect reconstructor could reach; boundary cells stay as they are."""
        return 1.0 - self.attention_l2_floor / self.attention_l2_start

    def summary(self) -> dict:
        """Everything measured, without wall-clock time, so two runs can be compared byte for byte."""
        return {
            "rec_initial": self.rec_initial, "rec_stage1": self.rec_stage1, "rec_reduction": self.rec_reduction,
            "mae_bypass": self.report_bypass.mae, "mae_stage1": self.report_stage1.mae,
            "mae_stage2": self.report_stage2.mae, "rmse_stage1": self.report_stage1.rmse,
            "rmse_stage2": self.report_stage2.rmse,
            "attention_l2_start": self.attention_l2_start, "attention_l2_end": self.attention_l2_end,
            "attention_reduction": self.attention_reduction, "attention_l2_floor": self.attention_l2_floor,
            "attention_reduction_bound": self.attention_reduction_bound,
        }


def run_manifest(cfg: Config) -> dict:
    return {
        "config": cfg.to_dict(),
        "seeds": {"master": cfg.seed, "streams": {"train_scenes": T.STREAM_TRAIN_SCENES,
                                                  "eval_scenes": T.STREAM_EVAL_SCENES,
                                                  "eval_masks": T.STREAM_EVAL_MASKS, "steps": T.STREAM_STEPS,
                                                  "teacher": T.STREAM_TEACHER}},
        "loss_weights": {"rec": asdict(LossWeights(cfg.lambda_l2, cfg.lambda_cos, cfg.lambda_char, cfg.eps_char)),
                         "sim": {"l2": cfg.lambda_sim_l2, "cos": cfg.lambda_sim_cos}, "tau": cfg.tau,
                         "count": cfg.count_weight, "rec_scale": cfg.rec_weight, "viseq_scale": cfg.viseq_weight},
        "stages": {"teacher_warmup": [0, cfg.teacher_steps], "stage1": [0, cfg.stage1_steps],
                   "stage2": [cfg.stage1_steps, cfg.stage1_steps + cfg.stage2_steps]},
        "code": git_describe(),
    }


def export_eval_split(trainer: T.Trainer, out_dir) -> Path:
    """Write the held-out scenes for ``countocc eval``: clean images plus occlusion records.

    Evaluation applies each mask from its record; occluded previews and mask rasters are written alongside.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    occ = {}
    for scene, mask in zip(trainer.eval_scenes, trainer.eval_masks):
        save_image(out / scene.file_name, scene.image)
        save_image(out / f"{scene.image_id:06d}_occluded.png", apply_mask(scene.image, mask))
        save_gray(out / f"{scene.image_id:06d}_mask.png", mask.to_raster())
        occ[scene.image_id] = occlusion_record(mask)
    path = out / "manifest.json"
    write_manifest(path, trainer.eval_scenes, occ, extra={"split": "heldout", "seed": trainer.cfg.seed})
    return path


def run_curriculum(cfg: Config, out_dir=None, export_split: bool = True) -> RunResult:
    """Train and measure; with ``out_dir`` also write config, manifest, log, reports and checkpoint."""
    t0 = time.perf_counter()
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        (out / "run_manifest.json").write_text(json.dumps(run_manifest(cfg), indent=1, sort_keys=True))
        log_file = open(out / "train_log.jsonl", "w")
    try:
        tr = T.Trainer(cfg)
        tr.pretrain_teacher()
        rec0 = tr.heldout_reconstruction_loss()
        log.info("teacher ready, held-out reconstruction loss %.3f", rec0)
        tr.run_stage(1, cfg.stage1_steps, cfg.lr_stage1, log_file)
        rec1 = tr.heldout_reconstruction_loss()
        rep1 = report_from_rows(tr.heldout_predictions(), {"stage": 1})
        rep_bypass = report_from_rows(tr.heldout_predictions(bypass_frm=True), {"stage": 1, "frm": "bypassed"})
        att0 = tr.heldout_attention_l2()
        att_floor = tr.heldout_attention_l2(reconstructor="teacher")
        log.info("stage 1 done: rec %.3f (%.1f%% down), mae %.4f, bypass mae %.4f",
                 rec1, 100 * (1 - rec1 / rec0), rep1.mae, rep_bypass.mae)
        tr.run_stage(2, cfg.stage2_steps, cfg.lr_stage2, log_file)
        att1 = tr.heldout_attention_l2()
        rep2 = report_from_rows(tr.heldout_predictions(), {"stage": 2})
        log.info("stage 2 done: attention l2 %.3f -> %.3f (floor %.3f), mae %.4f", att0, att1, att_floor, rep2.mae)
    finally:
        if log_file is not None:
            log_file.close()
    result = RunResult(rec0, rec1, rep_bypass, rep1, rep2, att0, att1, att_floor, list(tr.log_records),
                       time.perf_counter() - t0)
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(result.summary(), indent=1, sort_keys=True))
        for name, rep in (("report_stage1", rep1), ("report_stage2", rep2), ("report_bypass", rep_bypass)):
            (out / f"{name}.json").write_text(rep.to_json())
        save_checkpoint(out / "checkpoint.npz", tr.model, cfg, extra={"steps": tr.step})
        if export_split:
            export_eval_split(tr, out / "heldout")
    return result
