"""Command-line entry point: ``countocc <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import Config
from .occlusion import (EvalOccConfig, TrainOccConfig, apply_mask, build_eval_mask, mask_from_record,
                        sample_training_mask)
from .scene import load_image, occlusion_record, read_manifest, save_gray, save_image, write_manifest

log = logging.getLogger("countocc")


def _config(args) -> Config:
    overrides = {k: getattr(args, k, None) for k in ("seed", "stage1_steps", "stage2_steps")}
    return Config.load(getattr(args, "config", None), **overrides)


# -- gen-toy -------------------------------------------------------------------------------

def cmd_gen_toy(args) -> int:
    from .harness.synthetic import generate_scenes
    from .harness.train import scene_config

    cfg = _config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = generate_scenes(scene_config(cfg), args.count, seed=[cfg.seed, args.stream], start_id=args.start_id)
    for s in scenes:
        save_image(out / s.file_name, s.image)
    write_manifest(out / "manifest.json", scenes, extra={"generator": "synthetic discs", "seed": cfg.seed})
    cfg.save(out / "config.json")
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


# -- gen-occ -------------------------------------------------------------------------------

def cmd_gen_occ(args) -> int:
    src = Path(args.manifest)
    scenes, _, doc = read_manifest(src)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    if args.mode == "train":
        cfg = TrainOccConfig(args.p, args.alpha_min, args.alpha_max, args.side_min or 128, args.side_max or 256)
    else:
        cfg = EvalOccConfig(args.target_lo, args.target_hi, args.side_max or 256, args.side_min or 64)
    records, sources, kept, failures = {}, {}, [], 0
    for scene in scenes:
        try:
            image = load_image(src.parent / scene.file_name)
        except OSError as exc:
            log.error("image %s: %s", scene.image_id, exc)
            failures += 1
            continue
        scene = dataclasses.replace(scene, image=image)
        if scene.count == 0:
            mask = mask_from_record(None, scene)
        elif args.mode == "train":
            mask = sample_training_mask(scene, cfg, rng)
        else:
            mask = build_eval_mask(scene, cfg, rng)
        save_image(out / scene.file_name, apply_mask(image, mask))
        save_gray(out / f"{Path(scene.file_name).stem}_mask.png", mask.to_raster())
        rec = occlusion_record(mask)
        rec.update(fallback=bool(mask.fallback), infeasible=bool(mask.infeasible))
        sources[scene.image_id] = os.path.relpath(src.parent / scene.file_name, out)
        records[scene.image_id] = rec
        kept.append(scene)
    info = dict(doc.get("info", {}), occlusion={"mode": args.mode, "seed": args.seed, **dataclasses.asdict(cfg)})
    written = write_manifest(out / "manifest.json", kept, records, doc.get("categories"), info)
    for entry in written["images"]:
        entry["source_file"] = sources[entry["id"]]
    (out / "manifest.json").write_text(json.dumps(written, indent=1, sort_keys=True))
    print(f"wrote {len(kept)} occluded scenes to {out}" + (f" ({failures} failed)" if failures else ""))
    return 1 if failures else 0


# -- train ---------------------------------------------------------------------------------

def cmd_train(args) -> int:
    from .harness.run import run_curriculum

    cfg = _config(args)
    result = run_curriculum(cfg, args.out_dir)
    print(json.dumps(result.summary(), indent=1, sort_keys=True))
    print(f"outputs in {args.out_dir} ({result.seconds:.0f} s)")
    return 0


# -- eval ----------------------------------------------------------------------------------

def cmd_eval(args) -> int:
    from .evaluate import evaluate_split

    report = evaluate_split(args.checkpoint, args.manifest, bypass_frm=args.bypass_frm)
    text = report.to_json()
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text)
    print(f"MAE {report.mae:.4f}  RMSE {report.rmse:.4f}  images {report.n_images}  errors {len(report.errors)}")
    for err in report.errors:
        print(f"  image {err['id']}: {err['error']}", file=sys.stderr)
    return 1 if report.errors else 0


# -- gradcam -------------------------------------------------------------------------------

def cmd_gradcam(args) -> int:
    import torch

    from .checkpoint import load_checkpoint
    from .evaluate import load_split
    from .gradcam import gradcam, heatmap_bytes
    from .harness.model import make_batch

    model, cfg = load_checkpoint(args.checkpoint)
    items = {s.image_id: (s, m) for s, m, err in load_split(args.manifest) if err is None}
    if args.image_id not in items:
        print(f"image {args.image_id} not found in {args.manifest}", file=sys.stderr)
        return 1
    scene, mask = items[args.image_id]
    # the teacher needs clean pixels: gen-occ outputs point back at them through "source_file"
    entry = next(e for e in json.loads(Path(args.manifest).read_text())["images"] if e["id"] == args.image_id)
    clean = scene
    if entry.get("source_file"):
        clean = dataclasses.replace(scene, image=load_image(Path(args.manifest).parent / entry["source_file"]))
    batch = make_batch([scene], [mask], cfg.strides[0], model.dims[0], model.cfg.exemplars)
    clean_batch = make_batch([clean], [mask], cfg.strides[0], model.dims[0], model.cfg.exemplars)
    with torch.no_grad():
        teacher, student = model.forward_teacher(clean_batch), model.forward_student(batch)
    size = (scene.height, scene.width)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, pyr, head in (("teacher", teacher.pyramid, model.teacher_head_fn(batch)),
                            ("student", student.pyramid, model.student_head_fn(batch))):
        amap = gradcam(pyr, head, k=cfg.topk, output_dims=size)
        save_gray(out / f"{args.image_id}_{name}.png", heatmap_bytes(amap.G[0]))
        print(f"{name}: beta {[round(float(b), 4) for b in amap.betas[0]]}")
    print(f"wrote {out}/{args.image_id}_teacher.png and {args.image_id}_student.png")
    return 0


# -- losscheck -----------------------------------------------------------------------------

def cmd_losscheck(args) -> int:
    from .checks import run_all

    results = run_all(args.instances)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="countocc", description="Amodal counting toolkit: occlusion synthesis, "
                                "feature reconstruction, distillation and attention consistency.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-toy", help="generate synthetic disc scenes")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--count", type=int, default=100)
    g.add_argument("--seed", type=int)
    g.add_argument("--stream", type=int, default=0, help="sub-stream of the master seed")
    g.add_argument("--start-id", type=int, default=0)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_toy)

    o = sub.add_parser("gen-occ", help="add synthetic occlusion to a COCO-style dataset")
    o.add_argument("--manifest", required=True, help="input dataset manifest (JSON)")
    o.add_argument("--out-dir", required=True)
    o.add_argument("--mode", choices=("train", "eval"), default="eval")
    o.add_argument("--seed", type=int, default=0)
    o.add_argument("--p", type=float, default=0.5, help="training-mode application probability")
    o.add_argument("--alpha-min", type=float, default=0.15)
    o.add_argument("--alpha-max", type=float, default=0.50)
    o.add_argument("--target-lo", type=float, default=0.25)
    o.add_argument("--target-hi", type=float, default=0.35)
    o.add_argument("--side-min", type=int, help="default 128 (train) / 64 (eval)")
    o.add_argument("--side-max", type=int, help="default 256")
    o.set_defaults(func=cmd_gen_occ)

    t = sub.add_parser("train", help="run the two-stage curriculum on synthetic scenes")
    t.add_argument("--config")
    t.add_argument("--seed", type=int)
    t.add_argument("--stage1-steps", type=int)
    t.add_argument("--stage2-steps", type=int)
    t.add_argument("--out-dir", default="runs/latest")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on an OCC manifest")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--report")
    e.add_argument("--bypass-frm", action="store_true", help="skip feature reconstruction (baseline)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcam", help="export teacher/student attention heatmaps for one image")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--manifest", required=True)
    c.add_argument("--image-id", type=int, required=True)
    c.add_argument("--out-dir", required=True)
    c.set_defaults(func=cmd_gradcam)

    lc = sub.add_parser("losscheck", help="run the finite-difference gradient suites")
    lc.add_argument("--instances", type=int, default=20)
    lc.set_defaults(func=cmd_losscheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
