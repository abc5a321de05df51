import json

import numpy as np
import pytest

from countocc.cli import main
from countocc.scene import load_image, read_gray

SMALL = {"seed": 1, "train_scenes": 40, "eval_scenes": 12, "teacher_steps": 5, "stage1_steps": 4,
         "stage2_steps": 2, "batch_size": 4, "channels": [8, 16, 16], "fusion_dim": 16, "head_hidden": 16}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.json").write_text(json.dumps(SMALL))
    assert main(["train", "--config", str(d / "small.json"), "--out-dir", str(d / "run")]) == 0
    return d


def test_train_writes_run_artifacts(run_dir):
    run = run_dir / "run"
    for name in ("config.json", "run_manifest.json", "train_log.jsonl", "metrics.json", "report_stage1.json",
                 "report_stage2.json", "report_bypass.json", "checkpoint.npz", "checkpoint.json",
                 "heldout/manifest.json"):
        assert (run / name).is_file(), name
    log = [json.loads(line) for line in (run / "train_log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in log] == list(range(6))
    assert {"l2", "charb", "cos", "total"} <= log[0].keys() and "sim_l2" in log[-1]
    manifest = json.loads((run / "run_manifest.json").read_text())
    assert manifest["stages"]["stage2"] == [4, 6] and manifest["config"]["seed"] == 1


def test_eval_on_exported_split(run_dir, capsys):
    run = run_dir / "run"
    report = run_dir / "eval.json"
    assert main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--manifest",
                 str(run / "heldout/manifest.json"), "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    stage2 = json.loads((run / "report_stage2.json").read_text())
    assert doc["n_images"] == 12 and doc["mae"] == pytest.approx(stage2["mae"], abs=1e-4)
    assert "MAE" in capsys.readouterr().out
    assert main(["eval", "--checkpoint", str(run / "checkpoint.npz"), "--manifest",
                 str(run / "heldout/manifest.json"), "--bypass-frm"]) == 0


def test_gen_toy_gen_occ_eval_and_gradcam(run_dir, tmp_path):
    toy, occ = tmp_path / "toy", tmp_path / "occ"
    assert main(["gen-toy", "--config", str(run_dir / "small.json"), "--out-dir", str(toy), "--count", "6",
                 "--stream", "5"]) == 0
    assert main(["gen-occ", "--manifest", str(toy / "manifest.json"), "--out-dir", str(occ), "--mode", "eval",
                 "--seed", "3", "--side-min", "8", "--side-max", "20"]) == 0
    doc = json.loads((occ / "manifest.json").read_text())
    assert len(doc["images"]) == 6
    assert all(e["occlusion"]["rectangles"] and "fallback" in e["occlusion"] for e in doc["images"])
    first = doc["images"][0]
    clean = load_image(occ / first["source_file"])
    shown = load_image(occ / first["file_name"])
    mask = read_gray(occ / f"{first['file_name'][:-4]}_mask.png") > 0
    assert mask.any() and np.all(shown[mask] == 0) and np.array_equal(shown[~mask], clean[~mask])
    # gen-occ output holds occluded pixels; evaluation re-applies the recorded masks, a no-op on them
    assert main(["eval", "--checkpoint", str(run_dir / "run/checkpoint.npz"), "--manifest",
                 str(occ / "manifest.json")]) == 0
    out = tmp_path / "maps"
    assert main(["gradcam", "--checkpoint", str(run_dir / "run/checkpoint.npz"), "--manifest",
                 str(occ / "manifest.json"), "--image-id", str(first["id"]), "--out-dir", str(out)]) == 0
    for who in ("teacher", "student"):
        heat = read_gray(out / f"{first['id']}_{who}.png")
        assert heat.shape == (64, 64) and heat.max() == 255
    assert main(["gradcam", "--checkpoint", str(run_dir / "run/checkpoint.npz"), "--manifest",
                 str(occ / "manifest.json"), "--image-id", "424242", "--out-dir", str(out)]) == 1


def test_gen_occ_train_mode_and_missing_image(tmp_path):
    toy, occ = tmp_path / "toy", tmp_path / "occ"
    main(["gen-toy", "--out-dir", str(toy), "--count", "5"])
    (toy / "000003.png").unlink()
    assert main(["gen-occ", "--manifest", str(toy / "manifest.json"), "--out-dir", str(occ), "--mode", "train",
                 "--p", "1.0", "--side-min", "10", "--side-max", "20"]) == 1
    doc = json.loads((occ / "manifest.json").read_text())
    assert sorted(e["id"] for e in doc["images"]) == [0, 1, 2, 4]


def test_eval_reports_broken_manifest_entries(run_dir, tmp_path, capsys):
    held = run_dir / "run/heldout"
    doc = json.loads((held / "manifest.json").read_text())
    for e in doc["images"]:
        e["file_name"] = str((held / e["file_name"]).resolve())
    doc["images"][0]["file_name"] = str(tmp_path / "gone.png")
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    code = main(["eval", "--checkpoint", str(run_dir / "run/checkpoint.npz"), "--manifest",
                 str(tmp_path / "manifest.json"), "--report", str(tmp_path / "r.json")])
    assert code == 1
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["n_images"] == 11 and len(report["errors"]) == 1
    assert "not found" in capsys.readouterr().err


def test_losscheck_command(capsys):
    assert main(["losscheck", "--instances", "2"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 5 and all(line.startswith("PASS") for line in out)


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for cmd in ("gen-toy", "gen-occ", "train", "eval", "gradcam", "losscheck"):
        assert cmd in text
