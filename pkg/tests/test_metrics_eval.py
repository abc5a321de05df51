import math

import numpy as np
import pytest

from countocc.evaluate import ManifestError, evaluate_items, load_split
from countocc.harness.synthetic import SceneConfig, generate_scenes
from countocc.metrics import ImageRecord, MetricsReport, mae, rmse
from countocc.occlusion import EvalOccConfig, build_eval_mask, count_occluded_instances
from countocc.scene import occlusion_record, save_image, write_manifest


def test_mae_rmse_examples():
    assert mae([3, 5], [3, 5]) == 0 and rmse([3, 5], [3, 5]) == 0
    assert mae([1, 4], [2, 2]) == 1.5
    assert rmse([1, 4], [2, 2]) == pytest.approx(math.sqrt(2.5), abs=1e-15)
    assert mae([10], [7]) == 3
    assert mae([2.5, 0.5, 4.5], [0, 3, 2]) == rmse([2.5, 0.5, 4.5], [0, 3, 2]) == 2.5
    with pytest.raises(ValueError):
        mae([], [])
    with pytest.raises(ValueError):
        rmse([1], [1, 2])


def test_metrics_against_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        p, g = rng.normal(5, 4, n), rng.integers(0, 20, n).astype(float)
        want_mae = sum(abs(a - b) for a, b in zip(p, g)) / n
        want_rmse = math.sqrt(sum((a - b) ** 2 for a, b in zip(p, g)) / n)
        assert abs(mae(p, g) - want_mae) < 1e-12 and abs(rmse(p, g) - want_rmse) < 1e-12
        assert rmse(p, g) >= mae(p, g)
        perm = rng.permutation(n)
        assert mae(p[perm], g[perm]) == pytest.approx(mae(p, g), abs=1e-15)


@pytest.fixture(scope="module")
def split(tmp_path_factory):
    out = tmp_path_factory.mktemp("split")
    scenes = generate_scenes(SceneConfig(spacing=16, radius_min=5.0, radius_max=6.5), 40, seed=2)
    rng = np.random.default_rng(1)
    occ = {}
    for s in scenes:
        save_image(out / s.file_name, s.image)
        occ[s.image_id] = occlusion_record(build_eval_mask(s, EvalOccConfig(side_min=8, side_max=20), rng))
    write_manifest(out / "manifest.json", scenes, occ)
    return out / "manifest.json", scenes


def oracle_predictor(scene, mask):
    vis, occ = count_occluded_instances(mask, scene.boxes)
    return float(vis + occ), float(vis), float(occ)


def test_oracle_predictor_scores_zero(split):
    report = evaluate_items(load_split(split[0]), oracle_predictor)
    assert report.mae == report.rmse == 0.0 and report.n_images == 40 and not report.errors


def test_zero_predictor_mae_is_mean_count(split):
    report = evaluate_items(load_split(split[0]), lambda s, m: (0.0, 0.0, 0.0))
    assert report.mae == pytest.approx(np.mean([s.count for s in split[1]]), abs=1e-12)
    big = generate_scenes(SceneConfig(count_min=3, count_max=12), 1000, seed=9)
    assert 7.0 <= np.mean([s.count for s in big]) <= 8.0  # the generator's mean count is about 7.5


def test_report_totals_match_records(split):
    rng = np.random.default_rng(4)
    report = evaluate_items(load_split(split[0]), lambda s, m: (float(s.count + rng.normal()), 0.0, 0.0))
    errs = [r.y_hat - r.y for r in report.records]
    assert report.mae == pytest.approx(sum(abs(e) for e in errs) / len(errs), abs=1e-12)
    assert report.rmse == pytest.approx(math.sqrt(sum(e * e for e in errs) / len(errs)), abs=1e-12)
    assert [r.id for r in report.records] == sorted(r.id for r in report.records)
    again = MetricsReport.from_json(report.to_json())
    assert again.to_json() == report.to_json()


def test_broken_images_become_error_entries(split, tmp_path):
    manifest, scenes = split
    doc = manifest.read_text()
    (tmp_path / "manifest.json").write_text(doc)
    for s in scenes[1:]:
        (tmp_path / s.file_name).write_bytes((manifest.parent / s.file_name).read_bytes())
    save_image(tmp_path / scenes[2].file_name, np.zeros((10, 10, 3), dtype=np.uint8))
    report = evaluate_items(load_split(tmp_path / "manifest.json"), oracle_predictor)
    assert report.n_images == 38
    assert [e["id"] for e in report.errors] == [scenes[0].image_id, scenes[2].image_id]
    assert "not found" in report.errors[0]["error"] and "manifest says" in report.errors[1]["error"]


def test_predictor_failures_are_recorded(split):
    def flaky(scene, mask):
        if scene.image_id % 2:
            raise ValueError("bad input")
        return oracle_predictor(scene, mask)

    report = evaluate_items(load_split(split[0]), flaky)
    assert report.n_images == 20 and len(report.errors) == 20
    with pytest.raises(ManifestError):
        evaluate_items([(None, None, {"id": 0, "error": "x"})], oracle_predictor)


def test_report_is_byte_identical_across_calls(split):
    a = evaluate_items(load_split(split[0]), oracle_predictor, {"k": 1}).to_json()
    b = evaluate_items(load_split(split[0]), oracle_predictor, {"k": 1}).to_json()
    assert a == b


def test_record_fields():
    r = MetricsReport.from_records([ImageRecord(2, 5, 4, 3, 3, 2, 1), ImageRecord(1, 2, 2, 2, 2, 0, 0)])
    assert [x.id for x in r.records] == [1, 2] and r.mae == 0.5 and r.rmse >= r.mae
