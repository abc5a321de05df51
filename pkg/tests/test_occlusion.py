import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from countocc.harness.synthetic import carpk_like_scene
from countocc.occlusion import (EvalOccConfig, OcclusionMask, TrainOccConfig, apply_mask, build_eval_mask,
                                count_occluded_instances, eval_count_window, mask_from_record,
                                occluded_count_range, rasterize, sample_training_mask)
from countocc.scene import occlusion_record, read_gray, save_gray


def brute_hidden(mask, scene):
    """Count centers under the mask with a plain loop over boxes and rectangles."""
    hidden = 0
    for b in scene.boxes:
        cx, cy = b.center_pixel(scene.width, scene.height)
        for x, y, w, h in mask.rectangles:
            if x <= cx < x + w and y <= cy < y + h:
                hidden += 1
                break
    return hidden


@pytest.mark.parametrize("n,expected", [(10, (2, 5)), (2, (1, 2)), (1, (1, 1)), (3, (1, 2)), (4, (1, 2)),
                                        (20, (3, 10)), (7, (2, 3))])
def test_occluded_count_range(n, expected):
    assert occluded_count_range(n, TrainOccConfig()) == expected


def test_count_range_matches_ceil_floor_for_n_at_least_4():
    cfg = TrainOccConfig()
    for n in range(4, 200):
        assert occluded_count_range(n, cfg) == (math.ceil(0.15 * n - 1e-9), math.floor(0.5 * n + 1e-9))


def test_probability_zero_gives_empty_mask(make_scene, rng):
    scene = make_scene([(10, 10), (30, 30), (50, 50)])
    m = sample_training_mask(scene, TrainOccConfig(apply_probability=0.0, side_min=8, side_max=16), rng)
    assert m.rectangles == [] and m.mask.sum() == 0 and m.occluded_instance_ids == []


def test_empty_scene_has_no_anchor(make_scene, rng):
    with pytest.raises(ValueError, match="no instances to anchor"):
        sample_training_mask(make_scene([]), TrainOccConfig(apply_probability=1.0), rng)
    with pytest.raises(ValueError, match="no instances to anchor"):
        build_eval_mask(make_scene([]), EvalOccConfig(), rng)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainOccConfig(alpha_min=0.6, alpha_max=0.5)
    with pytest.raises(ValueError):
        TrainOccConfig(side_min=10, side_max=5)
    with pytest.raises(ValueError):
        TrainOccConfig(max_attempts=0)
    with pytest.raises(ValueError):
        EvalOccConfig(target_lo=0.4, target_hi=0.3)


def test_accepted_training_masks_respect_bounds_and_geometry():
    cfg = TrainOccConfig(apply_probability=1.0)
    rng = np.random.default_rng(0)
    accepted = 0
    for i in range(150):
        scene = carpk_like_scene(np.random.default_rng([5, i]), image_id=i)
        m = sample_training_mask(scene, cfg, rng)
        assert len(m.rectangles) == 1
        x, y, w, h = m.rectangles[0]
        assert 0 <= x and 0 <= y and x + w <= scene.width and y + h <= scene.height
        assert cfg.side_min <= w <= cfg.side_max and cfg.side_min <= h <= cfg.side_max
        assert np.array_equal(m.mask, rasterize(m.rectangles, scene.width, scene.height))
        hidden = brute_hidden(m, scene)
        assert hidden == len(m.occluded_instance_ids)
        if not m.fallback:
            lo, hi = occluded_count_range(scene.count, cfg)
            assert lo <= hidden <= hi
            accepted += 1
    assert accepted > 100


def test_small_images_clamp_sides(make_scene):
    scene = make_scene([(5, 5), (10, 12), (14, 3)], width=16, height=16)
    m = sample_training_mask(scene, TrainOccConfig(apply_probability=1.0), np.random.default_rng(3))
    x, y, w, h = m.rectangles[0]
    assert (w, h) == (16, 16) and (x, y) == (0, 0)


def test_fallback_after_max_attempts(make_scene):
    # every anchored rectangle covers all 5 centers, more than the allowed 1..2
    scene = make_scene([(30, 30), (31, 30), (32, 30), (30, 31), (31, 31)])
    cfg = TrainOccConfig(apply_probability=1.0, side_min=20, side_max=20, max_attempts=5)
    m = sample_training_mask(scene, cfg, np.random.default_rng(0))
    assert m.fallback
    assert m.rectangles[0][2:] == (20, 20)


def test_same_seed_same_mask():
    scene = carpk_like_scene(np.random.default_rng(1))
    a = sample_training_mask(scene, TrainOccConfig(apply_probability=1.0), np.random.default_rng(42))
    b = sample_training_mask(scene, TrainOccConfig(apply_probability=1.0), np.random.default_rng(42))
    assert a.rectangles == b.rectangles and np.array_equal(a.mask, b.mask)
    c = build_eval_mask(scene, EvalOccConfig(), np.random.default_rng(42))
    d = build_eval_mask(scene, EvalOccConfig(), np.random.default_rng(42))
    assert c.rectangles == d.rectangles


def test_eval_window_arithmetic():
    assert eval_count_window(20, EvalOccConfig()) == (5, 7, True)
    assert eval_count_window(1, EvalOccConfig()) == (1, 1, False)
    assert eval_count_window(4, EvalOccConfig()) == (1, 1, True)
    lo, hi, ok = eval_count_window(2, EvalOccConfig())
    assert not ok and lo == hi == 1


def test_eval_mask_n20_hides_5_to_7(make_scene):
    pts = [(8 + 12 * (i % 5), 8 + 12 * (i // 5)) for i in range(20)]
    scene = make_scene(pts, width=72, height=56)
    for seed in range(20):
        m = build_eval_mask(scene, EvalOccConfig(side_min=4, side_max=20), np.random.default_rng(seed))
        assert 5 <= brute_hidden(m, scene) <= 7
        assert not m.infeasible


def test_eval_mask_single_instance_flagged(make_scene):
    m = build_eval_mask(make_scene([(20, 20)]), EvalOccConfig(side_min=4, side_max=8), np.random.default_rng(0))
    assert len(m.occluded_instance_ids) == 1 and m.infeasible


def test_eval_masks_on_carpk_like_scenes_hit_window():
    cfg, rng = EvalOccConfig(), np.random.default_rng(7)
    fracs = []
    for i in range(100):
        scene = carpk_like_scene(np.random.default_rng([11, i]))
        m = build_eval_mask(scene, cfg, rng)
        fracs.append(brute_hidden(m, scene) / scene.count)
    assert 0.25 <= float(np.mean(fracs)) <= 0.35


def test_apply_mask_examples():
    img = np.ones((6, 5, 3), dtype=np.uint8)
    assert np.array_equal(apply_mask(img, np.zeros((6, 5))), img)
    assert apply_mask(img, np.ones((6, 5))).sum() == 0
    m = OcclusionMask.from_rectangles([(1, 2, 2, 2)], 5, 6)
    assert img.sum() - apply_mask(img, m).sum() == 4 * 3
    with pytest.raises(ValueError):
        apply_mask(img, np.zeros((5, 5)))


@given(st.integers(0, 2**31 - 1))
def test_apply_mask_idempotent_and_exact(seed):
    r = np.random.default_rng(seed)
    img = r.integers(0, 256, size=(12, 10, 3), dtype=np.uint8)
    x, y = int(r.integers(0, 10)), int(r.integers(0, 12))
    w, h = int(r.integers(1, 11 - x)), int(r.integers(1, 13 - y))
    m = OcclusionMask.from_rectangles([(x, y, w, h)], 10, 12)
    once = apply_mask(img, m)
    assert np.array_equal(apply_mask(once, m), once)
    assert (once[m.mask == 1] == 0).all()
    assert np.array_equal(once[m.mask == 0], img[m.mask == 0])


def test_count_occluded_instances(make_scene):
    scene = make_scene([(5 + 8 * i, 20) for i in range(7)])
    assert count_occluded_instances(np.zeros((64, 64)), scene.boxes) == (7, 0)
    assert count_occluded_instances(np.ones((64, 64)), scene.boxes) == (0, 7)
    # ten instances in a row, one occluder over three of their centers
    ten = make_scene([(4 + 6 * i, 30) for i in range(10)])
    m = OcclusionMask.from_rectangles([(15, 20, 18, 20)], 64, 64, ten.center_pixels())
    assert count_occluded_instances(m, ten.boxes) == (7, 3)
    assert m.occluded_instance_ids == [2, 3, 4]


def test_record_round_trip_and_raster(tmp_path, make_scene):
    scene = make_scene([(10, 10), (40, 40), (20, 50)])
    m = build_eval_mask(scene, EvalOccConfig(side_min=4, side_max=12), np.random.default_rng(2))
    back = mask_from_record(occlusion_record(m), scene)
    assert np.array_equal(back.mask, m.mask) and back.occluded_instance_ids == m.occluded_instance_ids
    raster = m.to_raster()
    assert set(np.unique(raster)) <= {0, 255}
    for name in ("m.pgm", "m.png"):
        save_gray(tmp_path / name, raster)
        assert np.array_equal(read_gray(tmp_path / name), raster)
    assert mask_from_record(None, scene).mask.sum() == 0
