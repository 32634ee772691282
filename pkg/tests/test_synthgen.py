import json
import math

import numpy as np
import pytest

from pointsentinel.synthgen import (
    SceneConfig,
    generate_background,
    generate_dataset,
    generate_scene,
    load_scene_config,
    make_presence_set,
    render_polyline,
    scenes_to_arrays,
    shifted_config,
)


@pytest.fixture(scope="module")
def cfg():
    return SceneConfig(seed=11, distractor_prob=0.5)


def crop_mean(image, point, size=24):
    h, w = image.shape
    cx, cy = int(point[0]), int(point[1])
    half = size // 2
    y0, x0 = max(0, cy - half), max(0, cx - half)
    return float(image[y0 : min(h, cy + half), x0 : min(w, cx + half)].mean())


class TestConfig:
    @pytest.mark.parametrize("kwargs", [
        {"ett_min_len_frac": 0.9, "ett_max_len_frac": 0.5},
        {"distractor_prob": 1.5},
        {"noise_std": -0.1},
        {"target_class": "ngt"},
        {"image_size": (0, 64)},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SceneConfig(**kwargs)

    def test_dict_round_trip(self, cfg):
        assert SceneConfig.from_dict(cfg.to_dict()) == cfg

    def test_unknown_key(self):
        with pytest.raises(ValueError):
            SceneConfig.from_dict({"colour": 1})

    def test_load_requires_version(self, tmp_path):
        path = tmp_path / "scene.json"
        path.write_text(json.dumps({"seed": 3}))
        with pytest.raises(ValueError, match="version"):
            load_scene_config(path)
        path.write_text(json.dumps({"version": 1, "seed": 3, "n": 10}))
        assert load_scene_config(path).seed == 3


class TestScene:
    def test_deterministic(self, cfg):
        a, b = generate_scene(cfg, 7), generate_scene(cfg, 7)
        assert a.image.tobytes() == b.image.tobytes()
        assert a.record == b.record

    def test_order_independent(self, cfg):
        forward = generate_dataset(cfg, 6)
        assert generate_scene(cfg, 4).image.tobytes() == forward[4].image.tobytes()

    def test_image_range_and_shape(self, cfg):
        for s in generate_dataset(cfg, 20):
            assert s.image.shape == cfg.image_size
            assert s.image.min() >= 0 and s.image.max() <= 1

    def test_no_distractor_when_prob_zero(self):
        c = SceneConfig(seed=3, distractor_prob=0.0)
        assert not any(s.has_distractor for s in generate_dataset(c, 200))

    def test_always_distractor_when_prob_one(self):
        c = SceneConfig(seed=3, distractor_prob=1.0)
        scenes = generate_dataset(c, 30)
        assert all(s.has_distractor and s.has_target for s in scenes)

    def test_background_only(self):
        c = SceneConfig(seed=5, noise_std=0.0)
        scene = generate_scene(c, 2, with_target=False)
        assert not scene.has_target and not scene.has_distractor
        np.testing.assert_array_equal(scene.image, np.clip(generate_background(c, 2), 0, 1))

    def test_one_annotated_point(self, cfg):
        for s in generate_dataset(cfg, 50):
            assert s.record.point is not None

    def test_tube_brightest_at_tip(self):
        c = SceneConfig(seed=1, noise_std=0.0)
        s = generate_scene(c, 0)
        bg = generate_background(c, 0)
        x, y = s.record.point
        diff = s.image - np.clip(bg, 0, 1)
        assert diff[int(y) - 2, int(x)] > 0.5 * c.tube_intensity

    def test_carina(self):
        c = SceneConfig(seed=2, target_class="carina")
        s = generate_scene(c, 0)
        assert s.record.target_class == "carina"

    def test_arrays(self, cfg):
        arr = scenes_to_arrays(generate_dataset(cfg, 3))
        assert arr.shape == (3, 1, 64, 64) and arr.dtype == np.float32


class TestRendering:
    def test_core_intensity(self):
        c = SceneConfig()
        img = render_polyline(c, np.array([[32.0, -2.0], [32.0, 40.0]]))
        assert img[20, 32] == pytest.approx(c.tube_intensity)
        assert img[20, 50] < 1e-6

    def test_falloff_monotone(self):
        img = render_polyline(SceneConfig(), np.array([[32.0, -2.0], [32.0, 40.0]]))
        row = img[20, 32:45]
        assert np.all(np.diff(row) <= 1e-12)


class TestDataset:
    def test_grouping(self):
        scenes = generate_dataset(SceneConfig(), 10, patient_group_size=2)
        ids = [s.record.patient_id for s in scenes]
        assert len(set(ids)) == 5
        assert all(ids.count(p) == 2 for p in set(ids))

    def test_tips_inside_margin(self):
        c = SceneConfig(seed=9)
        m = c.margin
        h, w = c.image_size
        for s in generate_dataset(c, 300):
            x, y = s.record.point
            assert m <= x <= w - m and m <= y <= h - m

    def test_tip_distribution_centered(self):
        """Per-axis tip mean over 10k scenes within 2% of the image center."""
        from pointsentinel.synthgen import sample_tip, scene_rng

        c = SceneConfig(seed=21)
        tips = np.array([sample_tip(c, scene_rng(c.seed, i)) for i in range(10_000)])
        h, w = c.image_size
        assert abs(tips[:, 0].mean() - w / 2) < 0.02 * w
        assert abs(tips[:, 1].mean() - h / 2) < 0.02 * h

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            generate_dataset(SceneConfig(), 0)


class TestPresenceSet:
    def test_counts(self):
        scenes = make_presence_set(SceneConfig(seed=1), 7, 4)
        pos = [s for s in scenes if s.has_target]
        neg = [s for s in scenes if not s.has_target]
        assert len(pos) == 7 and len(neg) == 4
        assert all(s.has_distractor and s.record.point is None for s in neg)
        assert not any(s.has_distractor for s in pos)
        assert len({s.record.case_id for s in scenes}) == 11

    def test_local_similarity(self):
        scenes = make_presence_set(SceneConfig(seed=3), 100, 100)
        pos = [s for s in scenes if s.has_target]
        neg = [s for s in scenes if not s.has_target]
        diffs = [abs(crop_mean(p.image, p.record.point) - crop_mean(n.image, n.distractor_tip))
                 for p, n in zip(pos, neg)]
        assert np.mean(diffs) < 0.05

    def test_distractor_ends_lower_than_its_stoma(self):
        for s in make_presence_set(SceneConfig(seed=4), 1, 20):
            if not s.has_target:
                assert s.distractor_tip[1] > 0.3 * 64


class TestShift:
    def test_offset_is_exact(self):
        base = SceneConfig(seed=5)
        moved = shifted_config(base, 0.034)
        a = generate_scene(base, 0).record.point
        b = generate_scene(moved, 0).record.point
        assert math.hypot(b[0] - a[0], b[1] - a[1]) == pytest.approx(0.034 * math.hypot(64, 64))
