import math

import numpy as np
import pytest

from applegrasp.errors import DatasetFormatError
from applegrasp.geometry import SphereModel, camera_direction_to_angles
from applegrasp.synthgen import (
    CONDITIONS,
    AugmentConfig,
    GenConfig,
    LabeledSample,
    augment,
    corrupt,
    generate_sample,
    generate_split,
    read_dataset,
    visible_hemisphere,
    write_dataset,
)

CFG = GenConfig()


def on_axis_sample(n=600, seed=0):
    center = np.array([0.0, 0.0, 0.6])
    theta, phi = camera_direction_to_angles([0.0, 0.0, -1.0])
    pts = visible_hemisphere(center, 0.04, n, np.random.default_rng(seed))
    return LabeledSample(pts, SphereModel(center, 0.04), theta, phi)


def same_sample(a: LabeledSample, b: LabeledSample) -> bool:
    return (
        np.array_equal(a.points, b.points)
        and np.array_equal(a.sphere.center, b.sphere.center)
        and a.sphere.radius == b.sphere.radius
        and (a.theta, a.phi, a.condition, a.seed) == (b.theta, b.phi, b.condition, b.seed)
    )


class TestGenerate:
    def test_points_on_sphere_and_camera_side(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            s = generate_sample(CFG, rng)
            c, r = s.sphere.center, s.sphere.radius
            assert np.abs(np.linalg.norm(s.points - c, axis=1) - r).max() <= 1e-9
            assert np.all((s.points - c) @ (c / np.linalg.norm(c)) <= 1e-12)
            assert CFG.radius_range[0] <= r <= CFG.radius_range[1]
            assert CFG.distance_range[0] <= np.linalg.norm(c) <= CFG.distance_range[1]

    def test_hemisphere_centroid_matches_analytic(self):
        # centroid of a hemispherical surface sits r/2 from the center
        s = on_axis_sample(n=200_000)
        np.testing.assert_allclose(s.points.mean(axis=0), [0.0, 0.0, 0.6 - 0.02], atol=3e-4)

    def test_label_points_toward_ideal_centroid(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            s = generate_sample(CFG, rng)
            c = s.sphere.center
            ideal = visible_hemisphere(c, s.sphere.radius, 100_000, rng).mean(axis=0) - c
            d = s.pose.direction()
            cos = ideal @ d / np.linalg.norm(ideal)
            assert math.degrees(math.acos(min(1.0, cos))) < 1.0

    def test_many_labels_valid(self):
        samples = generate_split(CFG, "train", 5, count=1000)
        assert all(abs(s.theta) <= math.pi / 4 and abs(s.phi) <= math.pi / 4 for s in samples)

    def test_deterministic(self):
        a = generate_split(CFG, "val", 3)
        b = generate_split(CFG, "val", 3)
        assert len(a) == 50 and all(same_sample(x, y) for x, y in zip(a, b))

    def test_splits_disjoint(self):
        train = {s.seed for s in generate_split(CFG, "train", 0)}
        test = {s.seed for s in generate_split(CFG, "test", 0)}
        assert len(train) == 300 and not train & test

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            GenConfig(radius_range=(0.05, 0.03))
        with pytest.raises(ValueError):
            GenConfig(noise_sigma=-1.0)


class TestCorrupt:
    def test_normal_is_identity(self):
        s = on_axis_sample()
        out = corrupt(s, CFG, "normal", np.random.default_rng(0))
        np.testing.assert_array_equal(out.points, s.points)

    def test_outlier_count(self):
        s = on_axis_sample()
        cfg = GenConfig(outlier_fraction_range=(0.05, 0.05))
        out = corrupt(s, cfg, "outlier", np.random.default_rng(0))
        assert len(out.points) == 630
        np.testing.assert_array_equal(out.points[:600], s.points)

    def test_outliers_in_box(self):
        s = on_axis_sample()
        out = corrupt(s, CFG, "outlier", np.random.default_rng(1))
        lo, hi = s.points.min(axis=0), s.points.max(axis=0)
        mid, ext = (lo + hi) / 2, hi - lo
        extra = out.points[600:]
        assert np.all(extra >= mid - 1.5 * ext) and np.all(extra <= mid + 1.5 * ext)

    def test_noise_mean_norm(self):
        s = on_axis_sample(n=20_000)
        out = corrupt(s, CFG, "noise", np.random.default_rng(2))
        norms = np.linalg.norm(out.points - s.points, axis=1)
        assert norms.mean() == pytest.approx(0.02 * math.sqrt(8 / math.pi), rel=0.02)

    def test_clutter_adds_neighbour_points(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            s = generate_sample(CFG, rng)
            out = corrupt(s, CFG, "dense_clutter", rng)
            extra = out.points[len(s.points):]
            np.testing.assert_array_equal(out.points[: len(s.points)], s.points)
            # neighbour points lie off the target surface
            if len(extra):
                resid = np.abs(np.linalg.norm(extra - s.sphere.center, axis=1) - s.sphere.radius)
                assert resid.max() > 1e-6

    @pytest.mark.parametrize("condition", CONDITIONS)
    def test_label_unchanged(self, condition):
        s = generate_sample(CFG, np.random.default_rng(4))
        out = corrupt(s, CFG, condition, np.random.default_rng(5))
        assert out.condition == condition
        np.testing.assert_array_equal(out.sphere.center, s.sphere.center)
        assert (out.sphere.radius, out.theta, out.phi) == (s.sphere.radius, s.theta, s.phi)

    def test_unknown_condition(self):
        with pytest.raises(ValueError):
            corrupt(on_axis_sample(), CFG, "fog", np.random.default_rng(0))


class TestAugment:
    def test_identity(self):
        s = generate_sample(CFG, np.random.default_rng(6))
        out = augment(s, AugmentConfig(), np.random.default_rng(0), scale=1.0, translation=[0, 0, 0], rotation=(0, 0))
        np.testing.assert_allclose(out.points, s.points, atol=1e-15)
        np.testing.assert_allclose(out.sphere.center, s.sphere.center, atol=1e-15)
        assert out.sphere.radius == s.sphere.radius

    def test_scale(self):
        s = generate_sample(CFG, np.random.default_rng(7))
        out = augment(s, AugmentConfig(), np.random.default_rng(0), scale=1.2, translation=[0, 0, 0], rotation=(0, 0))
        assert out.sphere.radius == pytest.approx(1.2 * s.sphere.radius, rel=1e-15)
        resid = np.abs(np.linalg.norm(out.points - out.sphere.center, axis=1) - out.sphere.radius)
        assert resid.max() <= 1e-12

    def test_translation(self):
        s = generate_sample(CFG, np.random.default_rng(8))
        out = augment(s, AugmentConfig(), np.random.default_rng(0), scale=1.0, translation=[0.1, 0, 0], rotation=(0, 0))
        np.testing.assert_allclose(out.sphere.center - s.sphere.center, [0.1, 0, 0], atol=1e-15)
        assert (out.theta, out.phi) == (s.theta, s.phi)

    def test_rotation_moves_label_with_points(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            s = generate_sample(CFG, rng)
            out = augment(s, AugmentConfig(), rng)
            assert abs(out.theta) <= math.pi / 4 and abs(out.phi) <= math.pi / 4
            c, r = out.sphere.center, out.sphere.radius
            assert np.abs(np.linalg.norm(out.points - c, axis=1) - r).max() <= 1e-12
            # points and label rotate together, so their relative angle is kept
            before = s.points.mean(axis=0) - s.sphere.center
            after = out.points.mean(axis=0) - c
            cos_b = before @ s.pose.direction() / np.linalg.norm(before)
            cos_a = after @ out.pose.direction() / np.linalg.norm(after)
            assert cos_a == pytest.approx(cos_b, abs=1e-9)


class TestDatasetFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(10)
        samples = [corrupt(generate_sample(CFG, rng, i), CFG, CONDITIONS[i % 5], rng) for i in range(100)]
        path = tmp_path / "d.jsonl"
        write_dataset(samples, path)
        back = read_dataset(path)
        assert len(back) == 100
        for a, b in zip(samples, back):
            # points are stored with 9 significant digits
            np.testing.assert_allclose(b.points, a.points, rtol=1e-8, atol=0)
            np.testing.assert_array_equal(b.sphere.center, a.sphere.center)
            assert (b.sphere.radius, b.theta, b.phi) == (a.sphere.radius, a.theta, a.phi)
            assert (b.condition, b.seed) == (a.condition, a.seed)
        write_dataset(back, tmp_path / "e.jsonl")
        assert (tmp_path / "e.jsonl").read_bytes() == path.read_bytes()

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        assert read_dataset(path) == []

    def test_malformed_line_number(self, tmp_path):
        rng = np.random.default_rng(11)
        path = tmp_path / "bad.jsonl"
        write_dataset([generate_sample(CFG, rng) for _ in range(10)], path)
        lines = path.read_text().splitlines()
        lines[6] = lines[6][:-5]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match="line 7") as info:
            read_dataset(path)
        assert info.value.line_no == 7

    def test_schema_violation(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"points": [[0,0,1]], "center": [0,0,1]}\n')
        with pytest.raises(DatasetFormatError, match="line 1"):
            read_dataset(path)
