import math

import numpy as np
import pytest

from bevuncert.errors import ConfigError
from bevuncert.evaluation import CLASSES, average_precision, match, rotated_iou
from bevuncert.geometry import convex_hull, rect_corners
from bevuncert.gridmap import GridConfig
from bevuncert.sim import (
    NoiseModel,
    SceneSpec,
    class_distribution,
    corrupt,
    generate_scene,
    parameter_residuals,
    sample_ground_truth,
    simulate,
)
from bevuncert.uncert import decode_median


class TestNoiseModel:
    def test_linear_in_distance(self):
        n = NoiseModel((0.1,) * 6, (0.01,) * 6)
        assert n.sigma(10.0) == pytest.approx([0.2] * 6)

    def test_miss_rate_clipped(self):
        assert NoiseModel(miss_base=0.5, miss_slope=0.1).miss_rate(20.0) == 1.0

    @pytest.mark.parametrize(
        "kw", [dict(base=(-0.1,) * 6), dict(slope=(0.1,) * 5), dict(fp_rate=1.5), dict(miss_base=-0.1), dict(miss_slope=-1.0)]
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            NoiseModel(**kw)


class TestSceneSpec:
    def test_invalid_region(self):
        with pytest.raises(ConfigError):
            SceneSpec(region=(10, 5, 0, 1))

    def test_unknown_class(self):
        with pytest.raises(ConfigError):
            SceneSpec(counts={"Truck": 1.0})

    def test_region_outside_grid(self):
        with pytest.raises(ConfigError):
            generate_scene(SceneSpec(region=(5, 80, -10, 10)))


class TestGenerateScene:
    def test_empty_scene(self):
        fr = generate_scene(SceneSpec(counts={}))
        assert fr.ground_truth == [] and len(fr.cloud) == 0

    def test_boxes_inside_region_and_disjoint(self):
        spec = SceneSpec(n_frames=20, seed=4)
        for f in range(spec.n_frames):
            gts = sample_ground_truth(spec, f)
            for g in gts:
                assert all(5 <= x <= 55 and -20 <= y <= 20 for x, y in g.box.corners())
            for a in range(len(gts)):
                for b in range(a + 1, len(gts)):
                    assert rotated_iou(gts[a].box, gts[b].box) == 0.0

    def test_surface_points_inside_dilated_footprint(self):
        spec = SceneSpec(counts={"Car": 1.0}, region=(8, 12, -2, 2), ground_points=0, seed=1)
        fr = next(generate_scene(spec, f) for f in range(50) if sample_ground_truth(spec, f))
        (gt,) = fr.ground_truth
        b = gt.box
        dilated = convex_hull(rect_corners(b.x, b.y, b.length + 0.1, b.width + 0.1, b.phi))
        assert dilated.contains_points(fr.cloud.points[:, :2]).all()
        z = fr.cloud.points[:, 2] - GridConfig.ground_z
        assert z.min() >= 0 and z.max() <= gt.height

    def test_density_falls_with_distance(self):
        near = SceneSpec(counts={"Car": 1.0}, region=(8, 14, -3, 3), ground_points=0)
        far = SceneSpec(counts={"Car": 1.0}, region=(40, 46, -3, 3), ground_points=0)

        def density(spec):
            fr = next(generate_scene(spec, f) for f in range(50) if sample_ground_truth(spec, f))
            return len(fr.cloud) * fr.ground_truth[0].distance

        assert density(near) == pytest.approx(density(far), rel=0.05)

    def test_deterministic_per_seed(self):
        a = generate_scene(SceneSpec(seed=3), 2)
        b = generate_scene(SceneSpec(seed=3), 2)
        c = generate_scene(SceneSpec(seed=4), 2)
        assert a.ground_truth == b.ground_truth
        assert np.array_equal(a.cloud.points, b.cloud.points)
        assert a.ground_truth != c.ground_truth

    def test_orientations_cluster_at_base_angles(self):
        spec = SceneSpec(n_frames=200, p_uniform=0.0, spread_deg=3.0)
        phis = [g.box.phi for f in range(spec.n_frames) for g in sample_ground_truth(spec, f)]
        off = [min(abs(math.degrees(p)) % 90, 90 - abs(math.degrees(p)) % 90) for p in phis]
        assert np.mean(np.array(off) < 10) > 0.99


class TestCorrupt:
    spec = SceneSpec(n_frames=1, seed=2)

    def gts(self):
        return next(sample_ground_truth(self.spec, f) for f in range(20) if len(sample_ground_truth(self.spec, f)) > 3)

    def test_zero_noise_is_exact(self):
        gts = self.gts()
        dets = corrupt(gts, NoiseModel.zero(), seed=1)
        assert len(dets) == len(gts)
        for d in dets:
            assert rotated_iou(d.labeled().box, gts[d.gt_index].box) == pytest.approx(1.0)
            assert d.box.var == (0.0,) * 6

    def test_position_noise_concentration(self):
        spec = SceneSpec(n_frames=1500, region=(5, 55, -20, 20))
        noise = NoiseModel.constant((0.5, 0, 0, 0, 0, 0))
        errs = []
        for fr, dets in simulate(spec, noise, with_cloud=False):
            errs += [d.box.mean.x - fr.ground_truth[d.gt_index].box.x for d in dets]
        assert len(errs) >= 10_000
        assert np.std(errs) == pytest.approx(0.5, rel=0.02)

    def test_reports_true_variances(self):
        noise = NoiseModel((0.1,) * 6, (0.01,) * 6)
        for d in corrupt(self.gts(), noise, seed=0):
            dist = self.gts()[d.gt_index].box.distance
            assert np.allclose(d.box.var, noise.sigma(dist) ** 2)

    def test_full_miss_rate_leaves_false_positives(self):
        dets = corrupt(self.gts(), NoiseModel(miss_base=1.0, fp_rate=1.0), seed=0, region=self.spec.region)
        assert len(dets) == 1 and dets[0].gt_index is None
        assert dets[0].score <= 0.3

    def test_scores_and_class_distribution(self):
        for d in corrupt(self.gts(), NoiseModel(), seed=0):
            assert 0.5 <= d.score <= 1.0
            assert sum(d.box.class_scores) == pytest.approx(1.0)
            assert d.box.class_scores[CLASSES.index(d.label)] == d.score

    def test_class_distribution_entropy(self):
        probs, h = class_distribution("Car", 1.0)
        assert probs == (1.0, 0.0, 0.0) and h == 0.0
        _, h = class_distribution("Car", 1 / 3)
        assert h == pytest.approx(math.log(3))

    def test_zero_noise_average_precision(self):
        spec = SceneSpec(n_frames=30, seed=6)
        per_class = {c: [] for c in CLASSES}
        for fr, dets in simulate(spec, NoiseModel.zero(), with_cloud=False):
            labeled = [d.labeled() for d in dets]
            for c in CLASSES:
                per_class[c].append(match(labeled, fr.ground_truth, cls=c))
        assert all(average_precision(per_class[c]) == 1.0 for c in CLASSES)

    def test_residuals(self):
        gts = self.gts()
        dets = corrupt(gts, NoiseModel.zero(), seed=0)
        assert np.allclose(parameter_residuals(dets, gts), 0.0, atol=1e-12)
        assert decode_median(dets[0].box).length == pytest.approx(gts[dets[0].gt_index].box.length)
