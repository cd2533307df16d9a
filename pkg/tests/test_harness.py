import numpy as np
import pytest

from vistafuse.harness.augment import AugmentParams, apply_augmentation, augment, draw_params
from vistafuse.harness.io import FormatError, read_boxes, read_cloud, read_scene, read_scene_dir, write_scene
from vistafuse.harness.metrics import attention_concentration, object_cells
from vistafuse.harness.scenes import generate_scene, generate_scenes
from vistafuse.harness.targets import assign_targets
from vistafuse.harness.training import TrainConfig, evaluate_concentration, train_smoke
from vistafuse.losses import BoxFootprint
from vistafuse.model import ModelConfig, VistaNet
from vistafuse.ndcore import Tensor
from vistafuse.vista import AttentionBundle
from vistafuse.voxelizer import desk_config, pillar_centers

from oracles import assign_loops


@pytest.fixture(scope="module")
def cfg():
    return desk_config()


class TestScenes:
    def test_no_objects(self, cfg):
        s = generate_scene(3, 0, cfg)
        assert s.boxes == []
        assert s.background_fraction == 1.0

    def test_deterministic(self, cfg):
        a, b = generate_scene(7, 3, cfg), generate_scene(7, 3, cfg)
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        assert a.boxes == b.boxes

    def test_background_fraction(self, cfg):
        fracs = [generate_scene(seed, 2 + seed % 4, cfg).background_fraction for seed in range(100)]
        assert min(fracs) >= 0.90 and max(fracs) <= 0.98

    def test_boxes_inside_range(self, cfg):
        for s in generate_scenes(1, 30, cfg):
            for b in s.boxes:
                assert cfg.x_range[0] <= b.x - b.w / 2 and b.x + b.w / 2 <= cfg.x_range[1]
                assert cfg.y_range[0] <= b.y - b.h / 2 and b.y + b.h / 2 <= cfg.y_range[1]

    def test_several_classes_appear(self, cfg):
        ids = {b.class_id for s in generate_scenes(2, 30, cfg) for b in s.boxes}
        assert len(ids) >= 2


class TestAugment:
    def scene(self, cfg):
        return generate_scene(11, 3, cfg)

    def test_identity_draw(self, cfg):
        s = self.scene(cfg)
        out = apply_augmentation(s, AugmentParams())
        np.testing.assert_array_equal(out.cloud.points, s.cloud.points)
        assert out.boxes == s.boxes

    def test_flip_involution(self, cfg):
        s = self.scene(cfg)
        p = AugmentParams(flip_x=True)
        twice = apply_augmentation(apply_augmentation(s, p), p)
        np.testing.assert_array_equal(twice.cloud.points, s.cloud.points)
        assert twice.boxes == s.boxes

    def test_flip_negates_center(self, cfg):
        s = self.scene(cfg)
        out = apply_augmentation(s, AugmentParams(flip_x=True))
        assert [b.x for b in out.boxes] == [-b.x for b in s.boxes]

    def test_rotation_is_isometry(self, cfg):
        s = self.scene(cfg)
        out = apply_augmentation(s, AugmentParams(angle=0.3))
        assert len(out.cloud) == len(s.cloud)
        for b0, b1 in zip(s.boxes, out.boxes):
            d0 = np.hypot(s.cloud.points[:, 0] - b0.x, s.cloud.points[:, 1] - b0.y)
            d1 = np.hypot(out.cloud.points[:, 0] - b1.x, out.cloud.points[:, 1] - b1.y)
            np.testing.assert_allclose(d1, d0, atol=1e-9)

    @pytest.mark.parametrize("params", [
        AugmentParams(flip_x=True, flip_y=True, scale=1.03, translation=(0.1, -0.2, 0.05)),
        AugmentParams(angle=-0.35, scale=0.97),
    ])
    def test_point_in_box_preserved(self, cfg, params):
        s = self.scene(cfg)
        out = apply_augmentation(s, params)
        for b0, b1 in zip(s.boxes, out.boxes):
            before = b0.contains(s.cloud.points[:, 0], s.cloud.points[:, 1])
            # pad by round-off: roof points sit exactly on box edges
            grown = BoxFootprint(b1.w + 1e-9, b1.h + 1e-9, b1.x, b1.y)
            after = grown.contains(out.cloud.points[:, 0], out.cloud.points[:, 1])
            assert np.all(after[before])

    def test_draw_ranges(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            p = draw_params(rng)
            assert abs(p.angle) <= 0.3925
            assert 0.95 <= p.scale <= 1.05
            assert all(abs(t) <= 0.2 for t in p.translation)

    def test_seeded(self, cfg):
        s = self.scene(cfg)
        np.testing.assert_array_equal(augment(s, 5).cloud.points, augment(s, 5).cloud.points)


class TestTargets:
    def test_no_boxes(self, cfg):
        cls, reg, pos = assign_targets([], pillar_centers(cfg))
        assert np.all(cls == -1) and not pos.any() and not reg.any()

    def test_pillar_at_center(self):
        box = BoxFootprint(2.0, 1.0, 0.25, 0.25, 1)
        cls, reg, pos = assign_targets([box], [[0.25, 0.25]])
        assert cls.tolist() == [1] and pos.tolist() == [True]
        np.testing.assert_allclose(reg[0], [0, 0, np.log(2.0), 0.0], atol=1e-15)

    def test_matches_oracle(self, cfg):
        rng = np.random.default_rng(3)
        centers = pillar_centers(cfg).centers
        for _ in range(50):
            k = int(rng.integers(0, 6))
            boxes = [BoxFootprint(float(rng.uniform(0.5, 4)), float(rng.uniform(0.5, 4)),
                                  float(rng.uniform(-7, 7)), float(rng.uniform(-7, 7)), int(rng.integers(0, 3)))
                     for _ in range(k)]
            sub = centers[rng.choice(len(centers), 300, replace=False)]
            cls, reg, pos = assign_targets(boxes, sub)
            rc, rr, rp = assign_loops([(b.w, b.h, b.x, b.y, b.class_id) for b in boxes], sub.tolist())
            np.testing.assert_array_equal(cls, rc)
            np.testing.assert_array_equal(pos, rp)
            np.testing.assert_allclose(reg, rr, rtol=0, atol=1e-12)

    def test_tie_goes_to_lower_index(self):
        boxes = [BoxFootprint(4, 4, -1, 0, 0), BoxFootprint(4, 4, 1, 0, 2)]
        cls, _, _ = assign_targets(boxes, [[0.0, 0.0]])
        assert cls.tolist() == [0]


@pytest.fixture(scope="module")
def net():
    return VistaNet.init(ModelConfig(), desk_config(), seed=0)


@pytest.fixture(scope="module")
def scenes():
    return generate_scenes(0, 4, desk_config())


class TestMetrics:
    def bundle(self, a):
        t = Tensor(a)
        return AttentionBundle(t, t, t, t)

    def boxes(self):
        return [BoxFootprint(2.0, 2.0, -3.0, 2.0), BoxFootprint(1.0, 1.5, 4.0, -4.0)]

    def test_uniform(self, net):
        n, m = len(net.query_centers()), len(net.source_cells())
        _, row_max = attention_concentration(self.bundle(np.full((n, m), 1 / m)), self.boxes(),
                                             net.query_centers(), net.source_cells())
        assert row_max == pytest.approx(1 / m, abs=1e-15)

    def test_one_hot_on_objects(self, net):
        cells = net.source_cells()
        on = object_cells(self.boxes(), cells)
        a = np.zeros((len(net.query_centers()), len(cells)))
        a[:, np.flatnonzero(on)[0]] = 1.0
        mass, row_max = attention_concentration(self.bundle(a), self.boxes(), net.query_centers(), cells)
        assert (mass, row_max) == (1.0, 1.0)

    def test_gap_mass_is_object_fraction(self, cfg):
        net = VistaNet.init(ModelConfig(mode="gap"), cfg, seed=0)
        scene = generate_scene(5, 3, cfg)
        report = evaluate_concentration(net, [scene])
        frac = object_cells(scene.boxes, net.source_cells()).mean()
        assert report["in_box_mass"] == pytest.approx(frac, abs=1e-12)

    def test_no_query_in_box(self, net):
        n, m = len(net.query_centers()), len(net.source_cells())
        mass, _ = attention_concentration(self.bundle(np.full((n, m), 1 / m)), [BoxFootprint(0.01, 0.01, 0.1, 0.1)],
                                          net.query_centers(), net.source_cells())
        assert np.isnan(mass)

    def test_object_cells_use_x_overlap(self):
        cells = np.array([[0.0, 1.0, 0.0, 1.0], [1.0, 2.0, 0.0, 1.0], [2.0, 3.0, 0.0, 1.0]])
        assert object_cells([BoxFootprint(0.5, 9.0, 1.5, 50.0)], cells).tolist() == [False, True, False]


class TestIO:
    def test_scene_round_trip(self, cfg, tmp_path):
        s = generate_scene(4, 2, cfg)
        path = write_scene(tmp_path, "a", s)
        back = read_scene(path)
        np.testing.assert_array_equal(back.cloud.points, s.cloud.points)
        assert back.boxes == s.boxes
        assert len(read_scene_dir(tmp_path)) == 1

    def test_missing_sidecar_means_no_boxes(self, tmp_path):
        p = tmp_path / "c.pts"
        p.write_text("0,0,0,1\n# comment\n\n1,1,1,0.5\n")
        s = read_scene(p)
        assert len(s.cloud) == 2 and s.boxes == []

    @pytest.mark.parametrize("text", ["1,2,3\n", "1,2,x,4\n", "1,2,nan,4\n"])
    def test_bad_cloud(self, tmp_path, text):
        p = tmp_path / "bad.pts"
        p.write_text(text)
        with pytest.raises(FormatError):
            read_cloud(p)

    def test_bad_boxes(self, tmp_path):
        p = tmp_path / "bad.boxes"
        p.write_text("-1,2,0,0,1\n")
        with pytest.raises(FormatError):
            read_boxes(p)

    def test_empty_dir(self, tmp_path):
        with pytest.raises(FormatError):
            read_scene_dir(tmp_path)


class TestTraining:
    def test_trace_length_and_finite(self, scenes):
        result = train_smoke(TrainConfig(steps=3), scenes)
        assert len(result.trace) == 3
        assert all(r.is_finite() for r in result.trace)

    def test_lambda_var_only_changes_variance_gradient(self, scenes):
        on = train_smoke(TrainConfig(steps=2, lambda_var=1.0), scenes)
        off = train_smoke(TrainConfig(steps=2, lambda_var=0.0), scenes)
        assert on.trace[0].L_cls == off.trace[0].L_cls
        assert on.trace[0].L_reg == off.trace[0].L_reg
        assert on.trace[0].L_var == off.trace[0].L_var
        assert on.trace[0].L_total != off.trace[0].L_total

    def test_deterministic(self, scenes):
        a = train_smoke(TrainConfig(steps=2, batch_size=2), scenes)
        b = train_smoke(TrainConfig(steps=2, batch_size=2), scenes)
        assert [r.L_total for r in a.trace] == [r.L_total for r in b.trace]

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(steps=0)
        with pytest.raises(ValueError):
            TrainConfig(lr=0.0)
        with pytest.raises(ValueError):
            train_smoke(TrainConfig(steps=1), [])
