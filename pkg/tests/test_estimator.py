import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vistafuse import VistaDetector
from vistafuse.harness.scenes import generate_scenes
from vistafuse.losses import BoxFootprint
from vistafuse.validation import check_boxes, check_point_cloud, check_scene, check_scenes
from vistafuse.voxelizer import PointCloud, desk_config


@pytest.fixture(scope="module")
def scenes():
    return generate_scenes(0, 3, desk_config())


@pytest.fixture(scope="module")
def fitted(scenes):
    return VistaDetector(steps=2).fit(scenes)


class TestEstimator:
    def test_params_round_trip(self):
        est = VistaDetector(mode="linear", lambda_var=0.0)
        params = est.get_params()
        assert params["mode"] == "linear" and params["lambda_var"] == 0.0
        twin = clone(est)
        assert twin.get_params() == params
        assert not hasattr(twin, "model_")

    def test_unfitted(self, scenes):
        with pytest.raises(NotFittedError):
            VistaDetector().predict(scenes)

    def test_fit_attributes(self, fitted):
        assert len(fitted.trace_) == 2
        assert fitted.n_pillars_ == 64 * 64
        assert fitted.loss_curve().shape == (2,)

    def test_output_shapes(self, fitted, scenes):
        assert fitted.transform(scenes[:2]).shape == (2, 32 * 64 * 64)
        proba = fitted.predict_proba(scenes[:2])
        assert proba.shape == (2, 4096, 3)
        assert np.all((proba > 0) & (proba < 1))
        labels = fitted.predict(scenes[:2])
        assert labels.shape == (2, 4096)
        assert set(np.unique(labels)) <= {-1, 0, 1, 2}

    def test_attention_maps(self, fitted, scenes):
        maps = fitted.attention(scenes[:1], "geo")
        assert maps[0].shape == (256, 64)
        np.testing.assert_allclose(maps[0].sum(axis=1), 1.0, atol=1e-9)
        with pytest.raises(ValueError):
            fitted.attention(scenes[:1], "depth")

    def test_fit_accepts_clouds_plus_boxes(self, scenes):
        X = [s.cloud.points for s in scenes]
        y = [[(b.w, b.h, b.x, b.y, b.class_id) for b in s.boxes] for s in scenes]
        est = VistaDetector(steps=1).fit(X, y)
        ref = VistaDetector(steps=1).fit(scenes)
        assert est.trace_[0].L_total == ref.trace_[0].L_total

    def test_rejects_bad_boxes(self, scenes):
        with pytest.raises(ValueError):
            VistaDetector(steps=1).fit([scenes[0].cloud.points], [[(1.0, 1.0, 50.0, 0.0, 0)]])
        with pytest.raises(ValueError):
            VistaDetector(steps=1).fit([scenes[0].cloud.points], [[(1.0, 1.0, 0.0, 0.0, 7)]])

    def test_from_model(self, fitted, scenes):
        wrapped = VistaDetector.from_model(fitted.model_)
        np.testing.assert_array_equal(wrapped.predict_proba(scenes[:1]), fitted.predict_proba(scenes[:1]))


class TestValidation:
    def test_point_cloud(self):
        assert len(check_point_cloud(np.zeros((0, 4)))) == 0
        assert isinstance(check_point_cloud([[0, 0, 0, 1]]), PointCloud)
        with pytest.raises(ValueError):
            check_point_cloud([[0, 0, np.inf, 1]])
        with pytest.raises(ValueError):
            check_point_cloud(np.zeros((2, 3)))

    def test_boxes(self):
        b = BoxFootprint(1, 2, 3, 4, 1)
        assert check_boxes([b, (1, 2, 3, 4, 1)]) == [b, b]
        assert check_boxes(None) == []
        with pytest.raises(ValueError):
            check_boxes([(1, 2, 3, 4)])
        with pytest.raises(ValueError):
            check_boxes([(1, 2, 3, 4, 0.5)])

    def test_scene_forms(self, scenes):
        s = scenes[0]
        assert check_scene(s) is s
        pair = check_scene((s.cloud.points, s.boxes))
        assert pair.boxes == s.boxes

    def test_scenes(self, scenes):
        with pytest.raises(TypeError):
            check_scenes(scenes[0])
        with pytest.raises(ValueError):
            check_scenes([s.cloud for s in scenes], [[]])
