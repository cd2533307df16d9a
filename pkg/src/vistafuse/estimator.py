"""scikit-learn style wrapper around the fusion network."""

from __future__ import annotations

from typing import List

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .harness.training import TrainConfig, train_smoke
from .model import ModelConfig, ModelOutput, VistaNet
from .validation import check_boxes_in_range, check_class_ids, check_scenes
from .voxelizer import VoxelConfig, voxelize


class VistaDetector(TransformerMixin, BaseEstimator):
    """Dense BEV detector with decoupled cross-view attention fusion.

    ``fit`` takes a sequence of scenes: ``SceneSample`` objects, ``(cloud, boxes)``
    pairs, or bare clouds with the box lists passed as ``y``. ``transform``
    returns the fused semantic BEV features per scene, flattened to one row.
    ``predict`` returns one class index per BEV pillar with ``-1`` for
    background.
    """

    def __init__(
        self,
        x_range=(-8.0, 8.0),
        y_range=(-8.0, 8.0),
        z_range=(-1.0, 3.0),
        resolution=(0.25, 0.25, 0.25),
        channels=16,
        d_f=32,
        d_q=32,
        heads=1,
        n_classes=3,
        bev_kernel=(4, 4),
        rv_kernel=(4, 4),
        mode="conv",
        decouple=True,
        var_target="both",
        lambda_cls=1.0,
        lambda_reg=0.25,
        lambda_var=1.0,
        steps=300,
        batch_size=1,
        lr=1e-3,
        weight_decay=1e-2,
        augment=True,
        threshold=0.5,
        random_state=0,
    ):
        self.x_range = x_range
        self.y_range = y_range
        self.z_range = z_range
        self.resolution = resolution
        self.channels = channels
        self.d_f = d_f
        self.d_q = d_q
        self.heads = heads
        self.n_classes = n_classes
        self.bev_kernel = bev_kernel
        self.rv_kernel = rv_kernel
        self.mode = mode
        self.decouple = decouple
        self.var_target = var_target
        self.lambda_cls = lambda_cls
        self.lambda_reg = lambda_reg
        self.lambda_var = lambda_var
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.augment = augment
        self.threshold = threshold
        self.random_state = random_state

    def _configs(self):
        voxel = VoxelConfig(tuple(self.x_range), tuple(self.y_range), tuple(self.z_range), tuple(self.resolution))
        model = ModelConfig(
            channels=self.channels, d_f=self.d_f, d_q=self.d_q, d_v=self.d_f, heads=self.heads,
            n_classes=self.n_classes, bev_kernel=self.bev_kernel, rv_kernel=self.rv_kernel,
            mode=self.mode, decouple=self.decouple,
        )
        train = TrainConfig(
            steps=self.steps, batch_size=self.batch_size, lr=self.lr, weight_decay=self.weight_decay,
            lambda_cls=self.lambda_cls, lambda_reg=self.lambda_reg, lambda_var=self.lambda_var,
            var_target=self.var_target, mode=self.mode, decouple=self.decouple, augment=self.augment,
            seed=self._seed(),
        )
        return voxel, model, train

    def _seed(self) -> int:
        rs = self.random_state
        if rs is None:
            return 0
        if isinstance(rs, np.random.Generator):
            return int(rs.integers(2 ** 31))
        return int(rs)

    def fit(self, X, y=None):
        voxel, model, train = self._configs()
        if train.var_target not in ("sem", "geo", "both"):
            raise ValueError(f"var_target must be sem, geo or both, got {train.var_target!r}")
        scenes = check_scenes(X, y)
        if not scenes:
            raise ValueError("fit needs at least one scene")
        for s in scenes:
            check_boxes_in_range(s.boxes, voxel)
            check_class_ids(s.boxes, model.n_classes)
        result = train_smoke(train, scenes, model, voxel)
        self.model_ = result.model
        self.trace_ = result.trace
        self.voxel_config_ = voxel
        self.n_pillars_ = voxel.grid_shape[0] * voxel.grid_shape[1]
        return self

    def _outputs(self, X) -> List[ModelOutput]:
        check_is_fitted(self, "model_")
        return [self.model_.forward(voxelize(s.cloud, self.voxel_config_)) for s in check_scenes(X)]

    def transform(self, X) -> np.ndarray:
        """``(n_scenes, d_f * Nx * Ny)`` fused semantic BEV features."""
        return np.stack([o.fused_sem.features.data.reshape(-1) for o in self._outputs(X)])

    def predict_proba(self, X) -> np.ndarray:
        """``(n_scenes, n_pillars, n_classes)`` independent per-class sigmoid scores."""
        return np.stack([1.0 / (1.0 + np.exp(-o.cls_logits.data)) for o in self._outputs(X)])

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)
        labels = proba.argmax(axis=2)
        labels[proba.max(axis=2) < self.threshold] = -1
        return labels

    def attention(self, X, branch: str = "sem") -> List[np.ndarray]:
        """Per-scene ``n x m`` attention matrices of the chosen branch."""
        if branch not in ("sem", "geo"):
            raise ValueError(f"branch must be sem or geo, got {branch!r}")
        return [getattr(o.bundle, f"A_{branch}").data.copy() for o in self._outputs(X)]

    def loss_curve(self) -> np.ndarray:
        check_is_fitted(self, "trace_")
        return np.array([r.L_total for r in self.trace_])

    @classmethod
    def from_model(cls, model: VistaNet, **params) -> "VistaDetector":
        """Wrap an already trained network without refitting."""
        cfg, v = model.config, model.voxel
        est = cls(
            x_range=v.x_range, y_range=v.y_range, z_range=v.z_range, resolution=v.resolution,
            channels=cfg.channels, d_f=cfg.d_f, d_q=cfg.d_q, heads=cfg.heads, n_classes=cfg.n_classes,
            bev_kernel=cfg.bev_kernel, rv_kernel=cfg.rv_kernel, mode=cfg.mode, decouple=cfg.decouple, **params,
        )
        est.model_ = model
        est.trace_ = []
        est.voxel_config_ = v
        est.n_pillars_ = v.grid_shape[0] * v.grid_shape[1]
        return est
