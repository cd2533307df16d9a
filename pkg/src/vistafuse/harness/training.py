"""Smoke-scale training loop with decoupled weight decay Adam."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..losses import LossReport, focal_loss, l1_loss, total_loss, variance_loss
from ..model import ModelConfig, VistaNet
from ..ndcore import Tensor, scale
from ..voxelizer import VoxelConfig, desk_config, pillar_centers, voxelize
from .augment import augment
from .metrics import attention_concentration
from .scenes import SceneSample
from .targets import assign_targets

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 1
    lr: float = 1e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-2
    lambda_cls: float = 1.0
    lambda_reg: float = 0.25
    lambda_var: float = 1.0
    var_target: str = "both"
    mode: str = "conv"
    decouple: bool = True
    augment: bool = True
    bg_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


class AdamW:
    """Adam with weight decay applied directly to the parameters."""

    def __init__(self, params: Sequence[Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data *= 1 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    trace: List[LossReport]
    model: VistaNet
    first_grads: Dict[str, np.ndarray] = field(default_factory=dict)


def scene_loss(model: VistaNet, scene: SceneSample, cfg: TrainConfig, force_uniform: bool = False):
    """Forward one scene; returns ``(total tensor, LossReport, ModelOutput)``."""
    grid = voxelize(scene.cloud, model.voxel)
    out = model.forward(grid, force_uniform=force_uniform)
    cls_t, reg_t, mask = assign_targets(scene.boxes, pillar_centers(model.voxel))
    l_cls = focal_loss(out.cls_logits, cls_t, bg_scale=cfg.bg_scale)
    l_reg = l1_loss(out.reg, reg_t, mask)
    qc = model.query_centers()
    v_sem = variance_loss(out.bundle.A_sem, scene.boxes, qc)
    v_geo = None if out.bundle.A_geo is out.bundle.A_sem else variance_loss(out.bundle.A_geo, scene.boxes, qc)
    a = out.bundle.A_sem.data
    per_box = []
    for b in scene.boxes:
        inside = b.contains(qc.centers[:, 0], qc.centers[:, 1])
        if inside.any():
            per_box.append(float(a[inside].var(axis=1).mean()))
    total, report = total_loss(
        l_cls, l_reg, v_sem, v_geo, cfg.lambda_cls, cfg.lambda_reg, cfg.lambda_var, cfg.var_target, per_box
    )
    return total, report, out


def _mean_report(reports: List[LossReport]) -> LossReport:
    if len(reports) == 1:
        return reports[0]
    keys = ("L_cls", "L_reg", "L_var", "L_target", "L_total")
    vals = {k: float(np.mean([getattr(r, k) for r in reports])) for k in keys}
    boxes = [v for r in reports for v in r.per_box_variances]
    return LossReport(**vals, lambdas=reports[0].lambdas, per_box_variances=boxes)


def train_smoke(
    cfg: TrainConfig,
    scenes: Sequence[SceneSample],
    model_config: Optional[ModelConfig] = None,
    voxel: Optional[VoxelConfig] = None,
) -> TrainResult:
    """Train from a fresh initialization seeded by ``cfg.seed``.

    Every step draws ``batch_size`` scenes from a seeded shuffle, optionally
    augments them, and applies one AdamW update on the batch-mean loss.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    voxel = voxel or desk_config()
    model_config = replace(model_config or ModelConfig(), mode=cfg.mode, decouple=cfg.decouple)
    model = VistaNet.init(model_config, voxel, seed=cfg.seed)
    opt = AdamW(model.parameters(), cfg.lr, cfg.betas, cfg.adam_eps, cfg.weight_decay)
    order_rng = np.random.default_rng([cfg.seed, 1])
    order: List[int] = []
    trace: List[LossReport] = []
    first_grads: Dict[str, np.ndarray] = {}

    for step in range(cfg.steps):
        model.zero_grad()
        reports = []
        for j in range(cfg.batch_size):
            if not order:
                order = list(order_rng.permutation(len(scenes)))
            scene = scenes[order.pop()]
            if cfg.augment:
                scene = augment(scene, int(np.random.SeedSequence([cfg.seed, step, j]).generate_state(1)[0]))
            total, report, _ = scene_loss(model, scene, cfg)
            if not report.is_finite():
                raise TrainingDiverged(f"non-finite loss at step {step}: {report}")
            scale(total, 1.0 / cfg.batch_size).backward()
            reports.append(report)
        for name, p in model.named_parameters():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingDiverged(f"non-finite gradient for {name} at step {step}")
        if step == 0:
            first_grads = {n: p.grad.copy() for n, p in model.named_parameters() if p.grad is not None}
        opt.step()
        rep = _mean_report(reports)
        trace.append(rep)
        if step % 50 == 0 or step == cfg.steps - 1:
            logger.info("step %d L_total=%.4f L_cls=%.4f L_reg=%.4f L_var=%.5f",
                        step, rep.L_total, rep.L_cls, rep.L_reg, rep.L_var)
    return TrainResult(trace, model, first_grads)


def evaluate_concentration(model: VistaNet, scenes: Sequence[SceneSample]) -> Dict[str, float]:
    """Mean in-box attention mass and mean row maximum over scenes with selectable rows."""
    qc, cells = model.query_centers(), model.source_cells()
    masses, maxima = [], []
    for s in scenes:
        out = model.forward(voxelize(s.cloud, model.voxel))
        mass, row_max = attention_concentration(out.bundle, s.boxes, qc, cells)
        if np.isfinite(mass):
            masses.append(mass)
            maxima.append(row_max)
    m = out.bundle.A_sem.shape[1]
    return {
        "in_box_mass": float(np.mean(masses)) if masses else float("nan"),
        "mean_row_max": float(np.mean(maxima)) if maxima else float("nan"),
        "uniform_row_max": 1.0 / m,
        "scenes": len(masses),
    }
