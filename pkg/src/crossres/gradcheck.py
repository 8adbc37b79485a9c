"""Finite-difference check of the full student objective on random tiny trackers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .boxes import BBox
from .distill import DistillConfig
from .model import ModelConfig, TrackerParams, run_backbone
from .train import TrainConfig, _kd_terms, _tracking_loss


@dataclass(frozen=True)
class GradCheckCase:
    index: int
    student: ModelConfig
    teacher: ModelConfig
    distill: DistillConfig
    max_rel_err: float
    loss: float
    kd_qkv: float
    kd_disc: float


def random_case_configs(rng: np.random.Generator) -> tuple[ModelConfig, ModelConfig, DistillConfig]:
    patch = int(rng.choice([2, 4]))
    heads = int(rng.choice([1, 2]))
    # at least 4 channels: a 2-channel layer norm outputs +-1 and has round-off-level gradients
    dim = int(rng.choice([4, 6, 8]))
    layers = int(rng.integers(1, 3))
    gs = int(rng.integers(2, 4))
    gt = gs + int(rng.integers(1, 3))
    student = ModelConfig(patch_size=patch, embed_dim=dim, num_layers=layers, num_heads=heads, mlp_ratio=2.0,
                          search_resolution=gs * patch, template_resolution=patch * max(1, gs // 2),
                          head_channels=int(rng.integers(2, 5)))
    teacher = student.with_resolution(gt * patch, patch * max(1, gt // 2))
    distill = DistillConfig(tau=float(rng.uniform(0.1, 0.6)), alpha1=float(rng.uniform(0.2, 1.0)),
                            alpha2=float(rng.uniform(0.2, 1.0)), beta1=float(rng.uniform(0.2, 2.0)),
                            beta2=float(rng.uniform(0.2, 2.0)), kd_layers=int(rng.integers(1, layers + 1)))
    return student, teacher, distill


def check_case(index: int, seed: int, eps: float = 1e-5, max_coords: int | None = 6,
               batch: int = 2) -> GradCheckCase:
    rng = np.random.default_rng([seed, index])
    s_cfg, t_cfg, d_cfg = random_case_configs(rng)
    # larger init than training's 0.02 so every path carries gradient well above round-off
    student = TrackerParams.init(s_cfg, seed=int(rng.integers(2 ** 31)), std=0.3)
    teacher = TrackerParams.init(t_cfg, seed=int(rng.integers(2 ** 31)), std=0.3).freeze()
    imgs = {r: rng.random((batch, r, r, 3)) for r in {s_cfg.template_resolution, s_cfg.search_resolution,
                                                       t_cfg.template_resolution, t_cfg.search_resolution}}
    boxes = [BBox(*rng.uniform(0.3, 0.7, size=2), *rng.uniform(0.15, 0.4, size=2)) for _ in range(batch)]
    m = s_cfg.num_layers
    layers = tuple(range(m - d_cfg.kd_layers, m))
    with ad.no_grad():
        out_h = run_backbone(imgs[t_cfg.template_resolution], imgs[t_cfg.search_resolution], teacher,
                             qkv_layers=layers)
    tcfg = TrainConfig()
    parts = {}

    def objective():
        out_l, l_cls, l_reg = _tracking_loss(student, imgs[s_cfg.template_resolution],
                                             imgs[s_cfg.search_resolution], boxes, tcfg, qkv_layers=layers)
        l_qkv, l_disc = _kd_terms(out_h, out_l, t_cfg, s_cfg, d_cfg)
        parts.update(kd_qkv=l_qkv.item(), kd_disc=l_disc.item())
        return l_cls + l_reg + l_qkv * d_cfg.beta1 + l_disc * d_cfg.beta2

    err = ad.finite_diff_check(objective, [t for _, t in student], eps=eps, max_coords=max_coords,
                               seed=seed + index)
    with ad.no_grad():
        loss = objective().item()
    return GradCheckCase(index, s_cfg, t_cfg, d_cfg, err, loss, parts["kd_qkv"], parts["kd_disc"])


def run_grad_check(seed: int, num_configs: int = 10, eps: float = 1e-5,
                   max_coords: int | None = 6) -> list[GradCheckCase]:
    return [check_case(i, seed, eps, max_coords) for i in range(num_configs)]
