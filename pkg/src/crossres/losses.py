"""Tracking losses: penalty-reduced focal loss on the center heatmap, L1 + GIoU on the box."""
from __future__ import annotations

from typing import NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import BBox
from .model import HeadOutput
from .synth import make_targets

PROB_EPS = 1e-6


class BatchTargets(NamedTuple):
    heat: np.ndarray     # (B, Hs, Ws)
    cell: np.ndarray     # (B,) flat row-major cell index
    offset: np.ndarray   # (B, 2)
    size: np.ndarray     # (B, 2)
    box: np.ndarray      # (B, 4) cx, cy, w, h in crop coords


def batch_targets(boxes: Sequence[BBox], grid: tuple[int, int]) -> BatchTargets:
    heats, cells, offs, sizes = [], [], [], []
    for b in boxes:
        heat, reg = make_targets(b, grid)
        heats.append(heat)
        cells.append(reg.cell[0] * grid[1] + reg.cell[1])
        offs.append(reg.offset)
        sizes.append(reg.size)
    return BatchTargets(np.stack(heats), np.array(cells, dtype=np.int64), np.array(offs),
                        np.array(sizes), np.array([b.as_array() for b in boxes]))


def focal_loss(score: Tensor, heat: np.ndarray) -> Tensor:
    """CornerNet-style focal loss (alpha=2, beta=4), normalized by the number of peaks."""
    p = ad.clamp(score, PROB_EPS, 1.0 - PROB_EPS)
    pos = (heat == 1.0).astype(np.float64)
    neg_w = (1.0 - pos) * (1.0 - heat) ** 4
    pos_term = ad.log(p) * ad.square(1.0 - p) * pos
    neg_term = ad.log(1.0 - p) * ad.square(p) * neg_w
    num_pos = max(pos.sum(), 1.0)
    return (pos_term + neg_term).sum() * (-1.0 / num_pos)


_PICK = (np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]]))


def _prod_cols(x: Tensor) -> Tensor:
    return ad.matmul(x, _PICK[0]) * ad.matmul(x, _PICK[1])


def giou_tensor(center: Tensor, size: Tensor, gt: np.ndarray) -> Tensor:
    """Per-row GIoU of predicted (center, size) boxes against (B, 4) ground truth; shape (B, 1)."""
    g0 = gt[:, :2] - 0.5 * gt[:, 2:]
    g1 = gt[:, :2] + 0.5 * gt[:, 2:]
    p0 = center - size * 0.5
    p1 = center + size * 0.5
    inter_wh = ad.clamp(ad.minimum(p1, g1) - ad.maximum(p0, g0), lo=0.0)
    inter = _prod_cols(inter_wh)
    area_p = _prod_cols(size)
    area_g = (gt[:, 2] * gt[:, 3])[:, None]
    union = area_p + area_g - inter
    hull = _prod_cols(ad.maximum(p1, g1) - ad.minimum(p0, g0))
    return inter / union - (hull - union) / hull


def cls_reg_loss(head: HeadOutput, targets: BatchTargets, lambda_cls: float = 1.0,
                 lambda_l1: float = 5.0, lambda_giou: float = 2.0) -> tuple[Tensor, Tensor]:
    """(l_cls, l_reg) averaged over the batch.

    Regression reads the offset/size maps at the ground-truth peak cell.
    """
    score = head.score_map
    if score.ndim == 2:
        head = HeadOutput(*(t.reshape(1, *t.shape) for t in head))
        score = head.score_map
    b, hs, ws = score.shape
    if targets.heat.shape != (b, hs, ws):
        raise ad.DimensionError(f"targets {targets.heat.shape} vs score map {score.shape}")
    l_cls = focal_loss(score, targets.heat) * lambda_cls

    off = ad.take_rows(head.offset_map.reshape(b, hs * ws, 2), targets.cell)
    size = ad.take_rows(head.size_map.reshape(b, hs * ws, 2), targets.cell)
    l1 = (ad.abs_(off - targets.offset).sum() + ad.abs_(size - targets.size).sum()) * (1.0 / (4 * b))

    i, j = np.divmod(targets.cell, ws)
    base = np.stack([j, i], axis=1).astype(np.float64)
    center = (off + base) * np.array([1.0 / ws, 1.0 / hs])
    g = giou_tensor(center, size, targets.box)
    l_giou = (1.0 - g).sum() * (1.0 / b)
    return l_cls, l1 * lambda_l1 + l_giou * lambda_giou
