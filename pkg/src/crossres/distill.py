"""Cross-resolution distillation losses.

The student runs on a coarser token grid than the teacher. Every student
quantity is first resampled onto the teacher grid (``align_phi``), then
compared with plain mean squared error. Two losses:

* QKV distillation: last-layer query, key and value projections of the
  search tokens.
* Discrimination distillation: last-layer search features, split by a binary
  mask of high-energy teacher tokens into a foreground and a background term.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import ConfigError, QKVTriple


@dataclass(frozen=True)
class DistillConfig:
    tau: float = 0.2
    alpha1: float = 0.6
    alpha2: float = 0.4
    beta1: float = 0.01
    beta2: float = 0.01
    enable_qkv_kd: bool = True
    enable_disc_kd: bool = True
    # ablation axes; the defaults give the standard recipe
    kd_layers: int = 1              # distill Q/K/V of this many trailing layers
    include_template: bool = False  # also distill template tokens
    kd_mode: str = "qkv"            # "qkv" or "feature" (search features instead of Q/K/V)

    def __post_init__(self):
        if self.kd_layers < 1:
            raise ConfigError(f"kd_layers must be >= 1, got {self.kd_layers}")
        if self.kd_mode not in ("qkv", "feature"):
            raise ConfigError(f"kd_mode must be 'qkv' or 'feature', got {self.kd_mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError(f"tau must be in [0, 1], got {self.tau}")
        for name in ("alpha1", "alpha2", "beta1", "beta2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        kw = {}
        for k in ("tau", "alpha1", "alpha2", "beta1", "beta2"):
            if k in d:
                kw[k] = float(d[k])
        for k in ("enable_qkv_kd", "enable_disc_kd", "include_template"):
            if k in d:
                kw[k] = parse_bool(d[k])
        if "kd_layers" in d:
            kw["kd_layers"] = int(d["kd_layers"])
        if "kd_mode" in d:
            kw["kd_mode"] = str(d["kd_mode"]).strip()
        return cls(**kw)


def parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {v!r}")


def _grid_side(n: int) -> int:
    side = math.isqrt(n)
    if side * side != n:
        raise ConfigError(f"{n} tokens do not form a square grid")
    return side


def align_phi(tokens: Tensor, teacher_grid: tuple[int, int], channels: int | None = None) -> Tensor:
    """Bilinearly resample (..., N_l, D) tokens from their square grid to ``teacher_grid``."""
    n, d = tokens.shape[-2:]
    if channels is not None and channels != d:
        raise ad.DimensionError(f"student width {d} != teacher width {channels}")
    side = _grid_side(n)
    gh, gw = teacher_grid
    lead = tokens.shape[:-2]
    grid = tokens.reshape(*lead, side, side, d)
    up = ad.bilinear_resize(grid, gh, gw)
    return up.reshape(*lead, gh * gw, d)


def _teacher_grid(t: Tensor) -> tuple[int, int]:
    side = _grid_side(t.shape[-2])
    return side, side


def _check_teacher(*ts: Tensor) -> None:
    for t in ts:
        if t.requires_grad:
            raise ad.ContractError("teacher tensors must not carry gradients (evaluate under no_grad)")


def qkv_kd_loss(teacher: QKVTriple, student: QKVTriple) -> Tensor:
    """Sum over Q, K, V of MSE(teacher, aligned student)."""
    _check_teacher(*teacher)
    total = None
    for th, sl in zip(teacher, student):
        if th.shape[-1] != sl.shape[-1] or th.shape[:-2] != sl.shape[:-2]:
            raise ad.DimensionError(f"qkv_kd_loss: teacher {th.shape} vs student {sl.shape}")
        term = ad.mse(th, align_phi(sl, _teacher_grid(th)))
        total = term if total is None else total + term
    return total


def feature_kd_loss(f_h: Tensor, f_l: Tensor) -> Tensor:
    """Plain feature mimicry: MSE(teacher feature, aligned student feature)."""
    _check_teacher(f_h)
    if f_h.shape[-1] != f_l.shape[-1]:
        raise ad.DimensionError(f"feature_kd_loss: teacher {f_h.shape} vs student {f_l.shape}")
    return ad.mse(f_h, align_phi(f_l, _teacher_grid(f_h)))


def disc_map(f_s_h) -> np.ndarray:
    """Per-token mean of squared channels, shape (..., N). No gradient."""
    f = f_s_h.data if isinstance(f_s_h, Tensor) else np.asarray(f_s_h, dtype=np.float64)
    return (f * f).mean(axis=-1)


def disc_mask(dmap, tau: float, batched: bool = False) -> np.ndarray:
    """Binary mask of tokens whose max-normalized map value reaches ``tau``.

    The map is divided by its maximum first (per sample when ``batched``, the
    leading axis then being the batch); an all-zero map gives an all-zero mask.
    """
    if not 0.0 <= tau <= 1.0:
        raise ConfigError(f"tau must be in [0, 1], got {tau}")
    d = np.asarray(dmap, dtype=np.float64)
    axes = tuple(range(1 if batched else 0, d.ndim))
    peak = d.max(axis=axes, keepdims=True)
    norm = np.where(peak > 0, d / np.where(peak > 0, peak, 1.0), 0.0)
    return ((norm >= tau) & (peak > 0)).astype(np.float64)


def disc_kd_loss(f_s_h: Tensor, f_s_l: Tensor, mask, alpha1: float, alpha2: float) -> Tensor:
    """alpha1 * MSE on masked tokens + alpha2 * MSE on unmasked tokens.

    Both MSE terms keep the full N_h * D denominator, so equal weights reduce
    exactly to a single full MSE.
    """
    _check_teacher(f_s_h)
    if f_s_h.shape[-1] != f_s_l.shape[-1]:
        raise ad.DimensionError(f"disc_kd_loss: teacher {f_s_h.shape} vs student {f_s_l.shape}")
    n_h = f_s_h.shape[-2]
    m = np.asarray(mask, dtype=np.float64)
    if m.size != int(np.prod(f_s_h.shape[:-1])):
        raise ad.DimensionError(f"mask of {m.shape} does not cover {f_s_h.shape[:-1]} teacher tokens")
    m = m.reshape(*f_s_h.shape[:-2], n_h, 1)
    up = align_phi(f_s_l, _teacher_grid(f_s_h))
    fg = ad.mse(f_s_h * m, up * m)
    bg = ad.mse(f_s_h * (1.0 - m), up * (1.0 - m))
    return fg * alpha1 + bg * alpha2


def total_loss(l_cls, l_reg, l_qkv, l_disc, cfg: DistillConfig):
    """Tracking losses plus the enabled, weighted distillation terms."""
    out = l_cls + l_reg
    if cfg.enable_qkv_kd and cfg.beta1 != 0 and l_qkv is not None:
        out = out + l_qkv * cfg.beta1
    if cfg.enable_disc_kd and cfg.beta2 != 0 and l_disc is not None:
        out = out + l_disc * cfg.beta2
    return out
