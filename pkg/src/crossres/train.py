"""Teacher training, then frozen-teacher distillation into a low-resolution student."""
from __future__ import annotations

import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import BBox
from .distill import DistillConfig, disc_kd_loss, disc_map, disc_mask, feature_kd_loss, qkv_kd_loss
from .losses import batch_targets, cls_reg_loss
from .model import (ConfigError, ModelConfig, QKVTriple, TrackerParams, head_forward,
                    run_backbone, search_qkv, template_qkv)
from .synth import SyntheticSequence, make_crop_sample, read_dataset

Logger = Callable[[dict], None]


def _no_log(_: dict) -> None:
    pass


def jsonl_logger(stream=None) -> Logger:
    stream = stream or sys.stdout

    def log(record: dict) -> None:
        stream.write(json.dumps(record, sort_keys=True) + "\n")
        stream.flush()

    return log


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    steps_per_epoch: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    lambda_cls: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    center_jitter: float = 2.0   # max shift of the search window, in units of sqrt(w*h)
    scale_jitter: float = 0.2    # log-normal std of the window size
    log_every: int = 50

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("weight_decay", "seed", "center_jitter", "scale_jitter"):
                if v < 0:
                    raise ConfigError(f"{f.name} must be >= 0")
            elif v <= 0:
                raise ConfigError(f"{f.name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        return cls(**{k: (float(v) if kinds[k] == "float" else int(v)) for k, v in d.items() if k in kinds})

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch


class Adam:
    """Adam with bias correction; decoupled weight decay when ``weight_decay`` > 0."""

    def __init__(self, params: Sequence[tuple[str, Tensor]], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = {n: np.zeros(t.shape) for n, t in self.params}
        self.v = {n: np.zeros(t.shape) for n, t in self.params}
        self.t = 0

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out


# -- sampling -------------------------------------------------------------------

class CropSampler:
    """Draws aligned template/search crops at any set of resolutions from one window."""

    def __init__(self, seqs: Sequence[SyntheticSequence], seed: int, center_jitter: float,
                 scale_jitter: float):
        self.seqs = list(seqs)
        self.rng = np.random.default_rng([seed, 0x5A4D])
        self.center_jitter = center_jitter
        self.scale_jitter = scale_jitter

    def draw(self, batch: int, template_res: tuple[int, ...], search_res: tuple[int, ...]):
        samples = []
        for _ in range(batch):
            seq = self.seqs[int(self.rng.integers(len(self.seqs)))]
            ti = int(self.rng.integers(len(seq)))
            si = int(self.rng.integers(len(seq)))
            box = seq.boxes[si]
            scale = math.exp(self.scale_jitter * float(self.rng.standard_normal()))
            h, w = seq.height, seq.width
            s_px = math.sqrt(box.w * box.h * h * w)
            shift = (self.rng.random(2) - 0.5) * self.center_jitter * s_px
            window = BBox(box.cx + shift[0] / w, box.cy + shift[1] / h, box.w * scale, box.h * scale)
            samples.append(make_crop_sample(
                np.asarray(seq.frames[ti]), seq.boxes[ti], np.asarray(seq.frames[si]), box, window,
                template_res, search_res))
        return samples


def _stack(samples, attr: str, res: int) -> np.ndarray:
    return np.stack([getattr(s, attr)[res] for s in samples])


# -- shared step pieces ---------------------------------------------------------

def _tracking_loss(params: TrackerParams, tmpl: np.ndarray, srch: np.ndarray, boxes, cfg: TrainConfig,
                   qkv_layers=None):
    out = run_backbone(tmpl, srch, params, qkv_layers=qkv_layers)
    head = head_forward(out.feat_search, params)
    tg = batch_targets(boxes, (params.config.search_grid,) * 2)
    l_cls, l_reg = cls_reg_loss(head, tg, cfg.lambda_cls, cfg.lambda_l1, cfg.lambda_giou)
    return out, l_cls, l_reg


def _check_finite(value: float, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite loss {value} at step {step}")


def _load_data(data) -> list[SyntheticSequence]:
    if isinstance(data, (str, Path)):
        return read_dataset(data)
    return list(data)


@dataclass
class TrainResult:
    params: TrackerParams
    optimizer: Adam
    history: list[dict] = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.history[-1]["loss"]


def train_teacher(train_cfg: TrainConfig, model_cfg: ModelConfig, data, out_ckpt=None,
                  log: Logger = _no_log) -> TrainResult:
    """Plain tracker training (cls + reg losses) at the model's own resolution."""
    seqs = _load_data(data)
    params = TrackerParams.init(model_cfg, seed=train_cfg.seed)
    opt = Adam(params.trainable(), train_cfg.learning_rate, train_cfg.adam_beta1, train_cfg.adam_beta2,
               train_cfg.adam_eps, train_cfg.weight_decay)
    sampler = CropSampler(seqs, train_cfg.seed, train_cfg.center_jitter, train_cfg.scale_jitter)
    history = []
    step = 0
    for epoch in range(train_cfg.epochs):
        ep_sum = 0.0
        for _ in range(train_cfg.steps_per_epoch):
            samples = sampler.draw(train_cfg.batch_size, (model_cfg.template_resolution,),
                                   (model_cfg.search_resolution,))
            _, l_cls, l_reg = _tracking_loss(
                params, _stack(samples, "template_imgs", model_cfg.template_resolution),
                _stack(samples, "search_imgs", model_cfg.search_resolution),
                [s.gt_box_in_crop for s in samples], train_cfg, qkv_layers=())
            loss = l_cls + l_reg
            _check_finite(loss.item(), step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec = {"step": step, "loss": loss.item(), "l_cls": l_cls.item(), "l_reg": l_reg.item()}
            history.append(rec)
            ep_sum += rec["loss"]
            if step % train_cfg.log_every == 0:
                log({"event": "step", "stage": "teacher", **rec})
            step += 1
        log({"event": "epoch", "stage": "teacher", "epoch": epoch,
             "mean_loss": ep_sum / train_cfg.steps_per_epoch})
    result = TrainResult(params, opt, history)
    if out_ckpt is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(params, out_ckpt, kind="teacher", train_cfg=train_cfg, optimizer=opt)
    return result


def init_student_from_teacher(teacher: TrackerParams, cfg: ModelConfig) -> TrackerParams:
    """Experimental: copy teacher weights, bilinearly resizing the position embeddings."""
    from .distill import align_phi

    out = {}
    for name, t in teacher:
        if name in ("pos.template", "pos.search"):
            side = cfg.template_grid if name == "pos.template" else cfg.search_grid
            with ad.no_grad():
                arr = align_phi(Tensor(t.data), (side, side)).data
        else:
            arr = t.data
        out[name] = Tensor(np.array(arr), requires_grad=True)
    return TrackerParams(cfg, out)


def train_student(train_cfg: TrainConfig, model_cfg: ModelConfig, teacher, distill_cfg: DistillConfig,
                  data, out_ckpt=None, log: Logger = _no_log,
                  init_from_teacher: bool = False) -> TrainResult:
    """Low-resolution training with cls/reg losses plus the enabled distillation terms.

    ``teacher`` may be a checkpoint path, a TrackerParams, or None (only valid
    when no distillation term is enabled). Teacher and student crops come from
    the same source windows.
    """
    seqs = _load_data(data)
    kd_on = distill_cfg.enable_qkv_kd or distill_cfg.enable_disc_kd
    t_params = None
    if kd_on or init_from_teacher:
        if teacher is None:
            raise ConfigError("distillation enabled but no teacher given")
        if isinstance(teacher, (str, Path)):
            from .checkpoint import load_checkpoint

            t_params = load_checkpoint(teacher).params
        else:
            t_params = teacher
        t_params.freeze()
        tc = t_params.config
        if tc.embed_dim != model_cfg.embed_dim or tc.num_layers != model_cfg.num_layers \
                or tc.num_heads != model_cfg.num_heads or tc.patch_size != model_cfg.patch_size:
            raise ConfigError(f"teacher architecture {tc} does not match student {model_cfg} "
                              "apart from resolution")
        if distill_cfg.kd_layers > tc.num_layers:
            raise ConfigError(f"kd_layers={distill_cfg.kd_layers} exceeds {tc.num_layers} layers")

    if init_from_teacher:
        params = init_student_from_teacher(t_params, model_cfg)
    else:
        params = TrackerParams.init(model_cfg, seed=train_cfg.seed)
    opt = Adam(params.trainable(), train_cfg.learning_rate, train_cfg.adam_beta1, train_cfg.adam_beta2,
               train_cfg.adam_eps, train_cfg.weight_decay)
    sampler = CropSampler(seqs, train_cfg.seed, train_cfg.center_jitter, train_cfg.scale_jitter)

    m = model_cfg.num_layers
    kd_layers = tuple(range(m - distill_cfg.kd_layers, m)) if m else ()
    use_teacher = kd_on and t_params is not None
    t_res = (t_params.config.template_resolution,) if use_teacher else ()
    s_res = (t_params.config.search_resolution,) if use_teacher else ()

    history = []
    step = 0
    for epoch in range(train_cfg.epochs):
        ep_sum = 0.0
        for _ in range(train_cfg.steps_per_epoch):
            samples = sampler.draw(train_cfg.batch_size, (model_cfg.template_resolution, *t_res),
                                   (model_cfg.search_resolution, *s_res))
            boxes = [s.gt_box_in_crop for s in samples]
            out_l, l_cls, l_reg = _tracking_loss(
                params, _stack(samples, "template_imgs", model_cfg.template_resolution),
                _stack(samples, "search_imgs", model_cfg.search_resolution), boxes, train_cfg,
                qkv_layers=kd_layers if use_teacher else ())
            l_qkv = l_disc = None
            if use_teacher:
                with ad.no_grad():
                    out_h = run_backbone(_stack(samples, "template_imgs", t_res[0]),
                                         _stack(samples, "search_imgs", s_res[0]), t_params,
                                         qkv_layers=kd_layers)
                l_qkv, l_disc = _kd_terms(out_h, out_l, t_params.config, model_cfg, distill_cfg)
            loss = _total(l_cls, l_reg, l_qkv, l_disc, distill_cfg)
            _check_finite(loss.item(), step)
            opt.zero_grad()
            loss.backward()
            opt.step()
            rec = {"step": step, "loss": loss.item(), "l_cls": l_cls.item(), "l_reg": l_reg.item(),
                   "kd_qkv": l_qkv.item() if l_qkv is not None else 0.0,
                   "kd_disc": l_disc.item() if l_disc is not None else 0.0}
            history.append(rec)
            ep_sum += rec["loss"]
            if step % train_cfg.log_every == 0:
                log({"event": "step", "stage": "student", **rec})
            step += 1
        log({"event": "epoch", "stage": "student", "epoch": epoch,
             "mean_loss": ep_sum / train_cfg.steps_per_epoch})

    result = TrainResult(params, opt, history)
    if out_ckpt is not None:
        from .checkpoint import save_checkpoint

        save_checkpoint(params, out_ckpt, kind="student", train_cfg=train_cfg, distill_cfg=distill_cfg,
                        optimizer=opt)
    return result


def _total(l_cls, l_reg, l_qkv, l_disc, cfg: DistillConfig):
    from .distill import total_loss

    return total_loss(l_cls, l_reg, l_qkv, l_disc, cfg)


def _kd_terms(out_h, out_l, tcfg: ModelConfig, scfg: ModelConfig, cfg: DistillConfig):
    """(global term, discrimination term); either is None when its flag is off."""
    l_qkv = l_disc = None
    if cfg.enable_qkv_kd:
        if cfg.kd_mode == "feature":
            l_qkv = feature_kd_loss(out_h.feat_search, out_l.feat_search)
            if cfg.include_template:
                l_qkv = l_qkv + feature_kd_loss(out_h.feat_template, out_l.feat_template)
        else:
            for layer in sorted(out_h.qkv):
                term = qkv_kd_loss(search_qkv(out_h.qkv[layer], tcfg.num_template_tokens),
                                   search_qkv(out_l.qkv[layer], scfg.num_template_tokens))
                if cfg.include_template:
                    term = term + qkv_kd_loss(template_qkv(out_h.qkv[layer], tcfg.num_template_tokens),
                                              template_qkv(out_l.qkv[layer], scfg.num_template_tokens))
                l_qkv = term if l_qkv is None else l_qkv + term
    if cfg.enable_disc_kd:
        f_h = out_h.feat_search
        mask = disc_mask(disc_map(f_h), cfg.tau, batched=f_h.ndim == 3)
        l_disc = disc_kd_loss(f_h, out_l.feat_search, mask, cfg.alpha1, cfg.alpha2)
    return l_qkv, l_disc
