"""Distillation-benefit experiment: KD student vs. the same student without KD.

A teacher is trained once at high resolution; then, for each seed, two
students train at low resolution on identical crops, one with both
distillation terms and one with beta1 = beta2 = 0. The reported statistic is
the median over seeds of the held-out mean-IoU difference.
"""
from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .distill import DistillConfig
from .evaluate import evaluate_params
from .model import PRESETS, ModelConfig
from .synth import read_dataset, write_dataset
from .train import TrainConfig, _no_log, train_student, train_teacher


KD_TREND_WINDOW = 20  # steps averaged for the end-of-training KD loss


@dataclass(frozen=True)
class BenefitSetup:
    train_seed: int = 1
    eval_seed: int = 2
    num_train: int = 64
    num_eval: int = 16
    length: int = 24
    teacher_model: ModelConfig = PRESETS["toy-teacher"]
    student_model: ModelConfig = PRESETS["toy-student"]
    # shortened schedule so 1 teacher + 10 students fit a ~45 min single-core budget
    teacher_train: TrainConfig = TrainConfig(epochs=10, steps_per_epoch=150, log_every=150)
    student_train: TrainConfig = TrainConfig(epochs=5, steps_per_epoch=150, log_every=150)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass
class BenefitResult:
    teacher_mean_iou: float
    kd_mean_iou: list[float]
    base_mean_iou: list[float]
    seconds: float
    runs: list[dict] = field(default_factory=list)

    @property
    def deltas(self) -> list[float]:
        return [a - b for a, b in zip(self.kd_mean_iou, self.base_mean_iou)]

    @property
    def median_gain_points(self) -> float:
        """Median over seeds of the mean-IoU gain, in absolute percentage points."""
        return 100.0 * statistics.median(self.deltas)


def prepare_data(root, setup: BenefitSetup) -> tuple[Path, Path]:
    root = Path(root)
    train_dir, eval_dir = root / "train", root / "eval"
    if not (train_dir / "seq_0000").exists():
        write_dataset(train_dir, setup.train_seed, setup.num_train, setup.length)
    if not (eval_dir / "seq_0000").exists():
        write_dataset(eval_dir, setup.eval_seed, setup.num_eval, setup.length)
    return train_dir, eval_dir


def run_benefit(root, setup: BenefitSetup = BenefitSetup(), log=_no_log) -> BenefitResult:
    start = time.perf_counter()
    train_dir, eval_dir = prepare_data(root, setup)
    train_seqs, eval_seqs = read_dataset(train_dir), read_dataset(eval_dir)
    teacher = train_teacher(setup.teacher_train, setup.teacher_model, train_seqs, log=log).params
    t_iou = evaluate_params(teacher, eval_seqs).mean_iou
    log({"event": "teacher-eval", "mean_iou": t_iou})
    kd, base, runs = [], [], []
    variants = (("kd", DistillConfig()), ("base", DistillConfig(beta1=0.0, beta2=0.0)))
    for seed in setup.seeds:
        cfg = replace(setup.student_train, seed=seed)
        for name, dcfg in variants:
            res = train_student(cfg, setup.student_model, teacher, dcfg, train_seqs, log=log)
            rep = evaluate_params(res.params, eval_seqs)
            (kd if name == "kd" else base).append(rep.mean_iou)
            row = {"variant": name, "seed": seed, "mean_iou": rep.mean_iou, "suc": rep.suc, "pre": rep.pre}
            if name == "kd":
                tail = res.history[-KD_TREND_WINDOW:]
                for key in ("kd_qkv", "kd_disc"):
                    row[f"{key}_first"] = res.history[0][key]
                    row[f"{key}_last"] = statistics.fmean(r[key] for r in tail)
            runs.append(row)
            log({"event": "benefit-run", **row})
    return BenefitResult(t_iou, kd, base, time.perf_counter() - start, runs)


def summary_json(result: BenefitResult, setup: BenefitSetup) -> str:
    return json.dumps({
        "teacher_mean_iou": result.teacher_mean_iou,
        "kd_mean_iou": result.kd_mean_iou,
        "base_mean_iou": result.base_mean_iou,
        "median_gain_points": result.median_gain_points,
        "seconds": result.seconds,
        "seeds": list(setup.seeds),
        "runs": result.runs,
        "student_train": asdict(setup.student_train),
        "teacher_train": asdict(setup.teacher_train),
    }, indent=2)
