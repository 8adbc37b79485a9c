"""Ablation runner: train and evaluate distillation variants over shared seeds.

The spec file is INI (``configparser``)::

    [ablation]
    data = /path/to/train          # training sequences (gen-data layout)
    eval_data = /path/to/heldout
    teacher = /path/to/teacher.ckpt   # optional; trained here when absent
    seeds = 0, 1, 2
    variants = full, no-qkv-kd, tau-0.18
    train.epochs = 2               # any run-config key applies to every variant

    [variant my-variant]           # custom variant built from config keys
    distill.tau = 0.19

Output is one CSV row per (variant, seed), in spec order. Floats are written
with ``repr`` so identical runs give byte-identical files.
"""
from __future__ import annotations

import configparser
import csv
import io
from dataclasses import replace
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import build_run_config, valid_keys
from .distill import DistillConfig
from .evaluate import evaluate_params
from .model import PRESETS, ConfigError
from .synth import read_dataset
from .train import _no_log, train_student, train_teacher

BUILTIN_VARIANTS: dict[str, dict] = {
    "full": {},
    "baseline": {"enable_qkv_kd": False, "enable_disc_kd": False},
    "no-qkv-kd": {"enable_qkv_kd": False},
    "no-disc-kd": {"enable_disc_kd": False},
    "tau-0.18": {"tau": 0.18},
    "tau-0.20": {"tau": 0.20},
    "tau-0.22": {"tau": 0.22},
    "with-template": {"include_template": True},
    "layers-2": {"kd_layers": 2},
    "feature-distillation": {"kd_mode": "feature"},
    "alpha-0.5-0.5": {"alpha1": 0.5, "alpha2": 0.5},
}

SPEC_KEYS = ("data", "eval_data", "teacher", "teacher_resolution", "teacher_seed", "seeds", "variants")

COLUMNS = ["variant", "seed", "suc", "pre", "mean_iou", "final_loss", "final_kd_qkv", "final_kd_disc",
           "tau", "alpha1", "alpha2", "beta1", "beta2", "enable_qkv_kd", "enable_disc_kd", "kd_layers",
           "include_template", "kd_mode", "search_resolution", "teacher_resolution", "epochs",
           "steps_per_epoch", "batch_size", "learning_rate"]


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_spec(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    cp.optionxform = str
    path = Path(path)
    if not cp.read(path, encoding="utf-8"):
        raise ConfigError(f"cannot read ablation spec {path}")
    if "ablation" not in cp:
        raise ConfigError(f"{path}: missing [ablation] section")
    return cp


def resolve_variants(cp: configparser.ConfigParser) -> list[tuple[str, dict[str, str]]]:
    """Return (name, overrides) per requested variant; overrides are config keys."""
    custom = {s.split(None, 1)[1]: dict(cp[s]) for s in cp.sections() if s.startswith("variant ")}
    names = [v.strip() for v in cp["ablation"].get("variants", "full").split(",") if v.strip()]
    valid = sorted(set(BUILTIN_VARIANTS) | set(custom))
    out = []
    for name in names:
        if name in custom:
            out.append((name, custom[name]))
        elif name in BUILTIN_VARIANTS:
            out.append((name, {f"distill.{k}": str(v) for k, v in BUILTIN_VARIANTS[name].items()}))
        else:
            raise ConfigError(f"unknown variant {name!r}; valid variants: {', '.join(valid)}")
    return out


def run_ablation(spec_file, out_csv=None, log=_no_log) -> str:
    cp = load_spec(spec_file)
    section = cp["ablation"]
    base_kv = {k: v for k, v in section.items() if k not in SPEC_KEYS}
    for k in base_kv:
        build_run_config({k: base_kv[k]})  # reject unknown keys before any training
    variants = resolve_variants(cp)
    for name, kv in variants:
        build_run_config({**base_kv, **kv})
    seeds = [int(s) for s in section.get("seeds", "0").split(",") if s.strip()]
    if "data" not in section or "eval_data" not in section:
        raise ConfigError("ablation spec needs both 'data' and 'eval_data'")
    train_seqs = read_dataset(section["data"])
    eval_seqs = read_dataset(section["eval_data"])

    base = build_run_config(base_kv)
    t_res = int(section.get("teacher_resolution", PRESETS["toy-teacher"].search_resolution))
    if "teacher" in section:
        teacher = load_checkpoint(section["teacher"]).params
    else:
        t_cfg = replace(base.train, seed=int(section.get("teacher_seed", "0")))
        log({"event": "ablation-teacher", "resolution": t_res, "seed": t_cfg.seed})
        teacher = train_teacher(t_cfg, base.model.with_resolution(t_res), train_seqs, log=log).params
        if out_csv is not None:
            save_checkpoint(teacher, Path(out_csv).with_suffix(".teacher.ckpt"), kind="teacher", train_cfg=t_cfg)
    teacher_res = teacher.config.search_resolution

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for name, kv in variants:
        run = build_run_config({**base_kv, **kv})
        for seed in seeds:
            tcfg = replace(run.train, seed=seed)
            log({"event": "ablation-run", "variant": name, "seed": seed})
            res = train_student(tcfg, run.model, teacher, run.distill, train_seqs, log=log)
            rep = evaluate_params(res.params, eval_seqs)
            last = res.history[-1]
            d: DistillConfig = run.distill
            writer.writerow([_cell(v) for v in (
                name, seed, rep.suc, rep.pre, rep.mean_iou, last["loss"], last["kd_qkv"], last["kd_disc"],
                d.tau, d.alpha1, d.alpha2, d.beta1, d.beta2, d.enable_qkv_kd, d.enable_disc_kd, d.kd_layers,
                d.include_template, d.kd_mode, run.model.search_resolution, teacher_res, tcfg.epochs,
                tcfg.steps_per_epoch, tcfg.batch_size, tcfg.learning_rate)])
    text = buf.getvalue()
    if out_csv is not None:
        Path(out_csv).parent.mkdir(parents=True, exist_ok=True)
        Path(out_csv).write_text(text)
    return text


__all__ = ["BUILTIN_VARIANTS", "COLUMNS", "load_spec", "resolve_variants", "run_ablation", "valid_keys"]
