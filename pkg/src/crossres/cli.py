"""Command-line entry point: ``python -m crossres <subcommand> ...``.

Every subcommand writes JSON-lines to stdout (progress records, then one
result record). Failures print a single ``error: ...`` line to stderr and
exit 1; argument errors exit 2 via argparse.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace

from . import __version__
from .autodiff import ContractError, DimensionError
from .checkpoint import CheckpointError, load_checkpoint
from .config import build_run_config, override, read_kv_file
from .model import PRESETS, ConfigError, estimate_macs
from .train import TrainingDiverged, jsonl_logger


def _emit(record: dict) -> None:
    sys.stdout.write(json.dumps(record, sort_keys=True) + "\n")
    sys.stdout.flush()


def _run_config(args, model_base):
    kv = read_kv_file(args.config) if args.config else {}
    run = build_run_config(kv, model_base)
    train = override(run.train, seed=args.seed, epochs=getattr(args, "epochs", None),
                     steps_per_epoch=getattr(args, "steps", None))
    model = run.model
    if getattr(args, "resolution", None) is not None:
        model = model.with_resolution(args.resolution)
    return replace(run, train=train, model=model)


# -- subcommands ------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .synth import write_dataset

    seed = 0 if args.seed is None else args.seed
    t0 = time.perf_counter()
    paths = write_dataset(args.out, seed, args.num_seqs, args.length, args.difficulty, args.height, args.width)
    _emit({"event": "gen-data", "out": str(args.out), "sequences": len(paths), "length": args.length,
           "seed": seed, "difficulty": args.difficulty, "seconds": time.perf_counter() - t0})
    return 0


def cmd_train_teacher(args) -> int:
    from .train import train_teacher

    run = _run_config(args, PRESETS["toy-teacher"])
    _emit({"event": "config", "stage": "teacher", "train": run.train.to_dict(), "model": run.model.to_dict()})
    res = train_teacher(run.train, run.model, args.data, args.out, log=jsonl_logger(sys.stdout))
    _emit({"event": "done", "stage": "teacher", "final_loss": res.final_loss,
           "checksum": res.params.checksum(), "out": str(args.out)})
    return 0


def cmd_train_student(args) -> int:
    from .train import train_student

    run = _run_config(args, PRESETS["toy-student"])
    distill = override(run.distill, tau=args.tau, alpha1=args.alpha1, alpha2=args.alpha2,
                       beta1=args.beta1, beta2=args.beta2)
    if args.no_qkv_kd:
        distill = replace(distill, enable_qkv_kd=False)
    if args.no_disc_kd:
        distill = replace(distill, enable_disc_kd=False)
    if (distill.enable_qkv_kd or distill.enable_disc_kd or args.init_from_teacher) and not args.teacher:
        raise ConfigError("--teacher is required unless both --no-qkv-kd and --no-disc-kd are given")
    _emit({"event": "config", "stage": "student", "train": run.train.to_dict(), "model": run.model.to_dict(),
           "distill": distill.to_dict(), "init_from_teacher": args.init_from_teacher})
    res = train_student(run.train, run.model, args.teacher, distill, args.data, args.out,
                        log=jsonl_logger(sys.stdout), init_from_teacher=args.init_from_teacher)
    _emit({"event": "done", "stage": "student", "final_loss": res.final_loss,
           "checksum": res.params.checksum(), "out": str(args.out)})
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate_tracker

    rep = evaluate_tracker(load_checkpoint(args.ckpt), args.data, args.window_penalty)
    if args.trace:
        rep.write_trace(args.trace)
    _emit({"event": "eval", "suc": rep.suc, "pre": rep.pre, "mean_iou": rep.mean_iou,
           "seq_mean_iou": rep.seq_mean_iou, "frames": len(rep.trace)})
    return 0


def cmd_macs(args) -> int:
    cfg = PRESETS[args.preset]
    if args.config:
        cfg = build_run_config(read_kv_file(args.config), cfg).model
    if args.resolution is not None:
        cfg = cfg.with_resolution(args.resolution)
    macs = estimate_macs(cfg)
    _emit({"event": "macs", "preset": args.preset, "search_resolution": cfg.search_resolution,
           "template_resolution": cfg.template_resolution, "search_grid": cfg.search_grid,
           "macs": macs, "gmacs": macs / 1e9})
    return 0


def cmd_ablate(args) -> int:
    from .ablation import run_ablation

    text = run_ablation(args.spec, args.out, log=jsonl_logger(sys.stdout))
    _emit({"event": "ablate", "out": str(args.out), "rows": text.count("\n") - 1})
    return 0


def cmd_grad_check(args) -> int:
    from .gradcheck import run_grad_check

    seed = 0 if args.seed is None else args.seed
    worst = 0.0
    for case in run_grad_check(seed, args.num_configs, args.eps, args.max_coords):
        worst = max(worst, case.max_rel_err)
        _emit({"event": "grad-check-case", "case": case.index, "max_rel_err": case.max_rel_err,
               "loss": case.loss, "kd_qkv": case.kd_qkv, "kd_disc": case.kd_disc,
               "student_resolution": case.student.search_resolution,
               "teacher_resolution": case.teacher.search_resolution})
    worst = float(worst)
    ok = bool(worst < args.tolerance)
    _emit({"event": "grad-check", "seed": seed, "configs": args.num_configs, "eps": args.eps,
           "max_rel_err": worst, "tolerance": args.tolerance, "ok": ok})
    if not ok:
        print(f"error: max relative gradient error {worst:.3e} >= {args.tolerance:g}", file=sys.stderr)
        return 1
    return 0


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crossres", description="Cross-resolution distillation for ViT trackers.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file (# comments)")
    common.add_argument("--seed", type=int, metavar="N")

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic sequences")
    g.add_argument("--out", required=True, metavar="DIR")
    g.add_argument("--num-seqs", type=int, default=64)
    g.add_argument("--length", type=int, default=24)
    g.add_argument("--difficulty", default="mixed", choices=["mixed", "easy", "clutter", "distractor"])
    g.add_argument("--height", type=int, default=128)
    g.add_argument("--width", type=int, default=128)
    g.set_defaults(func=cmd_gen_data)

    def training(name, help_, func):
        s = sub.add_parser(name, parents=[common], help=help_)
        s.add_argument("--data", required=True, metavar="DIR")
        s.add_argument("--out", required=True, metavar="CKPT")
        s.add_argument("--resolution", type=int, metavar="N", help="search resolution in pixels")
        s.add_argument("--epochs", type=int)
        s.add_argument("--steps", type=int, help="steps per epoch")
        s.set_defaults(func=func)
        return s

    training("train-teacher", "train the high-resolution teacher", cmd_train_teacher)
    s = training("train-student", "train a low-resolution student with distillation", cmd_train_student)
    s.add_argument("--teacher", metavar="CKPT")
    s.add_argument("--no-qkv-kd", action="store_true")
    s.add_argument("--no-disc-kd", action="store_true")
    s.add_argument("--tau", type=float)
    for name in ("alpha1", "alpha2", "beta1", "beta2"):
        s.add_argument(f"--{name}", type=float)
    s.add_argument("--init-from-teacher", action="store_true",
                   help="experimental: start from teacher weights with resized position embeddings")

    e = sub.add_parser("eval", parents=[common], help="track held-out sequences, report SUC/PRE")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, metavar="DIR")
    e.add_argument("--window-penalty", type=float, default=0.49)
    e.add_argument("--trace", metavar="CSV", help="write the per-frame trace here")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("macs", parents=[common], help="analytic MAC count")
    m.add_argument("--preset", default="vit-b", choices=sorted(PRESETS))
    m.add_argument("--resolution", type=int, metavar="N")
    m.set_defaults(func=cmd_macs)

    a = sub.add_parser("ablate", parents=[common], help="run an ablation spec, write CSV")
    a.add_argument("--spec", required=True, metavar="INI")
    a.add_argument("--out", required=True, metavar="CSV")
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("grad-check", parents=[common], help="finite-difference check of the full loss")
    c.add_argument("--num-configs", type=int, default=10)
    c.add_argument("--eps", type=float, default=1e-5)
    c.add_argument("--max-coords", type=int, default=6, help="coordinates sampled per tensor")
    c.add_argument("--tolerance", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)
    return p


EXPECTED_ERRORS = (ConfigError, DimensionError, ContractError, CheckpointError, TrainingDiverged,
                   OSError, ValueError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
