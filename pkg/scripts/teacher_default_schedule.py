"""Train the toy teacher with the default TrainConfig and score it on held-out easy sequences.

usage: python scripts/teacher_default_schedule.py WORKDIR
"""
import json
import sys
import time
from pathlib import Path

from crossres.evaluate import evaluate_params
from crossres.model import PRESETS
from crossres.synth import read_dataset, write_dataset
from crossres.train import TrainConfig, jsonl_logger, train_teacher


def main() -> int:
    root = Path(sys.argv[1])
    if not (root / "train" / "seq_0000").exists():
        write_dataset(root / "train", 1, 64, 24)
    if not (root / "eval_easy" / "seq_0000").exists():
        write_dataset(root / "eval_easy", 3, 16, 24, difficulty="easy")
    cfg = TrainConfig(log_every=200)
    t0 = time.perf_counter()
    res = train_teacher(cfg, PRESETS["toy-teacher"], root / "train", root / "teacher_default.ckpt",
                        log=jsonl_logger(sys.stderr))
    seconds = time.perf_counter() - t0
    rep = evaluate_params(res.params, read_dataset(root / "eval_easy"))
    out = {"steps": cfg.total_steps, "train_seconds": seconds, "final_loss": res.final_loss,
           "easy_mean_iou": rep.mean_iou, "easy_suc": rep.suc, "easy_pre": rep.pre}
    print(json.dumps(out, indent=2))
    (root / "teacher_default.json").write_text(json.dumps(out, indent=2) + "\n")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
