"""Train one teacher and 5+5 students (with / without distillation), report the mean-IoU gain.

usage: python scripts/distill_benefit.py WORKDIR [--seeds 0,1,2,3,4]
"""
import argparse
import sys
from dataclasses import replace
from pathlib import Path

from crossres.experiments import BenefitSetup, run_benefit, summary_json
from crossres.train import jsonl_logger


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("workdir")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    args = ap.parse_args()
    setup = replace(BenefitSetup(), seeds=tuple(int(s) for s in args.seeds.split(",")))
    result = run_benefit(args.workdir, setup, log=jsonl_logger(sys.stderr))
    text = summary_json(result, setup)
    Path(args.workdir, "benefit.json").write_text(text + "\n")
    print(text)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
