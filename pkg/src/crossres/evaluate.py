"""Sequence tracking and SUC / PRE metrics.

SUC is the mean success rate over IoU thresholds 0, 0.05, ..., 1 (a frame
succeeds when IoU >= threshold), times 100, averaged over sequences. PRE is
the fraction of frames whose center error, divided by the frame diagonal, is
at most 0.05. Frame 0 only initializes the tracker and is not scored.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .boxes import BBox, iou
from .model import TrackerParams, decode_boxes, track_forward
from .synth import (SEARCH_CONTEXT, TEMPLATE_CONTEXT, SyntheticSequence, crop_window, read_dataset,
                    render_crop)

THRESHOLDS = np.linspace(0.0, 1.0, 21)
PRE_RADIUS = 0.05
DEFAULT_WINDOW_PENALTY = 0.49
MIN_SIDE_PX = 2.0


@dataclass(frozen=True)
class TraceRow:
    seq: int
    frame: int
    box: BBox
    iou: float
    center_error: float  # normalized by the frame diagonal


@dataclass
class EvalReport:
    seq_mean_iou: list[float]
    suc: float
    pre: float
    mean_iou: float
    trace: list[TraceRow] = field(default_factory=list)

    def success_curve(self) -> np.ndarray:
        return success_curve([r.iou for r in self.trace])

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["seq", "frame", "cx", "cy", "w", "h", "iou", "center_error"])
        for r in self.trace:
            w.writerow([r.seq, r.frame, *(repr(float(v)) for v in (r.box.cx, r.box.cy, r.box.w, r.box.h,
                                                                    r.iou, r.center_error))])
        return buf.getvalue()

    def write_trace(self, path) -> Path:
        path = Path(path)
        path.write_text(self.trace_csv())
        return path


def success_curve(ious: Sequence[float]) -> np.ndarray:
    v = np.asarray(ious, dtype=np.float64)
    return np.array([(v >= t).mean() for t in THRESHOLDS])


def center_error(pred: BBox, gt: BBox, height: int, width: int) -> float:
    dx = (pred.cx - gt.cx) * width
    dy = (pred.cy - gt.cy) * height
    return math.hypot(dx, dy) / math.hypot(width, height)


def report_from_predictions(seqs: Sequence[SyntheticSequence],
                            preds: Sequence[Sequence[BBox]]) -> EvalReport:
    """Score per-sequence predictions for frames 1..n-1."""
    trace, seq_iou, seq_suc, seq_pre = [], [], [], []
    for k, (seq, pb) in enumerate(zip(seqs, preds)):
        if len(pb) != len(seq) - 1:
            raise ValueError(f"sequence {k}: {len(pb)} predictions for {len(seq)} frames")
        ious, errs = [], []
        for t, box in enumerate(pb, start=1):
            o = iou(box, seq.boxes[t])
            e = center_error(box, seq.boxes[t], seq.height, seq.width)
            trace.append(TraceRow(k, t, box, o, e))
            ious.append(o)
            errs.append(e)
        seq_iou.append(float(np.mean(ious)))
        seq_suc.append(100.0 * float(success_curve(ious).mean()))
        seq_pre.append(float(np.mean(np.asarray(errs) <= PRE_RADIUS)))
    return EvalReport(seq_iou, float(np.mean(seq_suc)), float(np.mean(seq_pre)),
                      float(np.mean(seq_iou)), trace)


def metrics_from_trace_csv(text: str) -> tuple[float, float, float]:
    """Recompute (SUC, PRE, mean IoU) from an emitted trace CSV."""
    by_seq: dict[int, list[tuple[float, float]]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        by_seq.setdefault(int(row["seq"]), []).append((float(row["iou"]), float(row["center_error"])))
    sucs, pres, mious = [], [], []
    for k in sorted(by_seq):
        ious = [a for a, _ in by_seq[k]]
        errs = [b for _, b in by_seq[k]]
        curve = [sum(1 for v in ious if v >= t) / len(ious) for t in THRESHOLDS]
        sucs.append(100.0 * sum(curve) / len(curve))
        pres.append(sum(1 for e in errs if e <= PRE_RADIUS) / len(errs))
        mious.append(sum(ious) / len(ious))
    n = len(sucs)
    return sum(sucs) / n, sum(pres) / n, sum(mious) / n


def _sanitize(box: BBox, height: int, width: int) -> BBox:
    w = max(box.w, MIN_SIDE_PX / width)
    h = max(box.h, MIN_SIDE_PX / height)
    cx = min(max(box.cx, 0.0), 1.0)
    cy = min(max(box.cy, 0.0), 1.0)
    return BBox(cx, cy, min(w, 1.0), min(h, 1.0))


def track_with_model(params: TrackerParams, seqs: Sequence[SyntheticSequence],
                     window_penalty: float = DEFAULT_WINDOW_PENALTY) -> list[list[BBox]]:
    """Run the tracker on all sequences in lockstep (one batch per frame index)."""
    cfg = params.config
    preds: list[list[BBox]] = [[] for _ in seqs]
    state = [seq.boxes[0] for seq in seqs]
    templates = np.stack([
        render_crop(np.asarray(seq.frames[0]),
                    crop_window(seq.boxes[0], TEMPLATE_CONTEXT, seq.height, seq.width),
                    cfg.template_resolution)
        for seq in seqs])
    longest = max(len(s) for s in seqs)
    with ad.no_grad():
        for t in range(1, longest):
            active = [k for k, s in enumerate(seqs) if t < len(s)]
            maps, crops = [], []
            for k in active:
                seq = seqs[k]
                m = crop_window(state[k], SEARCH_CONTEXT, seq.height, seq.width)
                maps.append(m)
                crops.append(render_crop(np.asarray(seq.frames[t]), m, cfg.search_resolution))
            head = track_forward(templates[active], np.stack(crops), params)
            boxes = decode_boxes(head, window_penalty)
            for k, m, b in zip(active, maps, boxes):
                seq = seqs[k]
                fb = m.frame_coords(BBox(*b))
                fb = _sanitize(fb, seq.height, seq.width)
                preds[k].append(fb)
                state[k] = fb
    return preds


def evaluate_params(params: TrackerParams, seqs: Sequence[SyntheticSequence],
                    window_penalty: float = DEFAULT_WINDOW_PENALTY) -> EvalReport:
    return report_from_predictions(seqs, track_with_model(params, seqs, window_penalty))


def evaluate_tracker(ckpt, data, window_penalty: float = DEFAULT_WINDOW_PENALTY) -> EvalReport:
    """Evaluate a checkpoint path / Checkpoint / TrackerParams on a data dir or sequence list."""
    from .checkpoint import Checkpoint, load_checkpoint

    if isinstance(ckpt, (str, Path)):
        ckpt = load_checkpoint(ckpt)
    params = ckpt.params if isinstance(ckpt, Checkpoint) else ckpt
    seqs = read_dataset(data) if isinstance(data, (str, Path)) else list(data)
    return evaluate_params(params, seqs, window_penalty)


def evaluate_predictor(predict: Callable[[SyntheticSequence], Sequence[BBox]],
                       seqs: Sequence[SyntheticSequence]) -> EvalReport:
    """Score an arbitrary predictor returning boxes for frames 1..n-1."""
    return report_from_predictions(seqs, [list(predict(s)) for s in seqs])
