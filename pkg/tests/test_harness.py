import csv
import io
import json
import struct
from dataclasses import replace

import numpy as np
import pytest

from crossres.ablation import COLUMNS, load_spec, resolve_variants, run_ablation
from crossres.autodiff import Tensor
from crossres.boxes import BBox
from crossres.checkpoint import (BadMagicError, TruncatedCheckpointError, VersionMismatchError, encode,
                                 load_checkpoint, save_checkpoint, save_loaded)
from crossres.cli import main
from crossres.config import build_run_config, parse_kv
from crossres.distill import DistillConfig
from crossres.evaluate import (THRESHOLDS, evaluate_params, evaluate_predictor, evaluate_tracker,
                               metrics_from_trace_csv, success_curve)
from crossres.losses import batch_targets, cls_reg_loss, focal_loss
from crossres.model import ConfigError, HeadOutput, TrackerParams
from crossres.synth import make_targets, read_dataset
from crossres.train import TrainingDiverged, train_student, train_teacher

from conftest import TINY_STUDENT, TINY_TEACHER, TINY_TRAIN


# -- losses -------------------------------------------------------------------

def exact_head(box, g):
    heat, reg = make_targets(box, (g, g))
    off = np.zeros((1, g, g, 2))
    size = np.full((1, g, g, 2), 0.5)
    off[0][reg.cell] = reg.offset
    size[0][reg.cell] = reg.size
    return HeadOutput(Tensor(heat[None]), Tensor(off), Tensor(size))


def test_perfect_prediction_has_zero_regression_loss():
    box = BBox(0.43, 0.61, 0.2, 0.3)
    tg = batch_targets([box], (8, 8))
    _, l_reg = cls_reg_loss(exact_head(box, 8), tg)
    assert abs(l_reg.item()) < 1e-12


def test_focal_loss_is_minimal_at_target():
    box = BBox(0.5, 0.5, 0.25, 0.25)
    tg = batch_targets([box], (8, 8))
    best = focal_loss(Tensor(tg.heat), tg.heat).item()
    rng = np.random.default_rng(0)
    for _ in range(20):
        noisy = np.clip(tg.heat + rng.normal(0, 0.05, tg.heat.shape), 0, 1)
        assert focal_loss(Tensor(noisy), tg.heat).item() >= best


def test_giou_term_for_disjoint_boxes():
    # predicted box right next to the target: GIoU 0, term 1 (x lambda 2), plus L1 on the offset
    box = BBox(0.25, 0.5, 0.5, 1.0)
    tg = batch_targets([box], (2, 2))
    head = exact_head(box, 2)
    cell = tg.cell[0]
    head.offset_map.data.reshape(4, 2)[cell] += (1.0, 0.0)  # shift one cell = 0.5 crop to the right
    _, l_reg = cls_reg_loss(head, tg, lambda_l1=0.0, lambda_giou=2.0)
    assert l_reg.item() == pytest.approx(2.0, abs=1e-12)


# -- training ------------------------------------------------------------------

def test_teacher_training_deterministic_and_checkpoint(tiny_data, tmp_path):
    a = train_teacher(TINY_TRAIN, TINY_TEACHER, tiny_data / "train", tmp_path / "t.ckpt")
    b = train_teacher(TINY_TRAIN, TINY_TEACHER, tiny_data / "train")
    assert [r["loss"] for r in a.history] == [r["loss"] for r in b.history]
    assert [r["step"] for r in a.history] == [0, 1, 2]
    ck = load_checkpoint(tmp_path / "t.ckpt")
    assert ck.kind == "teacher" and ck.train_seed == 0
    assert all(ck.params[n].data.tobytes() == t.data.tobytes() for n, t in a.params)


def test_teacher_loss_decreases(tiny_data):
    cfg = replace(TINY_TRAIN, steps_per_epoch=40, batch_size=4)
    hist = train_teacher(cfg, TINY_TEACHER, tiny_data / "train").history
    first = np.mean([r["loss"] for r in hist[:5]])
    last = np.mean([r["loss"] for r in hist[-5:]])
    assert last < first


@pytest.fixture(scope="module")
def tiny_teacher(tiny_data):
    return train_teacher(TINY_TRAIN, TINY_TEACHER, tiny_data / "train").params


def test_frozen_teacher_unchanged_by_student(tiny_data, tiny_teacher):
    before = tiny_teacher.checksum()
    res = train_student(TINY_TRAIN, TINY_STUDENT, tiny_teacher, DistillConfig(), tiny_data / "train")
    assert tiny_teacher.checksum() == before
    assert all(t.grad is None and not t.requires_grad for _, t in tiny_teacher)
    assert res.history[0]["kd_qkv"] > 0 and res.history[0]["kd_disc"] > 0


@pytest.mark.parametrize("dcfg", [DistillConfig(enable_qkv_kd=False, enable_disc_kd=False),
                                  DistillConfig(beta1=0.0, beta2=0.0)])
def test_kd_disabled_matches_baseline_bitwise(tiny_data, tiny_teacher, dcfg):
    off = DistillConfig(enable_qkv_kd=False, enable_disc_kd=False)
    base = train_student(TINY_TRAIN, TINY_STUDENT, None, off, tiny_data / "train")
    run = train_student(TINY_TRAIN, TINY_STUDENT, tiny_teacher, dcfg, tiny_data / "train")
    assert [r["loss"] for r in run.history] == [r["loss"] for r in base.history]
    assert run.params.checksum() == base.params.checksum()


def test_kd_flags_change_training(tiny_data, tiny_teacher):
    base = train_student(TINY_TRAIN, TINY_STUDENT, None, DistillConfig(enable_qkv_kd=False, enable_disc_kd=False),
                         tiny_data / "train")
    kd = train_student(TINY_TRAIN, TINY_STUDENT, tiny_teacher, DistillConfig(beta1=1.0, beta2=1.0),
                       tiny_data / "train")
    assert kd.params.checksum() != base.params.checksum()


def test_feature_mode_has_distinct_trace(tiny_data, tiny_teacher):
    q = train_student(TINY_TRAIN, TINY_STUDENT, tiny_teacher, DistillConfig(), tiny_data / "train")
    f = train_student(TINY_TRAIN, TINY_STUDENT, tiny_teacher, DistillConfig(kd_mode="feature"), tiny_data / "train")
    assert q.history[0]["kd_qkv"] != f.history[0]["kd_qkv"]


@pytest.mark.parametrize("dcfg", [DistillConfig(include_template=True), DistillConfig(kd_layers=2)])
def test_ablation_axes_train(tiny_data, tiny_teacher, dcfg):
    res = train_student(TINY_TRAIN, TINY_STUDENT, tiny_teacher, dcfg, tiny_data / "train")
    assert np.isfinite(res.final_loss)


def test_architecture_mismatch_rejected(tiny_data, tiny_teacher):
    other = replace(TINY_STUDENT, embed_dim=8)
    with pytest.raises(ConfigError):
        train_student(TINY_TRAIN, other, tiny_teacher, DistillConfig(), tiny_data / "train")


def test_missing_teacher_rejected(tiny_data):
    with pytest.raises(ConfigError):
        train_student(TINY_TRAIN, TINY_STUDENT, None, DistillConfig(), tiny_data / "train")


def test_init_from_teacher_resizes_position_embeddings(tiny_data, tiny_teacher):
    res = train_student(replace(TINY_TRAIN, steps_per_epoch=1), TINY_STUDENT, tiny_teacher,
                        DistillConfig(enable_qkv_kd=False, enable_disc_kd=False), tiny_data / "train",
                        init_from_teacher=True)
    assert res.params["pos.search"].shape == (TINY_STUDENT.num_search_tokens, TINY_STUDENT.embed_dim)


def test_divergence_is_reported(tiny_data):
    seqs = read_dataset(tiny_data / "train", mmap=False)
    for s in seqs:
        for f in s.frames:
            f[0, 0, 0] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_teacher(TINY_TRAIN, TINY_TEACHER, seqs)


# -- checkpoints ------------------------------------------------------------------

def test_checkpoint_roundtrip_byte_identical(tmp_path, tiny_data, tiny_teacher):
    res = train_student(TINY_TRAIN, TINY_STUDENT, tiny_teacher, DistillConfig(tau=0.18), tiny_data / "train")
    p1 = save_checkpoint(res.params, tmp_path / "a.ckpt", kind="student", train_cfg=TINY_TRAIN,
                         distill_cfg=DistillConfig(tau=0.18), optimizer=res.optimizer)
    ck = load_checkpoint(p1)
    p2 = save_loaded(ck, tmp_path / "b.ckpt")
    assert p1.read_bytes() == p2.read_bytes()
    assert ck.distill_cfg == DistillConfig(tau=0.18)
    assert "adam.m.patch.w" in ck.extra_tensors
    eval_seqs = read_dataset(tiny_data / "eval")
    r1, r2 = evaluate_params(res.params, eval_seqs), evaluate_tracker(p2, eval_seqs)
    assert (r1.suc, r1.pre, r1.mean_iou) == (r2.suc, r2.pre, r2.mean_iou)


def test_checkpoint_errors(tmp_path):
    blob = encode(TrackerParams.init(TINY_STUDENT))
    (tmp_path / "bad").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(BadMagicError):
        load_checkpoint(tmp_path / "bad")
    (tmp_path / "ver").write_bytes(blob[:4] + struct.pack("<I", 2) + blob[8:])
    with pytest.raises(VersionMismatchError, match="2.*1"):
        load_checkpoint(tmp_path / "ver")
    (tmp_path / "cut").write_bytes(blob[:-5])
    with pytest.raises(TruncatedCheckpointError):
        load_checkpoint(tmp_path / "cut")


# -- evaluation -------------------------------------------------------------------

def test_oracle_predictor_scores_perfectly(tiny_data):
    seqs = read_dataset(tiny_data / "eval")
    rep = evaluate_predictor(lambda s: s.boxes[1:], seqs)
    assert (rep.suc, rep.pre) == (100.0, 1.0)
    assert len(rep.trace) == sum(len(s) - 1 for s in seqs)


def test_constant_predictor_is_worse(tiny_data):
    seqs = read_dataset(tiny_data / "eval")
    rep = evaluate_predictor(lambda s: [s.boxes[0]] * (len(s) - 1), seqs)
    assert rep.suc < 100.0


def test_success_curve_non_increasing():
    curve = success_curve(np.random.default_rng(0).random(50))
    assert len(curve) == len(THRESHOLDS) == 21
    assert np.all(np.diff(curve) <= 0)


def test_metrics_recomputed_from_trace(tiny_data, tiny_teacher):
    rep = evaluate_params(tiny_teacher, read_dataset(tiny_data / "eval"))
    suc, pre, miou = metrics_from_trace_csv(rep.trace_csv())
    assert suc == pytest.approx(rep.suc, abs=1e-9)
    assert pre == pytest.approx(rep.pre, abs=1e-12)
    assert miou == pytest.approx(rep.mean_iou, abs=1e-12)
    assert 0 <= rep.suc <= 100 and 0 <= rep.pre <= 1


# -- config files -------------------------------------------------------------------

def test_parse_kv_comments_and_errors():
    kv = parse_kv("# header\ntrain.epochs = 3  # inline\n\ntau=0.18\n")
    assert kv == {"train.epochs": "3", "tau": "0.18"}
    with pytest.raises(ConfigError):
        parse_kv("no equals sign")


def test_build_run_config():
    run = build_run_config({"epochs": "3", "distill.tau": "0.18", "preset": "toy-teacher", "embed_dim": "32"})
    assert run.train.epochs == 3 and run.distill.tau == 0.18
    assert run.model.search_resolution == 96 and run.model.embed_dim == 32
    with pytest.raises(ConfigError, match="valid keys"):
        build_run_config({"train.epoch": "3"})


# -- ablation -------------------------------------------------------------------------

def write_spec(path, tiny_data, variants, seeds="0, 1", extra=""):
    path.write_text(
        f"[ablation]\ndata = {tiny_data / 'train'}\neval_data = {tiny_data / 'eval'}\nseeds = {seeds}\n"
        f"variants = {variants}\nteacher_resolution = 48\n"
        "train.epochs = 1\ntrain.steps_per_epoch = 2\ntrain.batch_size = 2\n"
        "model.embed_dim = 16\nmodel.num_layers = 2\nmodel.num_heads = 2\nmodel.search_resolution = 32\n"
        "model.head_channels = 8\n" + extra)
    return path


def test_ablation_cardinality_and_determinism(tmp_path, tiny_data):
    spec = write_spec(tmp_path / "a.ini", tiny_data, "full, no-qkv-kd, no-disc-kd", seeds="0, 1, 2")
    a = run_ablation(spec, tmp_path / "a.csv")
    b = run_ablation(spec)
    assert a == b
    rows = list(csv.DictReader(io.StringIO(a)))
    assert len(rows) == 9
    assert list(rows[0]) == COLUMNS
    assert [(r["variant"], r["seed"]) for r in rows[:3]] == [("full", "0"), ("full", "1"), ("full", "2")]
    assert rows[3]["enable_qkv_kd"] == "false" and float(rows[3]["final_kd_qkv"]) == 0.0


def test_ablation_custom_and_unknown_variants(tmp_path, tiny_data):
    spec = write_spec(tmp_path / "c.ini", tiny_data, "mine", extra="[variant mine]\ndistill.tau = 0.3\n")
    assert resolve_variants(load_spec(spec)) == [("mine", {"distill.tau": "0.3"})]
    bad = write_spec(tmp_path / "d.ini", tiny_data, "full, nope")
    with pytest.raises(ConfigError, match="valid variants: .*feature-distillation"):
        run_ablation(bad)
    bad_key = write_spec(tmp_path / "e.ini", tiny_data, "full", extra="train.nonsense = 1\n")
    with pytest.raises(ConfigError, match="valid keys"):
        run_ablation(bad_key)


# -- CLI -----------------------------------------------------------------------------------

def json_lines(text):
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def test_cli_macs(capsys):
    assert main(["macs", "--preset", "vit-b", "--resolution", "256"]) == 0
    out = json_lines(capsys.readouterr().out)[-1]
    assert abs(out["gmacs"] - 29.0) <= 0.15 * 29.0 and out["search_grid"] == 16


def test_cli_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["macs", "--frobnicate"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_cli_error_is_one_line(tmp_path, capsys):
    assert main(["eval", "--ckpt", str(tmp_path / "missing.ckpt"), "--data", str(tmp_path)]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error:") and err.count("\n") == 1


def test_cli_pipeline(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# tiny\ntrain.batch_size = 2\nlog_every = 1\nembed_dim = 16\nnum_layers = 2\n"
                   "num_heads = 2\nhead_channels = 8\n")
    data = tmp_path / "data"
    assert main(["gen-data", "--out", str(data), "--num-seqs", "2", "--length", "4", "--height", "64",
                 "--width", "64", "--seed", "5"]) == 0
    common = ["--data", str(data), "--epochs", "1", "--steps", "2", "--config", str(cfg)]
    assert main(["train-teacher", *common, "--out", str(tmp_path / "t.ckpt"), "--resolution", "48"]) == 0
    capsys.readouterr()
    assert main(["train-student", *common, "--out", str(tmp_path / "s.ckpt"), "--resolution", "32",
                 "--no-qkv-kd", "--no-disc-kd"]) == 0
    steps = [r for r in json_lines(capsys.readouterr().out) if r.get("event") == "step"]
    assert len(steps) == 2 and all(r["kd_qkv"] == 0.0 and r["kd_disc"] == 0.0 for r in steps)
    assert main(["train-student", *common, "--out", str(tmp_path / "k.ckpt"), "--resolution", "32",
                 "--teacher", str(tmp_path / "t.ckpt"), "--tau", "0.22", "--alpha1", "0.5", "--alpha2", "0.5",
                 "--beta1", "0.1", "--beta2", "0.1"]) == 0
    recs = json_lines(capsys.readouterr().out)
    assert recs[0]["distill"]["tau"] == 0.22 and recs[0]["distill"]["beta2"] == 0.1
    assert all(r["kd_qkv"] > 0 for r in recs if r.get("event") == "step")
    assert main(["eval", "--ckpt", str(tmp_path / "k.ckpt"), "--data", str(data),
                 "--trace", str(tmp_path / "trace.csv")]) == 0
    ev = json_lines(capsys.readouterr().out)[-1]
    assert ev["frames"] == 6
    assert metrics_from_trace_csv((tmp_path / "trace.csv").read_text())[0] == pytest.approx(ev["suc"])


def test_cli_grad_check_small(capsys):
    assert main(["grad-check", "--seed", "3", "--num-configs", "2"]) == 0
    last = json_lines(capsys.readouterr().out)[-1]
    assert last["ok"] and last["max_rel_err"] < 1e-4
