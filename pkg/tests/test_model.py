import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossres import autodiff as ad
from crossres.autodiff import Tensor
from crossres.model import (PRESETS, ConfigError, HeadOutput, ModelConfig, TrackerParams, decode_box, decode_boxes,
                            embed_inputs, encoder_layer, estimate_macs, forward_backbone, head_forward, param_shapes,
                            run_backbone, tokenize)

from oracles import scalar_encoder_layer

TINY = ModelConfig(patch_size=4, embed_dim=8, num_layers=2, num_heads=2, search_resolution=12,
                   template_resolution=8, head_channels=4)


def images(cfg, seed=0, batch=None):
    rng = np.random.default_rng(seed)
    lead = () if batch is None else (batch,)
    return (rng.random((*lead, cfg.template_resolution, cfg.template_resolution, 3)),
            rng.random((*lead, cfg.search_resolution, cfg.search_resolution, 3)))


# -- config ------------------------------------------------------------------

def test_token_counts_and_default_template():
    cfg = ModelConfig(patch_size=8, search_resolution=64)
    assert cfg.template_resolution == 32
    assert (cfg.num_search_tokens, cfg.num_template_tokens) == (64, 16)


@pytest.mark.parametrize("kw", [dict(search_resolution=60), dict(embed_dim=30, num_heads=4),
                                dict(template_resolution=12)])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_roundtrip():
    cfg = PRESETS["vit-b"]
    assert ModelConfig.from_dict({k: str(v) for k, v in cfg.to_dict().items()}) == cfg


def test_toy_grids():
    assert PRESETS["toy-teacher"].search_grid == 12
    assert PRESETS["toy-student"].search_grid == 8


def test_parameter_count_is_a_function_of_config():
    a = TrackerParams.init(TINY, seed=0)
    b = TrackerParams.init(TINY, seed=9)
    expected = sum(int(np.prod(s)) for s in param_shapes(TINY).values())
    assert a.num_parameters() == b.num_parameters() == expected


def test_freeze_clears_requires_grad():
    p = TrackerParams.init(TINY).freeze()
    assert all(not t.requires_grad for _, t in p) and p.trainable() == []


# -- tokenization ------------------------------------------------------------

def test_single_patch_and_vitb_token_count():
    cfg = ModelConfig(patch_size=16, embed_dim=4, num_heads=1, search_resolution=16, template_resolution=16)
    p = TrackerParams.init(cfg)
    assert tokenize(np.zeros((16, 16, 3)), p).shape == (1, 4)
    assert PRESETS["vit-b"].num_search_tokens == 256


def test_zero_image_zero_bias_gives_zero_tokens():
    p = TrackerParams.init(TINY)
    assert np.all(tokenize(np.zeros((12, 12, 3)), p).data == 0.0)


def test_tokenize_rejects_indivisible_image():
    with pytest.raises(ConfigError):
        tokenize(np.zeros((10, 12, 3)), TrackerParams.init(TINY))


def test_patch_order_is_row_major():
    cfg = ModelConfig(patch_size=2, embed_dim=1, num_heads=1, num_layers=0, search_resolution=4,
                      template_resolution=2)
    p = TrackerParams.zeros(cfg)
    p["patch.w"].data[:] = 0.0
    p["patch.w"].data[0, 0] = 1.0  # picks pixel (0, 0) channel 0 of each patch
    img = np.zeros((4, 4, 3))
    img[0, 2, 0] = 7.0  # top-right patch
    img[2, 0, 0] = 9.0  # bottom-left patch
    assert tokenize(img, p).data[:, 0].tolist() == [0.0, 7.0, 9.0, 0.0]


def test_embed_template_rows_first():
    p = TrackerParams.init(TINY, seed=1)
    for name in ("pos.template", "pos.search"):
        p[name].data[:] = 0.0
    t, s = images(TINY)
    h = embed_inputs(t, s, p)
    assert h.shape == (TINY.num_template_tokens + TINY.num_search_tokens, TINY.embed_dim)
    top, bot = ad.split_rows(h, TINY.num_template_tokens)
    assert top.data.tobytes() == tokenize(t, p).data.tobytes()
    assert bot.data.tobytes() == tokenize(s, p).data.tobytes()


def test_embed_rejects_wrong_resolution():
    t, s = images(TINY)
    with pytest.raises(ConfigError):
        embed_inputs(s, s, TrackerParams.init(TINY))


# -- encoder -------------------------------------------------------------------

def test_zero_weights_layer_is_identity():
    p = TrackerParams.zeros(TINY)
    h = Tensor(np.random.default_rng(2).standard_normal((13, 8)))
    out, _ = encoder_layer(h, p.layer(0), TINY.num_heads)
    assert out.data.tobytes() == h.data.tobytes()


def test_attention_rows_sum_to_one():
    p = TrackerParams.init(TINY, seed=3, std=0.5)
    h = Tensor(np.random.default_rng(3).standard_normal((2, 13, 8)))
    _, _, attn = encoder_layer(h, p.layer(0), TINY.num_heads, return_attn=True)
    assert attn.shape == (2, 2, 13, 13)
    np.testing.assert_allclose(attn.data.sum(-1), 1.0, rtol=0, atol=1e-12)


def test_two_token_layer_matches_scalar_oracle():
    cfg = ModelConfig(patch_size=2, embed_dim=4, num_layers=1, num_heads=2, mlp_ratio=1.5,
                      search_resolution=2, template_resolution=2)
    rng = np.random.default_rng(4)
    lp = {n[len("layer0."):]: Tensor(rng.standard_normal(s) * 0.7) for n, s in param_shapes(cfg).items()
          if n.startswith("layer0.")}
    h = rng.standard_normal((2, 4))
    out, (q, k, v), attn = encoder_layer(Tensor(h), lp, 2, return_attn=True)
    ref_out, ref_q, ref_k, ref_v, ref_attn = scalar_encoder_layer(
        h.tolist(), {n: t.data.tolist() for n, t in lp.items()}, 2)
    np.testing.assert_allclose(q.data, ref_q, atol=1e-12)
    np.testing.assert_allclose(k.data, ref_k, atol=1e-12)
    np.testing.assert_allclose(v.data, ref_v, atol=1e-12)
    np.testing.assert_allclose(attn.data, ref_attn, atol=1e-12)
    np.testing.assert_allclose(out.data, ref_out, atol=1e-12)


def test_zero_layer_backbone_is_embedding_split():
    cfg = ModelConfig(patch_size=4, embed_dim=8, num_layers=0, num_heads=2, search_resolution=12,
                      template_resolution=8)
    p = TrackerParams.init(cfg, seed=5)
    t, s = images(cfg)
    f_t, f_s, _ = forward_backbone(t, s, p)
    ref_t, ref_s = ad.split_rows(embed_inputs(t, s, p), cfg.num_template_tokens)
    assert f_t.data.tobytes() == ref_t.data.tobytes()
    assert f_s.data.tobytes() == ref_s.data.tobytes()


def test_qkv_slice_tracks_search_rows():
    # a marker injected into one search patch must show up only in that search row of Q/K/V
    p = TrackerParams.init(TINY, seed=6)
    t, s = images(TINY, seed=6)
    base = run_backbone(t, s, p, qkv_layers=(0,))
    s2 = s.copy()
    s2[4:8, 8:12] += 1.0  # search patch (1, 2) -> row 5
    moved = run_backbone(t, s2, p, qkv_layers=(0,))
    n_t = TINY.num_template_tokens
    diff = np.abs(moved.qkv[0][0].data - base.qkv[0][0].data).sum(-1)
    assert np.flatnonzero(diff > 0).tolist() == [n_t + 5]
    _, _, last = forward_backbone(t, s2, p)
    assert last.q.shape == (TINY.num_search_tokens, TINY.embed_dim)


def test_teacher_student_grids():
    for name, grid in (("toy-teacher", 12), ("toy-student", 8)):
        cfg = PRESETS[name]
        p = TrackerParams.init(cfg)
        _, f_s, qkv = forward_backbone(*images(cfg), p)
        assert f_s.shape == (grid * grid, cfg.embed_dim) and qkv.k.shape == f_s.shape


# -- head / decode -------------------------------------------------------------

def test_zero_head_scores_half():
    p = TrackerParams.zeros(TINY)
    head = head_forward(Tensor(np.zeros((9, 8))), p)
    assert np.all(head.score_map.data == 0.5)
    assert head.offset_map.shape == (3, 3, 2)


def test_vitb_head_grid():
    assert PRESETS["vit-b"].search_grid == 16


def one_hot_head(g, cell, offset=(0.5, 0.5), size=(0.25, 0.25)):
    score = np.zeros((g, g))
    score[cell] = 1.0
    return HeadOutput(score, np.broadcast_to(offset, (g, g, 2)).copy(), np.broadcast_to(size, (g, g, 2)).copy())


def test_decode_one_hot_origin():
    box = decode_box(one_hot_head(4, (0, 0)), 0.0)
    assert (box.cx, box.cy, box.w, box.h) == (0.5 / 4, 0.5 / 4, 0.25, 0.25)


def test_decode_uniform_with_window_picks_center():
    g = 5
    head = HeadOutput(np.full((g, g), 0.3), np.zeros((g, g, 2)), np.full((g, g, 2), 0.1))
    box = decode_box(head, 1.0)
    assert (box.cx, box.cy) == (2 / 5, 2 / 5)


def test_decode_ties_row_major_first():
    head = HeadOutput(np.ones((3, 3)), np.zeros((3, 3, 2)), np.full((3, 3, 2), 0.1))
    assert decode_box(head, 0.0).cx == 0.0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3))
def test_decode_invariant_to_positive_scaling(seed, c):
    rng = np.random.default_rng(seed)
    head = HeadOutput(rng.random((4, 4)), rng.random((4, 4, 2)), rng.random((4, 4, 2)))
    scaled = HeadOutput(head.score_map * c, head.offset_map, head.size_map)
    assert decode_box(head, 0.0) == decode_box(scaled, 0.0)


def test_decode_rejects_bad_penalty():
    with pytest.raises(ValueError):
        decode_boxes(one_hot_head(3, (1, 1)), 1.5)


def test_head_deterministic():
    p = TrackerParams.init(TINY, seed=7)
    f = Tensor(np.random.default_rng(7).standard_normal((9, 8)))
    a, b = head_forward(f, p), head_forward(f, p)
    assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a, b))


# -- MACs ----------------------------------------------------------------------

@pytest.mark.parametrize("res,gmacs,grid", [(384, 65.3, 24), (256, 29.0, 16), (128, 7.2, 8), (96, 4.1, 6)])
def test_vitb_macs_series(res, gmacs, grid):
    cfg = PRESETS["vit-b"].with_resolution(res)
    assert cfg.search_grid == grid
    assert abs(estimate_macs(cfg) / 1e9 - gmacs) <= 0.15 * gmacs


def test_macs_monotone():
    base = PRESETS["toy-student"]
    assert estimate_macs(base) < estimate_macs(base.with_resolution(96))
    assert estimate_macs(base) < estimate_macs(ModelConfig(embed_dim=128, num_heads=4))
    assert estimate_macs(base) < estimate_macs(ModelConfig(num_layers=5))


def test_frozen_params_receive_no_grad():
    teacher = TrackerParams.init(TINY, seed=8).freeze()
    student = TrackerParams.init(TINY, seed=9)
    t, s = images(TINY, batch=2)
    with ad.no_grad():
        f_h = forward_backbone(t, s, teacher)[1]
    loss = ad.mse(f_h, forward_backbone(t, s, student)[1])
    loss.backward()
    assert all(x.grad is None for _, x in teacher)
    assert all(x.grad is not None for name, x in student.trainable() if not name.startswith("head."))
