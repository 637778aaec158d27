"""Smoke tests for the python surface of the C++ core."""

import math

import pytest

import tokenplan as tp


def test_wrap_angle():
    assert tp.wrap_angle(0.0) == 0.0
    assert tp.wrap_angle(3 * math.pi) == pytest.approx(math.pi)
    assert tp.wrap_angle(-3 * math.pi) == pytest.approx(math.pi)
    with pytest.raises(ValueError):
        tp.wrap_angle(float("nan"))


def test_codebook_sizes_match_published_table():
    assert tp.ka_fb_config("A").codebook_size() == 1144
    assert tp.ka_fb_config("B").codebook_size() == 3648
    assert tp.ka_fb_config("D").codebook_size() == 14592
    assert tp.xy_fb_config("A").codebook_size() == 45056
    assert tp.dct_xy_config("B", 10).codebook_size() == 720000


def test_pdms_formula():
    assert tp.pdms(1, 1, 1, 0.999, 0.875) == pytest.approx(0.94775, abs=5e-4)
    assert tp.pdms(0, 1, 1, 1, 1) == 0.0
    with pytest.raises(ValueError):
        tp.pdms(1.5, 1, 1, 1, 1)


def test_grid_quantize_roundtrip():
    g = tp.UniformGrid.make(-16.0, 16.0, 0.5)
    assert g.bins == 64
    for x in (-16.0, -3.21, 0.0, 7.77, 15.9):
        err = abs(g.dequantize(g.quantize(x)) - x)
        assert err <= 0.25 + 1e-12


def test_pack_unpack_token():
    assert tp.pack_token(2, 3, 26, 44) == 55
    assert tp.unpack_token(55, 26, 44) == (2, 3)


def test_ka_roundtrip():
    states = [tp.EgoState(3.0 * i, 0.0, 0.0) for i in range(8)]
    cfg = tp.ka_fb_config("B")
    tokens = tp.ka_tokenize(states, 0.5, cfg)
    assert len(tokens) == 6
    recon = tp.ka_detokenize(tokens, states[0], 6.0, 0.5, cfg)
    assert len(recon) == 7
    # straight constant-speed line reconstructs to within the grid floor
    assert abs(recon[4].y) < 0.5


def test_dct_is_exact_roundtrip():
    seq = [0.3, -1.2, 5.0, 2.2, -0.7]
    back = tp.dct_inverse(tp.dct_forward(seq))
    assert back == pytest.approx(seq, abs=1e-10)


def test_rewards():
    assert tp.reward_centerline(0.0, 1.5) == 1.0
    assert tp.reward_clearance(3.0, 3.0) == 1.0
    assert tp.reward_comfort(0.5, 0.25, 5.0, 1.0, 2.0, 0.1) == pytest.approx(-1.0)
    assert tp.reward_comfort(9.9, 9.9, 0.05, 1.0, 2.0, 0.1) == 0.0


def test_solvers():
    assert tp.solve_lateral([0.0] * 8, 0.5, 2.0) == pytest.approx([0.0] * 8)
    snap = tp.solve_lateral([0.2, -0.1, 0.3], 0.0, 0.0)
    assert snap == pytest.approx([0.2, -0.1, 0.3])
    iso = tp.isotonic_non_decreasing([0.0, 1.0, 0.5, 2.0])
    assert iso == pytest.approx([0.0, 0.75, 0.75, 2.0])


def test_scene_and_bev():
    scene = tp.build_scene(7, tp.Difficulty.straight)
    assert scene.n_obstacles == 0
    assert scene.route_length > 0
    grid = tp.rasterize_bev(scene, tp.EgoState(0.0, 0.0, 0.0), 0.0)
    assert grid.height == 64 and grid.width == 64
    d_ctr, d_clr = tp.scene_distances(scene, tp.EgoState(0.0, 0.0, 0.0))
    assert d_ctr < 0.1
    assert d_clr == 16.0


def test_tiny_model_forward_and_generate():
    cfg = tp.ModelConfig()
    cfg.d_model = 16
    cfg.n_layers = 1
    cfg.n_heads = 2
    cfg.n_experts = 2
    cfg.top_k = 1
    cfg.d_ff = 24
    cfg.vocab = tp.VocabLayout(2, 4, 6)
    cfg.history_frames = 1
    cfg.bev_tokens_per_frame = 2
    cfg.max_seq_len = 64
    model = tp.init_model(cfg, 3)
    assert model.n_params > 0

    frames = []
    for _ in range(2):
        ft = tp.FrameTokens()
        ft.bev_local = [0, 1]
        ft.traj_local = 2
        frames.append(ft)
    seq = tp.assemble_sequence(cfg.vocab, 0, frames)
    logits = tp.model_forward(model, seq)
    assert len(logits) == len(seq) * cfg.vocab.total()

    out = tp.model_generate(model, seq, 3)
    assert len(out) == 3
    for frame in out:
        assert all(0 <= b < 4 for b in frame.bev_local)
        assert 0 <= frame.traj_local < 6
    again = tp.model_generate(model, seq, 3)
    assert [f.traj_local for f in again] == [f.traj_local for f in out]
