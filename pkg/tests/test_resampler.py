import numpy as np
import pytest

from vcube.autodiff import Value, backward, grad_check, ops
from vcube.cubing import CubePartition
from vcube.errors import ShapeError
from vcube.resampler import (
    CubeTokens, Resampler, ResamplerConfig, cube_batch_layout, default_pe_split, encode_video, pe_3d,
    thumbnail, thumbnail_tokens, token_coords, unfold_cube,
)
from vcube.rng import Rng

GRID = (2, 2)


def small_cfg(**kw):
    kw.setdefault("n_out", 3)
    kw.setdefault("dim", 8)
    kw.setdefault("heads", 2)
    kw.setdefault("pe_split", (4, 2, 2))
    return ResamplerConfig(**kw)


# --- positional encoding ------------------------------------------------------------

def test_pe_origin():
    cfg = ResamplerConfig()
    pe = pe_3d(np.zeros((1, 3), dtype=int), cfg)[0]
    for start, width in ((0, 12), (12, 10), (22, 10)):
        half = width // 2
        assert not pe[start:start + half].any()
        assert np.all(pe[start + half:start + width] == 1.0)


def test_pe_time_only_touches_time_slice():
    cfg = ResamplerConfig()
    a = pe_3d(np.array([[1, 2, 3]]), cfg)[0]
    b = pe_3d(np.array([[4, 2, 3]]), cfg)[0]
    diff = np.flatnonzero(a != b)
    assert diff.size and diff.max() < 12


def test_pe_formula():
    cfg = small_cfg()
    got = pe_3d(np.array([[3, 1, 0]]), cfg)[0]
    f = 1.0 / 10000 ** (2 * np.arange(2) / 4)
    np.testing.assert_allclose(got[:4], np.concatenate([np.sin(3 * f), np.cos(3 * f)]), atol=1e-15)
    np.testing.assert_allclose(got[4:6], [np.sin(1.0), np.cos(1.0)], atol=1e-15)


def test_pe_2d_split():
    assert default_pe_split(32, "2d") == (0, 16, 16)
    cfg = ResamplerConfig(pe_split=(0, 16, 16))
    assert np.array_equal(pe_3d(np.array([[0, 1, 2]]), cfg), pe_3d(np.array([[7, 1, 2]]), cfg))


def test_pe_split_mismatch():
    with pytest.raises(ShapeError):
        ResamplerConfig(dim=32, pe_split=(10, 10, 10))
    with pytest.raises(ShapeError):
        ResamplerConfig(dim=32, pe_split=(11, 11, 10))


def test_heads_must_divide_dim():
    with pytest.raises(ValueError):
        ResamplerConfig(dim=30, heads=4, pe_split=(10, 10, 10))


def test_pe_rejects_negative():
    with pytest.raises(ValueError):
        pe_3d(np.array([[-1, 0, 0]]), ResamplerConfig())


# --- unfolding ----------------------------------------------------------------------

def test_unfold_frame_major_coords():
    frames = np.arange(3 * 4 * 2, dtype=float).reshape(3, 4, 2)
    cube = unfold_cube(frames, GRID)
    assert cube.tokens.shape == (12, 2)
    assert np.array_equal(cube.tokens[4], frames[1, 0])
    assert cube.coords.tolist()[:5] == [[0, 0, 0], [0, 1, 0], [0, 0, 1], [0, 1, 1], [1, 0, 0]]


def test_token_coords_length():
    assert token_coords(5, (4, 4)).shape == (80, 3)


# --- resample -----------------------------------------------------------------------

def test_single_key_output_is_affine_of_token():
    r = Resampler(small_cfg(), Rng(0))
    tok = np.random.default_rng(0).normal(size=(1, 8))
    coords = np.zeros((1, 3), dtype=int)
    attn = r.attention_weights(tok[None], pe_3d(coords, r.cfg)[None])
    assert np.allclose(attn, 1.0)


@pytest.mark.parametrize("n_frames", [1, 2, 11])
def test_output_shape_independent_of_length(n_frames):
    r = Resampler(small_cfg(), Rng(0))
    frames = np.random.default_rng(n_frames).normal(size=(n_frames, 4, 8))
    assert r.resample(unfold_cube(frames, GRID)).shape == (3, 8)


def test_attention_rows_sum_to_one():
    r = Resampler(small_cfg(), Rng(1))
    keys = np.random.default_rng(0).normal(size=(2, 12, 8))
    pe = pe_3d(np.stack([token_coords(3, GRID)] * 2), r.cfg)
    w = np.random.default_rng(1).uniform(0.1, 1, size=(2, 12))
    for kw in (None, w):
        a = r.attention_weights(keys, pe, kw)
        assert np.abs(a.sum(-1) - 1).max() < 1e-10


def test_empty_cube_rejected():
    r = Resampler(small_cfg(), Rng(0))
    with pytest.raises(ShapeError):
        r.resample(CubeTokens(np.zeros((0, 8)), np.zeros((0, 3), dtype=int)))


def test_resampler_gradient():
    r = Resampler(small_cfg(), Rng(2))
    rng = np.random.default_rng(3)
    keys = Value(rng.normal(size=(2, 8, 8)), requires_grad=True)
    weights = Value(rng.uniform(0.2, 1.0, size=(2, 8)), requires_grad=True)
    pe = pe_3d(np.stack([token_coords(2, GRID)] * 2), r.cfg)
    w = rng.normal(size=(2, 3, 8))
    err = grad_check(lambda: ops.sum(ops.mul(r(keys, pe, weights), w)), [keys, weights] + r.parameters())
    assert err < 1e-6


def test_temporal_pe_makes_order_matter():
    r = Resampler(small_cfg(), Rng(3))
    frames = np.random.default_rng(4).normal(size=(3, 4, 8))
    a = r.resample(unfold_cube(frames, GRID)).data
    b = r.resample(unfold_cube(frames[::-1], GRID)).data
    assert np.abs(a - b).max() > 1e-6


def test_2d_pe_frame_order_invariant_for_identical_frames():
    # identical frame contents: reordering frames is invisible when d_t = 0
    r = Resampler(small_cfg(pe_split=(0, 4, 4)), Rng(3))
    frame = np.random.default_rng(5).normal(size=(1, 4, 8))
    frames = np.concatenate([frame, frame, frame])
    perm = frames[[2, 0, 1]]
    np.testing.assert_array_equal(r.resample(unfold_cube(frames, GRID)).data, r.resample(unfold_cube(perm, GRID)).data)


def test_zero_weight_keys_are_ignored():
    r = Resampler(small_cfg(), Rng(4))
    rng = np.random.default_rng(6)
    keys = rng.normal(size=(1, 8, 8))
    pe = pe_3d(token_coords(2, GRID)[None], r.cfg)
    w = np.concatenate([np.ones(4), np.zeros(4)])[None]
    a = r(Value(keys), pe, Value(w)).data
    junk = keys.copy()
    junk[0, 4:] = 1e3
    b = r(Value(junk), pe, Value(w)).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    c = r(Value(keys[:, :4]), pe[:, :4]).data
    np.testing.assert_allclose(a, c, atol=1e-12)


# --- thumbnail ----------------------------------------------------------------------

def test_thumbnail_all_selected_is_mean():
    f = np.random.default_rng(0).normal(size=(5, 4, 8))
    np.testing.assert_allclose(thumbnail_tokens(Value(f), np.ones(5)).data, f.mean(0), atol=1e-14)


def test_thumbnail_single_keyframe_is_that_frame():
    f = np.random.default_rng(1).normal(size=(5, 4, 8))
    g = np.zeros(5)
    g[0] = 1
    assert np.array_equal(thumbnail_tokens(Value(f), g).data, f[0])


def test_thumbnail_bruteforce_gated_average():
    rng = np.random.default_rng(2)
    f, g = rng.normal(size=(7, 4, 8)), (rng.uniform(size=7) > 0.5).astype(float)
    g[0] = 1
    ref = sum(g[i] * f[i] for i in range(7)) / g.sum()
    assert np.abs(thumbnail_tokens(Value(f), g).data - ref).max() < 1e-12
    ref_all = sum(g[i] * f[i] for i in range(7)) / 7
    assert np.abs(thumbnail_tokens(Value(f), g, "all").data - ref_all).max() < 1e-12


def test_thumbnail_all_zero_gate():
    with pytest.raises(ValueError):
        thumbnail_tokens(Value(np.ones((3, 2, 2))), np.zeros(3))


def test_thumbnail_resampled_shape():
    r = Resampler(small_cfg(), Rng(0))
    f = np.random.default_rng(3).normal(size=(6, 4, 8))
    assert thumbnail(Value(f), np.eye(6)[0], r, GRID).shape == (3, 8)


# --- encode-video -------------------------------------------------------------------

def test_encode_video_shape_single_cube():
    cfg = ResamplerConfig(n_out=8, dim=32)
    r = Resampler(cfg, Rng(0))
    f = np.random.default_rng(0).normal(size=(5, 16, 32))
    out = encode_video(Value(f), CubePartition((0,), 5), np.eye(5)[0], r, (4, 4))
    assert out.shape == (16, 32)


def test_encode_video_matches_per_cube_resampling():
    r = Resampler(small_cfg(), Rng(5))
    f = np.random.default_rng(4).normal(size=(9, 4, 8))
    part = CubePartition((0, 2, 6), 9)
    gate = part.flags().astype(float)
    out = encode_video(Value(f), part, gate, r, GRID).data
    blocks = [thumbnail(Value(f), gate, r, GRID).data]
    blocks += [r.resample(unfold_cube(f[a:b], GRID)).data for a, b in part.spans]
    np.testing.assert_allclose(out, np.concatenate(blocks), atol=1e-12)


def test_membership_path_leaves_forward_unchanged():
    r = Resampler(small_cfg(), Rng(6))
    f = np.random.default_rng(5).normal(size=(8, 4, 8))
    part = CubePartition((0, 3, 5), 8)
    logits = Value(np.random.default_rng(6).normal(size=8), requires_grad=True)
    gate = ops.straight_through(part.flags().astype(float), ops.tanh(logits))
    a = encode_video(Value(f), part, gate, r, GRID, membership=True).data
    b = encode_video(Value(f), part, gate, r, GRID, membership=False).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_layout_membership_weights():
    lay = cube_batch_layout(CubePartition((0, 3), 6), 1, (1, 1), membership=True)
    # row 1: frames 0,1,2 plus the next keyframe 3
    assert lay.frame_index[1, :4].tolist() == [0, 1, 2, 3]
    assert lay.weight_base[1, :4].tolist() == [1, 1, 1, 1]
    assert lay.weight_sign[1, :4].tolist() == [0, -1, -1, -1]
    # last cube has no successor
    assert lay.weight_base[2].tolist() == [1, 1, 1, 0]


def test_detached_cubes_gate_grad_via_thumbnail_only():
    r = Resampler(small_cfg(), Rng(7))
    f = Value(np.random.default_rng(7).normal(size=(8, 4, 8)), requires_grad=True)
    part = CubePartition((0, 4), 8)
    logits = Value(np.random.default_rng(8).normal(size=8), requires_grad=True)
    gate = ops.straight_through(part.flags().astype(float), ops.tanh(logits))
    out = encode_video(f, part, gate, r, GRID, detach_cubes=True)
    backward(ops.sum(ops.mul(ops.getitem(out, slice(3, None)), np.random.default_rng(0).normal(size=(6, 8)))))
    # cube rows neither see the frames nor the gates
    assert not np.any(logits.grad) and not np.any(f.grad)
