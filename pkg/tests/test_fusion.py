import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from satfuse.config import ModelConfig
from satfuse.errors import CheckpointError, DimensionError
from satfuse.fusion import bev, feature
from satfuse.fusion.feature import AttentionMask, AttentionSettings, PatchConfig
from satfuse.fusion.model import FusionModel, bench_config
from satfuse.fusion.params import ParamStore
from satfuse.tensor import Tensor, no_grad, ops
from satfuse.tensor.gradcheck import check_gradients

TINY = PatchConfig(H=4, W=6, C=2, patch=(2, 2), c_h=4, extent=(4.0, 6.0))


def _feat_params(cfg=TINY, att=AttentionSettings(), seed=0, dtype=np.float64):
    store = ParamStore()
    feature.init_feature_params(store, np.random.default_rng(seed), cfg, att, dtype=dtype)
    return store, store.sub("feat")


def _ffn(ch, rng, zero=False):
    f = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(0, 0.3, size=s))
    return {"ffn1.w": Tensor(f(ch, 2 * ch)), "ffn1.b": Tensor(f(2 * ch)),
            "ffn2.w": Tensor(f(2 * ch, ch)), "ffn2.b": Tensor(f(ch))}


def _ffn_apply(x, p):
    h = np.logaddexp(0.0, x @ p["ffn1.w"].data + p["ffn1.b"].data)
    return h @ p["ffn2.w"].data + p["ffn2.b"].data


# ----------------------------------------------------------------- patching


def test_full_scale_token_count():
    cfg = PatchConfig()
    f = Tensor(np.zeros((100, 200, 64)))
    assert feature.patchify(f, cfg).shape == (800, 1600)
    assert cfg.grid == (20, 40) and cfg.pitch == (1.5, 1.5)


def test_one_hot_pixel_lands_in_its_patch_token():
    cfg = PatchConfig(C=1)
    f = np.zeros((100, 200, 1))
    f[7, 12, 0] = 1.0
    tok = feature.patchify(Tensor(f), cfg).data
    rows = np.flatnonzero(tok.any(axis=1))
    assert rows.tolist() == [42]
    # (row 2, col 2) inside the 5x5 patch
    assert tok[42].argmax() == 2 * 5 + 2


def test_unpatchify_inverts_patchify():
    f = np.random.default_rng(0).normal(size=(4, 6, 2))
    back = feature.unpatchify(feature.patchify(Tensor(f), TINY), TINY).data
    np.testing.assert_array_equal(back, f)


def test_patch_embed_rejects_indivisible_patch():
    with pytest.raises(DimensionError):
        PatchConfig(H=7, W=6, C=1, patch=(2, 2))


def test_patch_embed_adds_position_embedding_per_patch():
    rng = np.random.default_rng(1)
    pe = rng.normal(size=(2, 3, 2))
    w = np.eye(8)
    out = feature.patch_embed(Tensor(np.zeros((4, 6, 2))), Tensor(pe), Tensor(w), None, TINY).data
    np.testing.assert_allclose(out, np.tile(pe.reshape(6, 2), (1, 4)))


# -------------------------------------------------------------------- masks


def _brute_counts(grid, pitch, d):
    gh, gw = grid
    ctr = [((r + 0.5) * pitch[0], (c + 0.5) * pitch[1]) for r in range(gh) for c in range(gw)]
    return np.array([sum(math.dist(a, b) <= d for b in ctr) for a in ctr])


def test_distance_mask_counts_match_enumeration():
    cfg = PatchConfig()
    m = feature.distance_mask(cfg, 5.0)
    counts = np.isfinite(m).sum(axis=1)
    np.testing.assert_array_equal(counts, _brute_counts(cfg.grid, cfg.pitch, 5.0))
    assert counts.max() == 37


def test_distance_mask_extremes():
    cfg = PatchConfig()
    assert np.isfinite(feature.distance_mask(cfg, math.inf)).all()
    np.testing.assert_array_equal(np.isfinite(feature.distance_mask(cfg, 0.0)), np.eye(800, dtype=bool))
    with pytest.raises(ValueError):
        feature.distance_mask(cfg, -1.0)


def test_distance_mask_is_symmetric_and_cached_copy():
    a = feature.distance_mask(TINY, 2.5)
    np.testing.assert_array_equal(a, a.T)
    a[0, 0] = 123.0
    assert feature.distance_mask(TINY, 2.5)[0, 0] == 0.0


def test_distance_neighbours_match_dense_mask():
    cfg = PatchConfig()
    idx, pad = feature.distance_neighbours(cfg, 5.0)
    dense = np.isfinite(feature.distance_mask(cfg, 5.0))
    for i in (0, 17, 399, 799):
        assert sorted(idx[i][~pad[i]].tolist()) == np.flatnonzero(dense[i]).tolist()


@pytest.mark.parametrize("value,expect", [(1.0, 0.0), (0.0, -np.inf)])
def test_seg_mask_uniform(value, expect):
    seg = Tensor(np.full((4, 6), value))
    m = feature.mask_from_probability(seg, TINY)
    assert (m == expect).all()


def test_seg_mask_threshold_and_patch_mean():
    p = np.zeros((4, 6))
    p[:2, :2] = 0.5  # mean exactly tau -> kept
    p[:2, 2:4] = [[1, 1], [0, 0.9]]  # mean 0.725
    p[2:, :2] = [[1, 0], [0, 0.9]]  # mean 0.475
    m = feature.mask_from_probability(Tensor(p), TINY)
    np.testing.assert_array_equal(np.isfinite(m), [True, True, False, False, False, False])


def test_soft_mask_is_log_probability():
    p = np.full((4, 6), 0.25)
    m = feature.mask_from_probability(Tensor(p), TINY, mode="soft")
    np.testing.assert_allclose(m.data, math.log(0.25))


def test_compose_mask_adds_key_vector_to_every_row():
    m_dis = np.zeros((3, 4))
    m_dis[0, 3] = -np.inf
    seg = np.array([0.0, -np.inf, 0.0, 0.0])
    m = feature.compose_mask(seg, m_dis)
    expect = np.array([[0, -np.inf, 0, -np.inf], [0, -np.inf, 0, 0], [0, -np.inf, 0, 0]])
    np.testing.assert_array_equal(m.values.data, expect)
    np.testing.assert_array_equal(m.fully_masked_columns(), [False, True, False, False])
    with pytest.raises(DimensionError):
        feature.compose_mask(np.zeros(3), m_dis)


# -------------------------------------------------------------- attention block


def test_block_fully_masked_gives_ffn_of_query():
    rng = np.random.default_rng(2)
    q, k, v = (Tensor(rng.normal(size=(3, 4))) for _ in range(3))
    p = _ffn(4, rng)
    mask = AttentionMask(Tensor(np.full((3, 3), -np.inf)))
    out = feature.masked_cross_attention_block(q, k, v, mask, p).data
    np.testing.assert_allclose(out, _ffn_apply(q.data, p) + q.data, atol=1e-12)


def test_block_single_visible_key_copies_its_value():
    rng = np.random.default_rng(3)
    q, k, v = (Tensor(rng.normal(size=(3, 4))) for _ in range(3))
    m = np.full((3, 3), -np.inf)
    m[:, 1] = 0.0
    p = _ffn(4, rng, zero=True)
    out = feature.masked_cross_attention_block(q, k, v, AttentionMask(Tensor(m)), p).data
    np.testing.assert_allclose(out, v.data[1] + q.data, atol=1e-12)


def test_block_matches_reference_computation():
    rng = np.random.default_rng(4)
    q, k, v = (rng.normal(size=(6, 8)) for _ in range(3))
    m = np.where(rng.random((6, 6)) < 0.3, -np.inf, 0.0)
    m[:, 0] = 0.0
    p = _ffn(8, rng)
    s = q @ k.T / math.sqrt(8) + m
    a = np.exp(s - s.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    x = a @ v + q
    expect = _ffn_apply(x, p) + x
    got = feature.masked_cross_attention_block(Tensor(q), Tensor(k), Tensor(v), AttentionMask(Tensor(m)), p).data
    np.testing.assert_allclose(got, expect, rtol=1e-12, atol=1e-12)


def test_block_invariant_to_key_permutation():
    rng = np.random.default_rng(5)
    q, k, v = (rng.normal(size=(5, 4)) for _ in range(3))
    m = np.where(rng.random((5, 5)) < 0.3, -np.inf, 0.0)
    perm = rng.permutation(5)
    p = _ffn(4, rng)
    a = feature.masked_cross_attention_block(Tensor(q), Tensor(k), Tensor(v), AttentionMask(Tensor(m)), p).data
    b = feature.masked_cross_attention_block(
        Tensor(q), Tensor(k[perm]), Tensor(v[perm]), AttentionMask(Tensor(m[:, perm])), p
    ).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_block_shape_errors():
    p = _ffn(4, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        feature.masked_cross_attention_block(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))),
                                             Tensor(np.zeros((3, 4))), None, p)
    with pytest.raises(DimensionError):
        feature.masked_cross_attention_block(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))),
                                             Tensor(np.zeros((3, 4))), None, p, heads=3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_attention_rows_are_convex(seed):
    rng = np.random.default_rng(seed)
    q, k = Tensor(rng.normal(size=(6, 4))), Tensor(rng.normal(size=(7, 4)))
    m = np.where(rng.random((6, 7)) < 0.5, -np.inf, 0.0)
    m[0] = -np.inf
    w = feature.attention_weights(q, k, AttentionMask(Tensor(m))).data
    assert (w >= 0).all()
    assert (w[np.isneginf(m)] == 0).all()
    live = ~np.isneginf(m).all(axis=1)
    np.testing.assert_allclose(w[live].sum(axis=1), 1.0, atol=1e-6)
    assert (w[~live] == 0).all()


@pytest.mark.parametrize("dtype,tol", [(np.float64, 1e-12), (np.float32, 1e-5)])
def test_local_attention_matches_dense(dtype, tol):
    rng = np.random.default_rng(6)
    n, c = 12, 4
    dense = np.where(rng.random((n, n)) < 0.4, -np.inf, 0.0).astype(dtype)
    width = int(np.isfinite(dense).sum(axis=1).max())
    idx = np.zeros((n, width), dtype=np.int64)
    bias = np.full((n, width), -np.inf, dtype=dtype)
    for i in range(n):
        js = np.flatnonzero(np.isfinite(dense[i]))
        idx[i, : len(js)] = js
        bias[i, : len(js)] = 0.0
    data = [rng.normal(size=(n, c)).astype(dtype) for _ in range(3)]
    g = rng.normal(size=(n, c)).astype(dtype)

    def run(local):
        q, k, v = (Tensor(d.copy(), requires_grad=True) for d in data)
        if local:
            out = ops.local_attention(q, k, v, idx, bias, 0.5)
        else:
            s = ops.add(ops.scale(ops.matmul(q, ops.transpose(k, (1, 0))), 0.5), dense)
            out = ops.matmul(ops.softmax_lastdim(s), v)
        ops.sum_(ops.mul(out, g)).backward()
        return out.data, q.grad, k.grad, v.grad

    for a, b in zip(run(True), run(False)):
        np.testing.assert_allclose(a, b, atol=tol, rtol=tol)


def test_local_attention_gradient_vs_finite_differences():
    rng = np.random.default_rng(7)
    q, k, v = (Tensor(rng.normal(size=(5, 3)), requires_grad=True) for _ in range(3))
    idx = np.array([[0, 1, 2], [1, 2, 0], [2, 3, 0], [3, 4, 0], [4, 0, 0]])
    bias = np.array([[0, 0, 0], [0, 0, -np.inf], [0, 0, 0], [0, 0, -np.inf], [0, -np.inf, -np.inf]], dtype=float)
    g = rng.normal(size=(5, 3))
    err = check_gradients(lambda: ops.sum_(ops.mul(ops.local_attention(q, k, v, idx, bias, 0.7), g)), [q, k, v])
    assert err < 1e-6


# -------------------------------------------------------------- full feature fuse


def _fuse(f_bev, f_sat, p, att=AttentionSettings(d_meters=2.5), mask=None):
    return feature.feature_level_fuse(Tensor(f_bev), Tensor(f_sat), p, TINY, att, mask=mask)[0].data


def test_fuse_shapes_and_determinism():
    rng = np.random.default_rng(8)
    f_bev, f_sat = rng.normal(size=(2, 4, 6, 2))
    _, p = _feat_params()
    a, b = _fuse(f_bev, f_sat, p), _fuse(f_bev, f_sat, p)
    assert a.shape == (4, 6, 2)
    np.testing.assert_array_equal(a, b)


def test_fuse_ignores_satellite_content_at_masked_tokens():
    rng = np.random.default_rng(9)
    f_bev, f_sat = rng.normal(size=(2, 4, 6, 2))
    _, p = _feat_params()
    seg = np.array([0.0, -np.inf, 0.0, 0.0, -np.inf, 0.0])
    mask = feature.compose_mask(seg, feature.distance_mask(TINY, 2.5, dtype=np.float64))
    base = _fuse(f_bev, f_sat, p, mask=mask)
    f2 = f_sat.copy()
    f2[0:2, 2:4] += rng.normal(size=(2, 2, 2))  # token 1
    f2[2:4, 2:4] += rng.normal(size=(2, 2, 2))  # token 4
    np.testing.assert_array_equal(_fuse(f_bev, f2, p, mask=mask), base)
    f2[0:2, 0:2] += 1.0  # token 0 is visible
    assert not np.array_equal(_fuse(f_bev, f2, p, mask=mask), base)


def test_identity_init_passes_bev_through_when_all_masked():
    cfg = bench_config()
    m = FusionModel(cfg, seed=3, dtype=np.float64)
    p = m.params.sub("feat")
    p["pe_bev"] = Tensor(np.zeros_like(p["pe_bev"].data))
    rng = np.random.default_rng(4)
    f_bev, f_sat = rng.normal(size=(2, cfg.H, cfg.W, cfg.C))
    n = m.patch_cfg.n_tokens
    mask = AttentionMask(Tensor(np.full((n, n), -np.inf)))
    f_ref = feature.feature_level_fuse(Tensor(f_bev), Tensor(f_sat), p, m.patch_cfg, m.att, mask=mask)[0].data
    np.testing.assert_allclose(f_ref, f_bev, atol=1e-12)


def test_sparse_and_dense_fuse_agree():
    rng = np.random.default_rng(10)
    cfg = PatchConfig(H=12, W=16, C=2, patch=(2, 2), c_h=4, extent=(9.0, 12.0))
    att = AttentionSettings(d_meters=3.0)
    _, p = _feat_params(cfg, att)
    f_bev, f_sat = (Tensor(x) for x in rng.normal(size=(2, 12, 16, 2)))
    mask, _, _ = feature.build_mask(f_sat, p, cfg, att)
    assert mask.neighbours is not None
    sparse = feature.feature_level_fuse(f_bev, f_sat, p, cfg, att)[0].data
    dense_mask = AttentionMask(mask.values)
    dense = feature.feature_level_fuse(f_bev, f_sat, p, cfg, att, mask=dense_mask)[0].data
    np.testing.assert_allclose(sparse, dense, atol=1e-12)


def test_feature_fuse_gradient():
    rng = np.random.default_rng(11)
    att = AttentionSettings(d_meters=2.5, blocks=2)
    _, p = _feat_params(att=att)
    f_bev = Tensor(rng.normal(size=(4, 6, 2)), requires_grad=True)
    f_sat = Tensor(rng.normal(size=(4, 6, 2)))
    g = rng.normal(size=(4, 6, 2))
    mask = feature.compose_mask(np.zeros(6), feature.distance_mask(TINY, 2.5, dtype=np.float64))
    fn = lambda: ops.sum_(ops.mul(feature.feature_level_fuse(f_bev, f_sat, p, TINY, att, mask=mask)[0], g))  # noqa: E731
    assert check_gradients(fn, [f_bev, p["block0.q.w"], p["embed_sat.w"], p["block1.ffn1.w"]]) < 1e-5


# -------------------------------------------------------------------- warp


def test_warp_identity_bitwise():
    rng = np.random.default_rng(12)
    for dt in (np.float64, np.float32):
        f = rng.normal(size=(5, 7, 3)).astype(dt)
        out = ops.warp(Tensor(f), Tensor(np.zeros((5, 7, 2), dtype=dt))).data
        np.testing.assert_array_equal(out, f)


def test_warp_of_ramp_shifts_values():
    H, W = 6, 8
    ramp = np.broadcast_to(np.arange(W, dtype=float)[None, :, None], (H, W, 1)).copy()
    delta = np.zeros((H, W, 2))
    delta[..., 1] = 0.25
    out = ops.warp(Tensor(ramp), Tensor(delta)).data
    np.testing.assert_allclose(out[:, :-1, 0], ramp[:, :-1, 0] + 0.25)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), h=st.integers(1, 6), w=st.integers(1, 6))
def test_warp_matches_double_sum(seed, h, w):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(h, w, 2))
    d = rng.uniform(-2, 2, size=(h, w, 2))
    np.testing.assert_allclose(ops.warp(Tensor(f), Tensor(d)).data, bev.warp_double_sum(f, d), atol=1e-12)


def test_warp_outside_grid_is_zero():
    f = np.ones((3, 3, 1))
    d = np.full((3, 3, 2), 5.0)
    assert (ops.warp(Tensor(f), Tensor(d)).data == 0).all()


# ------------------------------------------------------------ BEV-level fuse


def _bev_params(c=2, hidden=4, seed=0):
    store = ParamStore()
    bev.init_bev_params(store, np.random.default_rng(seed), c, hidden, dtype=np.float64)
    return store.sub("bev")


def test_fresh_offsets_are_zero_so_fuse_doubles_satellite():
    rng = np.random.default_rng(13)
    f_ref, f_sat = rng.normal(size=(2, 4, 5, 2))
    fused, delta = bev.bev_level_fuse(Tensor(f_ref), Tensor(f_sat), _bev_params(), return_offsets=True)
    assert (delta.data == 0).all()
    np.testing.assert_array_equal(fused.data[..., :2], 2 * f_sat)
    np.testing.assert_array_equal(fused.data[..., 2:], f_ref)


def test_zero_satellite_gives_zero_then_reference():
    f_ref = np.random.default_rng(14).normal(size=(4, 5, 2))
    fused = bev.bev_level_fuse(Tensor(f_ref), Tensor(np.zeros((4, 5, 2))), _bev_params()).data
    np.testing.assert_array_equal(fused, np.concatenate([np.zeros((4, 5, 2)), f_ref], axis=2))


def test_bev_fuse_shape_mismatch():
    with pytest.raises(DimensionError):
        bev.bev_level_fuse(Tensor(np.zeros((4, 5, 2))), Tensor(np.zeros((4, 4, 2))), _bev_params())


def test_predict_offsets_gradient():
    rng = np.random.default_rng(15)
    p = _bev_params()
    p["off3.w"].data = rng.normal(0, 0.3, size=p["off3.w"].shape)
    f_ref, f_sat = (Tensor(x) for x in rng.normal(size=(2, 4, 5, 2)))
    g = rng.normal(size=(4, 5, 2))
    fn = lambda: ops.sum_(ops.mul(bev.predict_offsets(f_ref, f_sat, p), g))  # noqa: E731
    assert check_gradients(fn, [p["off1.w"], p["off3.w"], p["off3.b"]]) < 1e-6


# -------------------------------------------------------------------- head


def _head(c_in=3, hidden=4, seed=0):
    store = ParamStore()
    bev.init_head_params(store, np.random.default_rng(seed), c_in, hidden, dtype=np.float64)
    return store, store.sub("head")


def test_zero_head_gives_uniform_probabilities():
    store, p = _head()
    for t in store.values():
        t.data = np.zeros_like(t.data)
    logits = bev.task_head_segmentation(Tensor(np.random.default_rng(0).normal(size=(4, 5, 3))), p)
    probs = ops.softmax_lastdim(ops.transpose(logits, (1, 2, 0))).data
    np.testing.assert_allclose(probs, 0.25)


def test_head_overfits_a_single_map():
    from satfuse.train import Adam

    rng = np.random.default_rng(16)
    store, p = _head(hidden=8)
    x = Tensor(rng.normal(size=(4, 5, 3)))
    target = rng.integers(0, 4, size=(4, 5))
    opt = Adam(store, lr=0.05)
    for _ in range(300):
        store.zero_grad()
        loss = ops.cross_entropy(bev.task_head_segmentation(x, p), target)
        loss.backward()
        opt.step()
    assert float(loss.data) < 0.01


def test_head_gradient():
    rng = np.random.default_rng(17)
    store, p = _head()
    x = Tensor(rng.normal(size=(4, 5, 3)), requires_grad=True)
    target = rng.integers(0, 4, size=(4, 5))
    fn = lambda: ops.cross_entropy(bev.task_head_segmentation(x, p), target)  # noqa: E731
    assert check_gradients(fn, [x, p["c1.w"], p["c3.b"]]) < 1e-5


# -------------------------------------------------------------------- model


def _tiny_model_cfg(**kw):
    base = dict(H=8, W=12, C=4, patch=2, c_h=8, offset_hidden=4, head_hidden=4, enc_hidden=4,
                extent_lat=6.0, extent_lon=9.0, d_meters=3.0)
    base.update(kw)
    return ModelConfig.from_mapping(base)


@pytest.mark.parametrize("fusion", ["none", "concat", "attention", "masked_attention_d", "masked_attention"])
def test_model_forward_all_modes(fusion):
    cfg = _tiny_model_cfg(fusion=fusion)
    m = FusionModel(cfg, seed=0)
    rng = np.random.default_rng(0)
    out = m.forward(rng.normal(size=(8, 12, 4)), rng.random((3, 8, 12)))
    assert out.logits.shape == (4, 8, 12)
    assert (out.seg_logits is not None) == m.uses_attention
    assert m.predict(rng.normal(size=(8, 12, 4)), rng.random((3, 8, 12))).shape == (8, 12)


def test_model_rejects_wrong_shapes():
    m = FusionModel(_tiny_model_cfg())
    with pytest.raises(DimensionError):
        m.forward(np.zeros((8, 12, 3)), np.zeros((3, 8, 12)))
    with pytest.raises(DimensionError):
        m.forward(np.zeros((8, 12, 4)), np.zeros((3, 8, 10)))


def test_checkpoint_roundtrip(tmp_path):
    cfg = _tiny_model_cfg()
    m = FusionModel(cfg, seed=3)
    m.save(tmp_path / "ck")
    m2 = FusionModel.load(tmp_path / "ck")
    assert m2.cfg == cfg
    assert m2.params.digest() == m.params.digest()
    rng = np.random.default_rng(1)
    f, s = rng.normal(size=(8, 12, 4)), rng.random((3, 8, 12))
    np.testing.assert_array_equal(m.forward(f, s).logits.data, m2.forward(f, s).logits.data)


def test_checkpoint_config_mismatch(tmp_path):
    FusionModel(_tiny_model_cfg()).save(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        FusionModel.load(tmp_path / "ck", _tiny_model_cfg(c_h=16))


def test_bench_config_keeps_full_scale_token_geometry():
    from satfuse.fusion.model import patch_config

    pc = patch_config(bench_config())
    assert pc.grid == (20, 40) and pc.pitch == (1.5, 1.5)


def test_no_grad_forward_builds_no_tape():
    m = FusionModel(_tiny_model_cfg())
    with no_grad():
        out = m.forward(np.zeros((8, 12, 4)), np.zeros((3, 8, 12)))
    assert not out.logits.requires_grad
