import numpy as np
import pytest

from topopack.attention import dense_oracle_attention, sparse_attention, topo_attention
from topopack.encoder import (EncoderConfig, encode_image, encoder_forward, encoder_graph, feature_summaries,
                              init_encoder_params, sequence_from_grid, toy_encode_region, _toy_map)
from topopack.grid import FeatureGrid, TokenSequence, assemble_sequence, build_layout
from topopack.numerics import grad_check
from topopack.topomask import build_descriptor, dense_mask, mask_entry


def two_loop_attention(q, k, v, layout, valid=None):
    """Independent reference: scalar loops over mask_entry."""
    n, d = q.shape
    out = np.zeros_like(v)
    for i in range(n):
        keys = [j for j in range(n) if mask_entry(layout, i, j, valid)]
        s = np.array([q[i] @ k[j] / np.sqrt(d) for j in keys])
        w = np.exp(s - s.max())
        w /= w.sum()
        for wj, j in zip(w, keys):
            out[i] += wj * v[j]
    return out


def test_single_token_returns_value_row():
    lay = build_layout(1, 1, 1)
    q, k, v = np.random.default_rng(0).standard_normal((3, lay.length, 4))
    out = dense_oracle_attention(q[:1], k[:1], v[:1], np.ones((1, 1), dtype=bool))
    np.testing.assert_array_equal(out, v[:1])
    np.testing.assert_array_equal(sparse_attention(q, k, v, build_descriptor(lay))[0], v[0])


def test_identical_values_pass_through(rng):
    lay = build_layout(3, 6, 3)
    vrow = rng.standard_normal(5)
    q, k = rng.standard_normal((2, lay.length, 5))
    v = np.tile(vrow, (lay.length, 1))
    np.testing.assert_allclose(sparse_attention(q, k, v, build_descriptor(lay)), v, atol=1e-14)
    np.testing.assert_allclose(dense_oracle_attention(q, k, v, dense_mask(lay)), v, atol=1e-14)


def test_dense_matches_two_loop(rng):
    lay = build_layout(3, 6, 3)
    q, k, v = rng.standard_normal((3, lay.length, 8))
    ref = two_loop_attention(q, k, v, lay)
    assert np.abs(dense_oracle_attention(q, k, v, dense_mask(lay)) - ref).max() < 1e-12
    assert np.abs(sparse_attention(q, k, v, build_descriptor(lay)) - ref).max() < 1e-12


def test_sparse_matches_oracle_with_padding_and_heads(rng):
    lay = build_layout(6, 9, 3)
    valid = rng.random((6, 9)) > 0.3
    desc = build_descriptor(lay, valid)
    q, k, v = rng.standard_normal((3, 2, lay.length, 4))
    ref = np.stack([two_loop_attention(q[h], k[h], v[h], lay, valid) for h in range(2)])
    assert np.abs(sparse_attention(q, k, v, desc) - ref).max() < 1e-12
    assert np.abs(dense_oracle_attention(q, k, v, desc) - ref).max() < 1e-12


def test_length_mismatch():
    desc = build_descriptor(build_layout(3, 3, 3))
    x = np.zeros((5, 2))
    with pytest.raises(ValueError):
        sparse_attention(x, x, x, desc)


def test_locality_under_foreign_pack_perturbation(rng):
    lay = build_layout(3, 6, 3)
    desc = build_descriptor(lay)
    q, k, v = rng.standard_normal((3, lay.length, 8))
    base = sparse_attention(q, k, v, desc)
    other = lay.patch_indices()[1]
    k2, v2 = k.copy(), v.copy()
    k2[other] += rng.standard_normal((9, 8))
    v2[other] += rng.standard_normal((9, 8))
    moved = sparse_attention(q, k2, v2, desc)
    own = lay.patch_indices()[0]
    np.testing.assert_array_equal(moved[own], base[own])


def test_zero_scores_are_uniform(rng):
    lay = build_layout(2, 2, 2)
    v = rng.standard_normal((lay.length, 3))
    z = np.zeros((lay.length, 3))
    out = sparse_attention(z, z, v, build_descriptor(lay))
    patches = lay.patch_indices()[0]
    expected = np.vstack([v[0], v[patches]]).mean(axis=0)
    for t in patches:
        np.testing.assert_allclose(out[t], expected, atol=1e-15)
    np.testing.assert_allclose(out[5], np.vstack([v[0], v[patches], v[5]]).mean(axis=0), atol=1e-15)


def test_score_counter_matches_allowed(rng):
    lay = build_layout(6, 12, 3)
    desc = build_descriptor(lay)
    q = rng.standard_normal((lay.length, 4))
    counter = {}
    sparse_attention(q, q, q, desc, counter=counter)
    assert counter["scores"] == desc.allowed_entries() == (lay.num_packs * 100 + lay.num_packs ** 2 + 1)


@pytest.mark.parametrize("seed", range(5))
def test_topo_attention_gradient(seed):
    rng = np.random.default_rng(seed)
    lay = build_layout(2, 4, 2)
    valid = np.array([[1, 1, 1, 0], [1, 1, 0, 0]], dtype=bool) if seed % 2 else None
    desc = build_descriptor(lay, valid)
    q, k, v = rng.standard_normal((3, 2, lay.length, 4))
    w = rng.standard_normal((2, lay.length, 4))
    err = grad_check(lambda t, q, k, v: t.sum(t.mul(topo_attention(t, q, k, v, desc), w)), [q, k, v])
    assert err < 1e-6


# -- encoder -----------------------------------------------------------------

def random_sequence(rng, h, w, k, d):
    return sequence_from_grid(FeatureGrid(rng.standard_normal((h, w, d))), k)


def test_zero_branches_is_identity(rng):
    seq = random_sequence(rng, 6, 6, 3, 8)
    cfg = EncoderConfig(dim=8, layers=2, heads=2, k=3, positional=False)
    out = encoder_forward(seq, cfg, init_encoder_params(cfg, zero_branches=True))
    np.testing.assert_array_equal(out.tokens, seq.embeddings)
    np.testing.assert_array_equal(out.summaries, seq.embeddings[seq.layout.summary_indices()])
    np.testing.assert_array_equal(out.global_token, seq.embeddings[0])


@pytest.mark.parametrize("seed, heads, positional, padded", [
    (0, 1, False, False), (1, 1, True, False), (2, 2, True, True), (3, 2, False, True), (4, 1, True, True),
])
def test_encoder_gradient(seed, heads, positional, padded):
    rng = np.random.default_rng(seed)
    valid = np.ones((2, 4), dtype=bool)
    if padded:
        valid[1, 3] = False
    lay = build_layout(2, 4, 2)
    desc = build_descriptor(lay, valid)
    cfg = EncoderConfig(dim=4, layers=1, heads=heads, k=2, seed=seed, positional=positional)
    params = init_encoder_params(cfg)
    names = list(params)
    x = rng.standard_normal((lay.length, 4))
    w = rng.standard_normal((lay.length, 4))

    def f(tape, *vals):
        return tape.sum(tape.mul(encoder_graph(tape, tape.const(x), dict(zip(names, vals)), cfg, desc), w))

    assert grad_check(f, list(params.values())) < 1e-6


def test_encoder_deterministic_and_finite_on_large_inputs(rng):
    seq = random_sequence(rng, 6, 6, 3, 8)
    big = TokenSequence(seq.layout, 1e3 * seq.embeddings, seq.roles, seq.valid)
    cfg = EncoderConfig(dim=8, seed=4)
    a = encoder_forward(big, cfg, init_encoder_params(cfg))
    b = encoder_forward(big, cfg, init_encoder_params(cfg))
    assert np.all(np.isfinite(a.tokens))
    np.testing.assert_array_equal(a.tokens, b.tokens)


def test_pack_relabeling_symmetry(rng):
    feats = rng.standard_normal((3, 6, 4))
    swapped = np.concatenate([feats[:, 3:], feats[:, :3]], axis=1)
    lay = build_layout(3, 6, 3)
    summ = rng.standard_normal((2, 4))
    g = rng.standard_normal(4)
    a = assemble_sequence(FeatureGrid(feats), lay, summ, g)
    b = assemble_sequence(FeatureGrid(swapped), lay, summ[::-1], g)
    cfg = EncoderConfig(dim=4, heads=2, k=3, positional=False)
    params = init_encoder_params(cfg)
    oa = encoder_forward(a, cfg, params).tokens
    ob = encoder_forward(b, cfg, params).tokens
    p0, p1 = lay.patch_indices()
    np.testing.assert_allclose(ob[p1], oa[p0], atol=1e-12)
    np.testing.assert_allclose(ob[p0], oa[p1], atol=1e-12)
    np.testing.assert_allclose(ob[lay.summary_indices()], oa[lay.summary_indices()][::-1], atol=1e-12)


def test_encoder_rejects_wrong_length(rng):
    seq = random_sequence(rng, 3, 3, 3, 4)
    cfg = EncoderConfig(dim=4, k=3)
    with pytest.raises(ValueError):
        encoder_forward(seq, cfg, init_encoder_params(cfg), build_descriptor(build_layout(3, 6, 3)))


# -- toy encoder -------------------------------------------------------------

def test_toy_encoder_linearity_on_constant():
    out = toy_encode_region(np.full((13, 7, 3), 2.5), 6, seed=3)
    np.testing.assert_allclose(out, 2.5 * _toy_map(6, 3, 3).sum(axis=1), atol=1e-12)


def test_toy_encoder_determinism_and_small_inputs(rng):
    region = rng.random((5, 3))
    np.testing.assert_array_equal(toy_encode_region(region, 4, 1), toy_encode_region(region, 4, 1))
    assert toy_encode_region(np.ones((1, 1)), 4).shape == (4,)
    with pytest.raises(ValueError):
        toy_encode_region(np.zeros((0, 3)), 4)


def test_feature_fallback_identical_patches():
    f = np.array([1.0, -2.0, 0.5])
    g = FeatureGrid(np.tile(f, (3, 6, 1)))
    summ, glob = feature_summaries(g, build_layout(3, 6, 3))
    np.testing.assert_allclose(summ, np.tile(f, (2, 1)))
    np.testing.assert_allclose(glob, f)


def test_encode_image_shapes(rng):
    img = rng.random((40, 50, 3))
    seq = encode_image(img, patch=8, k=3, dim=6)
    assert (seq.layout.height, seq.layout.width) == (6, 6)
    assert int(seq.token_valid.sum()) == 1 + 4 + 5 * 6
    np.testing.assert_allclose(seq.embeddings[seq.layout.cell_tokens()[0, 0]],
                               toy_encode_region(img[:8, :8], 6))
