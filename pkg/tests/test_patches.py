import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attswin.network import ModelConfig, build
from attswin.patches import (
    FinalExpandHead,
    PatchEmbed,
    PatchExpand,
    PatchMerge,
    expand_rearrange,
    merge_gather,
)
from attswin.tensor import ShapeError, Tensor, no_grad

RNG = np.random.default_rng


def embed64(patch, ch, dim, seed=0):
    return PatchEmbed(patch, ch, dim, RNG(seed)).astype(np.float64)


def test_embed_224_gives_3136_tokens():
    emb = PatchEmbed(4, 3, 8, RNG(0))
    with no_grad():
        out = emb(Tensor(np.zeros((1, 224, 224, 3), dtype=np.float32)))
    assert out.shape == (1, 56 * 56, 8) == (1, 3136, 8)


def test_embed_constant_image_zero_weights():
    emb = embed64(4, 3, 5)
    emb.proj.weight.data[:] = 0.0
    emb.proj.bias.data[:] = RNG(1).standard_normal(5)
    # LayerNorm sees identical tokens, so every token is the same vector
    out = emb(Tensor(np.full((1, 8, 8, 3), 0.3))).data[0]
    np.testing.assert_array_equal(out, np.broadcast_to(out[0], out.shape))
    no_norm = emb.proj(Tensor(np.zeros((1, 4, 48)))).data[0]
    np.testing.assert_array_equal(no_norm, np.broadcast_to(emb.proj.bias.data, (4, 5)))


def test_embed_matches_hand_unrolled_flatten():
    emb = embed64(4, 2, 3, seed=2)
    img = RNG(3).standard_normal((1, 8, 8, 2))
    out = emb.proj(Tensor(img).reshape(1, 2, 4, 2, 4, 2).transpose(0, 1, 3, 2, 4, 5).reshape(1, 4, 32))
    rows = []
    for pr in range(2):
        for pc in range(2):
            flat = [img[0, pr * 4 + i, pc * 4 + j, ch] for i in range(4) for j in range(4) for ch in range(2)]
            rows.append(np.array(flat) @ emb.proj.weight.data + emb.proj.bias.data)
    np.testing.assert_allclose(out.data[0], np.array(rows), atol=1e-12)
    full = emb(Tensor(img)).data[0]
    x = np.array(rows)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(full, ref * emb.norm.weight.data + emb.norm.bias.data, atol=1e-10)


def test_embed_rejects_indivisible_size():
    with pytest.raises(ShapeError):
        embed64(4, 3, 8)(Tensor(np.zeros((1, 10, 12, 3))))


def test_embed_projection_is_linear():
    emb = embed64(2, 3, 6, seed=4)
    emb.proj.bias.data[:] = 0.0
    img = RNG(5).standard_normal((2, 8, 8, 3))
    x = img.reshape(2, 4, 2, 4, 2, 3).transpose(0, 1, 3, 2, 4, 5).reshape(2, 16, 12)
    a = 2.5
    lhs = emb.proj(Tensor(a * x)).data
    rhs = a * emb.proj(Tensor(x)).data
    assert np.abs(lhs - rhs).max() <= 1e-6


# -- merge ---------------------------------------------------------------------


def test_merge_gather_order_2x2():
    # token grid [[1, 3], [2, 4]]: the declared order visits (0,0), (1,0), (0,1), (1,1)
    z = Tensor(np.array([[[1.0], [3.0], [2.0], [4.0]]]))
    assert merge_gather(z, 2, 2).data.ravel().tolist() == [1.0, 2.0, 3.0, 4.0]
    # a row-major 1..4 grid therefore gathers as [1, 3, 2, 4]
    z = Tensor(np.array([[[1.0], [2.0], [3.0], [4.0]]]))
    assert merge_gather(z, 2, 2).data.ravel().tolist() == [1.0, 3.0, 2.0, 4.0]


def gather_oracle(z, h, w):
    b, _, c = z.shape
    grid = z.reshape(b, h, w, c)
    out = np.zeros((b, (h // 2) * (w // 2), 4 * c))
    for i in range(h // 2):
        for j in range(w // 2):
            parts = [grid[:, 2 * i, 2 * j], grid[:, 2 * i + 1, 2 * j],
                     grid[:, 2 * i, 2 * j + 1], grid[:, 2 * i + 1, 2 * j + 1]]
            out[:, i * (w // 2) + j] = np.concatenate(parts, axis=-1)
    return out


def test_merge_matches_gather_matmul_oracle():
    merge = PatchMerge(3, RNG(6)).astype(np.float64)
    z = RNG(7).standard_normal((2, 4 * 6, 3))
    g = gather_oracle(z, 4, 6)
    np.testing.assert_array_equal(merge_gather(Tensor(z), 4, 6).data, g)
    normed = (g - g.mean(-1, keepdims=True)) / np.sqrt(g.var(-1, keepdims=True) + 1e-5)
    normed = normed * merge.norm.weight.data + merge.norm.bias.data
    assert np.abs(merge(Tensor(z), 4, 6).data - normed @ merge.reduction.weight.data).max() <= 1e-6


def test_merge_56_grid_shape_and_errors():
    merge = PatchMerge(4, RNG(0))
    with no_grad():
        out = merge(Tensor(np.zeros((1, 56 * 56, 4), dtype=np.float32)), 56, 56)
    assert out.shape == (1, 28 * 28, 8)
    with pytest.raises(ShapeError):
        merge(Tensor(np.zeros((1, 15, 4))), 5, 3)


# -- expand ---------------------------------------------------------------------


def test_expand_single_token_rearrangement():
    c = 4
    x = np.arange(2 * c, dtype=float).reshape(1, 1, 2 * c)
    out = expand_rearrange(Tensor(x), 1, 1, 2).data[0]
    # group g (size c/2) lands at offset divmod(g, 2) of the 2x2 block, row-major
    for g in range(4):
        r, col = divmod(g, 2)
        np.testing.assert_array_equal(out[r * 2 + col], x[0, 0, g * 2:(g + 1) * 2])


def test_expand_with_identity_linear():
    exp = PatchExpand(4, RNG(8)).astype(np.float64)
    exp.expand.weight.data[:] = np.hstack([np.eye(4), np.eye(4)])
    z = RNG(9).standard_normal((1, 1, 4))
    pre = expand_rearrange(exp.expand(Tensor(z)), 1, 1, 2).data[0]
    oracle = np.array([z[0, 0, 0:2], z[0, 0, 2:4], z[0, 0, 0:2], z[0, 0, 2:4]])
    np.testing.assert_array_equal(pre, oracle)


def test_expand_oracle_on_grid():
    h, w, f, c = 3, 2, 2, 3
    x = RNG(10).standard_normal((2, h * w, f * f * c))
    out = expand_rearrange(Tensor(x), h, w, f).data
    oracle = np.zeros((2, h * f, w * f, c))
    for i in range(h):
        for j in range(w):
            for g in range(f * f):
                r, col = divmod(g, f)
                oracle[:, i * f + r, j * f + col] = x[:, i * w + j, g * c:(g + 1) * c]
    np.testing.assert_array_equal(out, oracle.reshape(2, -1, c))


def test_expand_shape_law_and_error():
    exp = PatchExpand(32, RNG(0))
    with no_grad():
        out = exp(Tensor(np.zeros((1, 7 * 7, 32), dtype=np.float32)), 7, 7)
    assert out.shape == (1, 14 * 14, 16)
    with pytest.raises(ShapeError):
        PatchExpand(3, RNG(0))


@settings(max_examples=20, deadline=None)
@given(h=st.integers(1, 4), w=st.integers(1, 4), c=st.sampled_from([2, 4, 8]))
def test_merge_expand_shape_round_trip(h, w, c):
    rng = RNG(h * 31 + w)
    z = Tensor(rng.standard_normal((1, h * w, c)))
    with no_grad():
        up = PatchExpand(c, rng)(z, h, w)
        assert up.shape == (1, 4 * h * w, c // 2)
        back = PatchMerge(c // 2, rng)(up, 2 * h, 2 * w)
    assert back.shape == z.shape


# -- final expansion and head ------------------------------------------------


def test_final_head_shapes():
    head = FinalExpandHead(8, 4, 2, RNG(0))
    with no_grad():
        out = head(Tensor(np.zeros((1, 56 * 56, 8), dtype=np.float32)), 56, 56)
    assert out.shape == (1, 224, 224, 2)


def test_final_head_zero_weights_give_bias():
    head = FinalExpandHead(4, 2, 2, RNG(1)).astype(np.float64)
    head.head.weight.data[:] = 0.0
    head.head.bias.data[:] = [0.25, -1.5]
    out = head(Tensor(RNG(2).standard_normal((3, 16, 4))), 4, 4).data
    assert out.shape == (3, 8, 8, 2)
    np.testing.assert_array_equal(out, np.broadcast_to([0.25, -1.5], out.shape))


def test_toy_model_output_shape():
    model = build(ModelConfig.toy())
    with no_grad():
        out = model(np.zeros((1, 32, 32, 3), dtype=np.float32))
    assert out.shape == (1, 32, 32, 2)


@pytest.mark.parametrize("dim", [4, 12])
def test_encoder_bottleneck_law_at_224(dim):
    cfg = ModelConfig(embed_dim=dim, num_heads=(1, 1, 1), bottleneck_heads=1, depths=(2, 2, 2))
    model = build(cfg)
    with no_grad():
        z, bundles = model.encode(np.zeros((1, 224, 224, 3), dtype=np.float32))
    assert z.shape == (1, (224 // 32) * (224 // 32), 8 * dim)
    assert [b.tokens.shape for b in bundles] == [
        (1, 56 * 56, dim), (1, 28 * 28, 2 * dim), (1, 14 * 14, 4 * dim)]
