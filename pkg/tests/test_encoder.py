import numpy as np
import pytest

from stainssl import tensor as T
from stainssl.encoder import (
    DinoHeadConfig, ViTConfig, bilinear_matrix, clone_params, dino_head, init_params, interpolate_pos_embed,
    is_no_decay, patch_embed, patchify, vit_forward,
)
from stainssl.rng import SplitMix

TINY = ViTConfig(image_size=16, patch_size=8, embed_dim=16, depth=1, heads=2)
TINY_HEAD = DinoHeadConfig(hidden=12, bottleneck=6, out_dim=5)


def test_token_counts():
    assert ViTConfig.preset("vit-micro").tokens == 65
    assert ViTConfig.preset("vit-small").tokens == 197
    p = init_params(TINY, TINY_HEAD, 0)
    x = patch_embed(np.zeros((3, 3, 16, 16), np.float32), p, TINY)
    assert x.shape == (3, 5, 16)


def test_zero_image_zero_pos_tokens():
    p = init_params(TINY, TINY_HEAD, 0)
    p["pos_embed"].data[:] = 0
    p["patch_embed.bias"].data[:] = np.arange(16)
    x = patch_embed(np.zeros((1, 3, 16, 16), np.float32), p, TINY).data[0]
    np.testing.assert_array_equal(x[0], p["cls_token"].data[0])
    for row in x[1:]:
        np.testing.assert_array_equal(row, np.arange(16))


def test_patchify_order():
    img = np.arange(2 * 4 * 4, dtype=np.float32).reshape(1, 2, 4, 4)
    out = patchify(img, 2)
    assert out.shape == (1, 4, 8)
    np.testing.assert_array_equal(out[0, 1], np.concatenate([img[0, 0, :2, 2:].ravel(), img[0, 1, :2, 2:].ravel()]))
    with pytest.raises(T.DimensionError):
        patchify(np.zeros((1, 3, 10, 10)), 4)


def test_interpolation_vectors():
    tab = np.random.default_rng(0).normal(size=(5, 3)).astype(np.float32)
    assert np.array_equal(interpolate_pos_embed(tab, 2, 2).data, tab)
    const = np.ones((5, 3)) * 0.7
    np.testing.assert_allclose(interpolate_pos_embed(const, 2, 3).data, 0.7)
    with T.precision("float64"):
        grid = np.array([[0.0, 1.0], [0.0, 1.0]]).reshape(4, 1)
        t = np.concatenate([[[9.0]], grid])
        out = interpolate_pos_embed(t, 2, 3).data
    assert out[0, 0] == 9.0
    np.testing.assert_allclose(out[1:].reshape(3, 3)[:, 1], 0.5)
    np.testing.assert_allclose(bilinear_matrix(4, 7).sum(axis=1), 1.0)


def test_forward_shapes_and_local_views():
    p = init_params(ViTConfig(), DinoHeadConfig(), 1)
    g = vit_forward(np.zeros((2, 3, 64, 64), np.float32), p, ViTConfig())
    loc = vit_forward(np.zeros((2, 3, 32, 32), np.float32), p, ViTConfig())
    assert g.shape == loc.shape == (2, 64)
    with pytest.raises(T.DimensionError):
        vit_forward(np.zeros((2, 1, 64, 64), np.float32), p, ViTConfig())


def test_bottleneck_unit_rows_and_logit_bound():
    p = init_params(TINY, TINY_HEAD, 2)
    x = np.random.default_rng(1).normal(size=(4, 3, 16, 16)).astype(np.float32)
    store = []
    logits = dino_head(vit_forward(x, p, TINY), p, TINY_HEAD, store).data
    np.testing.assert_allclose(np.linalg.norm(store[0], axis=1), 1.0, atol=1e-6)
    assert logits.shape == (4, 5) and np.abs(logits).max() <= 1.0 + 1e-6


def test_teacher_copy_is_bit_identical():
    s = init_params(TINY, TINY_HEAD, 3)
    t = clone_params(s, requires_grad=False)
    assert set(s) == set(t)
    x = np.random.default_rng(2).normal(size=(2, 3, 16, 16)).astype(np.float32)
    a = dino_head(vit_forward(x, s, TINY), s, TINY_HEAD).data
    b = dino_head(vit_forward(x, t, TINY), t, TINY_HEAD).data
    assert a.tobytes() == b.tobytes()
    assert not any(v.requires_grad for v in t.values())


def test_init_statistics():
    p = init_params(ViTConfig(), DinoHeadConfig(), 0)
    w = p["blocks.0.mlp.fc1.weight"].data
    assert abs(w.std() - 0.02 * 0.88) < 0.002 and np.abs(w).max() <= 0.04  # truncated at 2 sigma
    assert np.all(p["blocks.0.norm1.gamma"].data == 1) and np.all(p["blocks.0.attn.qkv.bias"].data == 0)
    assert init_params(ViTConfig(), DinoHeadConfig(), 0)["cls_token"].data.tobytes() == p["cls_token"].data.tobytes()


def test_no_decay_rule():
    assert is_no_decay("blocks.0.attn.qkv.bias") and is_no_decay("norm.gamma") and is_no_decay("pos_embed")
    assert not is_no_decay("blocks.0.attn.qkv.weight") and not is_no_decay("head.last.weight_v")


def test_end_to_end_gradient_small_config():
    p = init_params(TINY, TINY_HEAD, 4)
    r = np.random.default_rng(3)
    g = r.normal(size=(2, 3, 16, 16))
    loc = r.normal(size=(2, 3, 8, 8))
    teacher = r.normal(size=(2, 5))
    # larger weights make the check sensitive to every block
    for t in p.values():
        t.data = t.data * 10 if t.data.std() > 0 else t.data

    def loss():
        s = T.concat([dino_head(vit_forward(g, p, TINY), p, TINY_HEAD),
                      dino_head(vit_forward(loc, p, TINY), p, TINY_HEAD)], axis=0)
        probs = np.exp(teacher / 0.5)
        probs /= probs.sum(1, keepdims=True)
        return T.cross_entropy_soft(s, np.concatenate([probs, probs]), 0.1)

    rep = T.grad_check(loss, p, h=1e-5, tol=1e-3, max_coords=4, rng=SplitMix(0, 2))
    assert rep.passed, rep.worst
