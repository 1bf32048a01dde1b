import math

import numpy as np
import pytest
from scipy.special import softmax

from pointermem import tensor as T
from pointermem.geometry import Pointmap, patch_average_positions
from pointermem.model import (
    FrameTokens,
    ModelConfig,
    StreamingModel,
    assign_token_positions,
    patchify,
    unpatchify,
)
from pointermem.nn import MultiHeadAttention, SelfAttentionBlock, attend
from pointermem.tensor import Tensor, grad_check


@pytest.fixture(scope="module")
def tiny():
    return StreamingModel(ModelConfig.tiny())


def zero_module(module):
    for _, p in module.named_parameters():
        p.data[...] = 0.0


def np_ln(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(np.maximum(var, 1e-6)) * gamma + beta


def np_gelu(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x**3)))


def np_mha(att, x, ctx):
    h, d = att.n_heads, att.d_head
    q = (x @ att.wq.weight.data + att.wq.bias.data).reshape(len(x), h, d)
    k = (ctx @ att.wk.weight.data + att.wk.bias.data).reshape(len(ctx), h, d)
    v = (ctx @ att.wv.weight.data + att.wv.bias.data).reshape(len(ctx), h, d)
    out = np.empty((len(x), h, d))
    for i in range(h):
        w = softmax(q[:, i] @ k[:, i].T / math.sqrt(d), axis=-1)
        out[:, i] = w @ v[:, i]
    return out.reshape(len(x), -1) @ att.wo.weight.data + att.wo.bias.data


def np_decoder_block(b, x, mem):
    ln = lambda m, v: np_ln(v, m.gamma.data, m.beta.data)
    h = ln(b.norm_self, x)
    x = x + np_mha(b.self_attn, h, h)
    x = x + np_mha(b.cross_attn, ln(b.norm_cross, x), ln(b.norm_mem, mem))
    hid = np_gelu(ln(b.norm_mlp, x) @ b.mlp.fc1.weight.data + b.mlp.fc1.bias.data)
    return x + hid @ b.mlp.fc2.weight.data + b.mlp.fc2.bias.data


def random_tokens(cfg, rng, positions=None):
    n = cfg.n_tokens
    pos = np.zeros((n, 3)) if positions is None else positions
    null = np.ones(n, bool) if positions is None else np.zeros(n, bool)
    return FrameTokens(Tensor(rng.normal(size=(n, cfg.d_model))), Tensor(rng.normal(size=(1, cfg.d_model))),
                       pos, null)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(image_size=(30, 32)), dict(d_model=90), dict(d_head=8, d_model=32)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ModelConfig(**kw)

    def test_json_roundtrip(self):
        cfg = ModelConfig.tiny(seed=4)
        assert ModelConfig.from_json(cfg.to_json()) == cfg

    def test_token_count(self):
        assert ModelConfig().n_tokens == 64


class TestEncoder:
    def test_zero_image_zero_bias(self, tiny):
        cfg = tiny.cfg
        out = tiny.project_patches(np.zeros((*cfg.image_size, 3)))
        assert np.array_equal(out.data, np.zeros((cfg.n_tokens, cfg.d_model)))

    def test_size_mismatch(self, tiny):
        with pytest.raises(ValueError):
            tiny.encode_image(np.zeros((8, 8, 3)))

    def test_patch_permutation(self, tiny):
        rng = np.random.default_rng(0)
        img = rng.random((16, 16, 3))
        swapped = img.copy()
        swapped[0:4, 0:4], swapped[4:8, 8:12] = img[4:8, 8:12], img[0:4, 0:4]
        a = tiny.project_patches(img).data
        b = tiny.project_patches(swapped).data
        j = 1 * 4 + 2
        assert np.array_equal(a[0], b[j]) and np.array_equal(a[j], b[0])
        rest = [i for i in range(16) if i not in (0, j)]
        assert np.array_equal(a[rest], b[rest])

    def test_default_config_shape(self):
        m = StreamingModel(ModelConfig())
        out = m.encode_image(np.random.default_rng(0).random((64, 64, 3)))
        assert out.shape == (64, 96)

    def test_deterministic(self, tiny):
        img = np.random.default_rng(1).random((16, 16, 3))
        assert np.array_equal(tiny.encode_image(img).data, tiny.encode_image(img).data)


class TestFirstMemory:
    def test_zero(self):
        m = StreamingModel(ModelConfig.tiny())
        m.first_memory.bias.data[...] = 0
        assert np.array_equal(m.embed_first_memory(Tensor(np.zeros((16, 24)))).data, np.zeros((16, 24)))

    def test_matrix_oracle(self, tiny):
        x = np.random.default_rng(2).normal(size=(16, 24))
        out = tiny.embed_first_memory(Tensor(x)).data
        w, b = tiny.first_memory.weight.data, tiny.first_memory.bias.data
        want = np.array([[sum(x[n, i] * w[i, j] for i in range(24)) + b[j] for j in range(24)] for n in range(16)])
        assert out.shape == (16, 24)
        assert np.abs(out - want).max() < 1e-12

    def test_later_frame_rejected(self, tiny):
        with pytest.raises(ValueError):
            tiny.embed_first_memory(Tensor(np.zeros((16, 24))), frame_index=1)


class TestDecoder:
    def test_single_key_returns_value_row(self):
        rng = np.random.default_rng(3)
        q, v = Tensor(rng.normal(size=(2, 5, 6))), Tensor(rng.normal(size=(2, 1, 6)))
        k = Tensor(rng.normal(size=(2, 1, 6)))
        out = attend(q, k, v).data
        assert np.array_equal(out, np.broadcast_to(v.data, out.shape))

    def test_cross_attention_single_pointer(self):
        rng = np.random.default_rng(4)
        att = MultiHeadAttention(12, 2, rng)
        x = rng.normal(size=(5, 12))
        mem = x[2:3]
        out = att(Tensor(x), Tensor(mem)).data
        value = (mem @ att.wv.weight.data + att.wv.bias.data) @ att.wo.weight.data + att.wo.bias.data
        # exact at the attention kernel (test above); projections add BLAS rounding
        np.testing.assert_allclose(out, np.broadcast_to(value, out.shape), rtol=0, atol=1e-14)

    def test_shape_contract(self, tiny):
        rng = np.random.default_rng(5)
        tokens = random_tokens(tiny.cfg, rng, rng.normal(size=(16, 3)))
        out = tiny.interaction_decode(tokens, Tensor(rng.normal(size=(7, 24))), rng.normal(size=(7, 3)))
        assert out.image_tokens.shape == (16, 24) and out.pose_token.shape == (1, 24)

    def test_null_positions_match_reference(self, tiny):
        rng = np.random.default_rng(6)
        block = tiny.decoder[0]
        x, mem = rng.normal(size=(17, 24)), rng.normal(size=(9, 24))
        nq = tiny.cfg.rope
        from pointermem.rope3d import complex_multipliers

        rq = complex_multipliers(np.zeros((17, 3)), nq, np.ones(17, bool))
        rk = complex_multipliers(np.zeros((9, 3)), nq, np.ones(9, bool))
        got = block(Tensor(x), Tensor(mem), rq, rk).data
        assert np.abs(got - np_decoder_block(block, x, mem)).max() < 1e-12

    def test_positions_matter(self, tiny):
        rng = np.random.default_rng(7)
        tokens = random_tokens(tiny.cfg, rng, rng.normal(size=(16, 3)))
        feat = Tensor(rng.normal(size=(7, 24)))
        a = tiny.interaction_decode(tokens, feat, rng.normal(size=(7, 3))).image_tokens.data
        b = tiny.interaction_decode(tokens, feat, np.full((7, 3), np.nan)).image_tokens.data
        assert not np.allclose(a, b)

    def test_block_gradient(self, tiny):
        rng = np.random.default_rng(8)
        block = tiny.decoder[0]
        mem = Tensor(rng.normal(size=(5, 24)))
        from pointermem.rope3d import complex_multipliers

        rq = complex_multipliers(rng.normal(size=(6, 3)), tiny.cfg.rope)
        rk = complex_multipliers(rng.normal(size=(5, 3)), tiny.cfg.rope)
        w = rng.normal(size=(6, 24))
        err = grad_check(lambda x: (block(x, mem, rq, rk) * w).sum(), rng.normal(size=(6, 24)), 1e-6)
        assert err < 1e-3


class TestTokenPositions:
    def test_first_frame_null(self):
        pos, null = assign_token_positions(None, 4, 16)
        assert null.all() and pos.shape == (16, 3)

    def test_constant(self):
        c = np.array([1.5, -2.0, 0.25])
        pos, null = assign_token_positions(Pointmap(np.broadcast_to(c, (8, 8, 3)).copy()), 4)
        assert not null.any() and np.array_equal(pos, np.tile(c, (4, 1)))

    def test_shared_oracle(self):
        rng = np.random.default_rng(9)
        valid = rng.random((16, 16)) > 0.5
        valid[:4, :4] = False
        pm = Pointmap(rng.normal(size=(16, 16, 3)), valid)
        pos, null = assign_token_positions(pm, 4)
        cells, ok = patch_average_positions(pm, 4)
        assert np.array_equal(pos, cells.reshape(-1, 3)) and np.array_equal(null, ~ok.reshape(-1))
        assert null[0]

    def test_requires_count_without_previous(self):
        with pytest.raises(ValueError):
            assign_token_positions(None, 4)


class TestHeads:
    def test_pose_unit_norm(self, tiny):
        rng = np.random.default_rng(10)
        for _ in range(20):
            out = tiny.head_pose(Tensor(rng.normal(size=(1, 24)) * 3))
            assert abs(np.linalg.norm(out.quat.data) - 1) < 1e-9 and not out.fallback
            out.to_pose()

    def test_pose_zero_fallback(self):
        m = StreamingModel(ModelConfig.tiny())
        zero_module(m.pose_head)
        out = m.head_pose(Tensor(np.ones((1, 24))))
        assert out.fallback
        pose = out.to_pose()
        assert np.array_equal(pose.quat, [1, 0, 0, 0]) and np.array_equal(pose.trans, [0, 0, 0])

    def test_pose_gradient(self, tiny):
        rng = np.random.default_rng(11)
        w = rng.normal(size=4)
        err = grad_check(lambda z: (tiny.head_pose(z).quat * w).sum() + tiny.head_pose(z).trans.sum(),
                         rng.normal(size=(1, 24)), 1e-6)
        assert err < 1e-5

    def test_self_head_confidence(self, tiny):
        rng = np.random.default_rng(12)
        out = tiny.head_self(Tensor(rng.normal(size=(16, 24)) * 5))
        assert out.points.shape == (16, 16, 3) and (out.confidence.data >= 1).all()
        m = StreamingModel(ModelConfig.tiny())
        zero_module(m.self_head)
        assert np.array_equal(m.head_self(Tensor(np.ones((16, 24)))).confidence.data, np.full((16, 16), 2.0))

    def test_unpatchify_roundtrip(self):
        grid = np.random.default_rng(13).normal(size=(12, 20, 5))
        assert np.array_equal(unpatchify(Tensor(patchify(grid, 4)), (3, 5), 4).data, grid)

    def test_identity_modulation_reduces_to_plain_block(self):
        m = StreamingModel(ModelConfig.tiny())
        rng = np.random.default_rng(14)
        for blk in m.global_blocks:
            blk.mod1.weight.data[...] = 0
            blk.mod2.weight.data[...] = 0
        x = rng.normal(size=(16, 24))
        cond = Tensor(rng.normal(size=(1, 24)))
        y = Tensor(x)
        for blk in m.global_blocks:
            plain = SelfAttentionBlock(24, 2, np.random.default_rng(0), mlp_ratio=2)
            plain.attn, plain.mlp = blk.attn, blk.mlp
            y = plain(y)
        ref = m._unpatch_head(m.global_head, y)
        out = m.head_global(Tensor(x), cond)
        assert np.abs(out.points.data - ref.points.data).max() < 1e-12
        assert (out.confidence.data >= 1).all()

    def test_pose_token_changes_global_output(self, tiny):
        rng = np.random.default_rng(15)
        x = Tensor(rng.normal(size=(16, 24)))
        a = tiny.head_global(x, Tensor(rng.normal(size=(1, 24)))).points.data
        b = tiny.head_global(x, Tensor(rng.normal(size=(1, 24)))).points.data
        assert np.abs(a - b).max() > 1e-6

    def test_heads_gradient(self, tiny):
        rng = np.random.default_rng(16)
        w = rng.normal(size=(16, 16, 3))
        pose = Tensor(rng.normal(size=(1, 24)))
        assert grad_check(lambda x: (tiny.head_self(x).points * w).sum() + tiny.head_self(x).confidence.sum(),
                          rng.normal(size=(16, 24)), 1e-6) < 1e-4
        assert grad_check(lambda x: (tiny.head_global(x, pose).points * w).sum(),
                          rng.normal(size=(16, 24)), 1e-6) < 1e-4

    @pytest.mark.parametrize("cfg", [ModelConfig.tiny(), ModelConfig.tiny(image_size=(8, 12)),
                                     ModelConfig.tiny(image_size=(24, 16), patch=8, d_model=36, d_head=18),
                                     ModelConfig(image_size=(32, 32), d_model=48, d_head=12, n_dec_layers=1)])
    def test_shapes_across_configs(self, cfg):
        m = StreamingModel(cfg)
        rng = np.random.default_rng(17)
        H, W = cfg.image_size
        F = m.encode_image(rng.random((H, W, 3)))
        tokens = FrameTokens(F, m.pose_token, np.zeros((cfg.n_tokens, 3)), np.ones(cfg.n_tokens, bool))
        dec = m.interaction_decode(tokens, m.embed_first_memory(F), np.full((cfg.n_tokens, 3), np.nan))
        s = m.head_self(dec.image_tokens)
        g = m.head_global(dec.image_tokens, dec.pose_token)
        assert s.points.shape == g.points.shape == (H, W, 3)
        assert s.confidence.shape == g.confidence.shape == (H, W)
        feat, pos, kept = m.memory_encode(F, dec.image_tokens, g.points)
        assert feat.shape == (cfg.n_tokens, cfg.d_model) and pos.shape == (cfg.n_tokens, 3)


class TestMemoryEncoder:
    def test_positions_and_drop(self, tiny):
        rng = np.random.default_rng(18)
        F, Fd = Tensor(rng.normal(size=(16, 24))), Tensor(rng.normal(size=(16, 24)))
        pts = rng.normal(size=(16, 16, 3))
        valid = rng.random((16, 16)) > 0.3
        valid[4:8, 0:4] = False
        feat, pos, kept = tiny.memory_encode(F, Fd, Tensor(pts), valid)
        cells, ok = patch_average_positions(Pointmap(pts, valid), 4)
        assert len(kept) == 15 and feat.shape[0] == 15 and 4 not in kept
        assert np.array_equal(pos, cells.reshape(-1, 3)[ok.reshape(-1)])

    def test_all_valid_keeps_every_token(self, tiny):
        rng = np.random.default_rng(19)
        feat, _, kept = tiny.memory_encode(Tensor(rng.normal(size=(16, 24))), Tensor(rng.normal(size=(16, 24))),
                                           Tensor(rng.normal(size=(16, 16, 3))))
        assert feat.shape[0] == 16 and np.array_equal(kept, np.arange(16))

    def test_zero_paths(self):
        m = StreamingModel(ModelConfig.tiny())
        zero_module(m.mem_feature)
        zero_module(m.geo_embed)
        for b in m.geo_blocks:
            zero_module(b)
        rng = np.random.default_rng(20)
        feat, _, _ = m.memory_encode(Tensor(rng.normal(size=(16, 24))), Tensor(rng.normal(size=(16, 24))),
                                     Tensor(rng.normal(size=(16, 16, 3))))
        assert np.array_equal(feat.data, np.zeros((16, 24)))
