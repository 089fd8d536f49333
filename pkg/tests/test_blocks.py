import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from omsn.blocks import (ResNeStBlock, ResNeStStage, SplitAttention, SplitAttentionConfig,
                         resnest_stage, split_attention)
from omsn.engine import ops
from omsn.engine.ops import ShapeError
from omsn.engine.tensor import Tensor


def split_attention_loop(feats, sa):
    """Scalar-loop evaluation: radix sum, channel means, dense-BN-ReLU-dense,
    softmax over radices, weighted sum."""
    n = len(feats)
    B, C, H, W = feats[0].shape
    W1, b1 = sa.fc1.weight.data, sa.fc1.bias.data
    W2, b2 = sa.fc2.weight.data, sa.fc2.bias.data
    gamma, beta, eps = sa.bn.gamma.data, sa.bn.beta.data, sa.bn.eps
    inter = W1.shape[0]
    s = np.zeros((B, C))
    for b in range(B):
        for c in range(C):
            acc = 0.0
            for i in range(H):
                for j in range(W):
                    acc += sum(float(f[b, c, i, j]) for f in feats)
            s[b, c] = acc / (H * W)
    z = np.zeros((B, inter))
    for b in range(B):
        for k in range(inter):
            z[b, k] = b1[k] + sum(W1[k, c] * s[b, c] for c in range(C))
    for k in range(inter):
        mu = sum(z[b, k] for b in range(B)) / B
        var = sum((z[b, k] - mu) ** 2 for b in range(B)) / B
        for b in range(B):
            z[b, k] = max(0.0, gamma[k] * (z[b, k] - mu) / np.sqrt(var + eps) + beta[k])
    out = np.zeros((B, C, H, W))
    omega = np.zeros((B, n, C))
    for b in range(B):
        for c in range(C):
            logits = [b2[a * C + c] + sum(W2[a * C + c, k] * z[b, k] for k in range(inter))
                      for a in range(n)]
            m = max(logits)
            e = [np.exp(v - m) for v in logits]
            for a in range(n):
                omega[b, a, c] = e[a] / sum(e)
            for i in range(H):
                for j in range(W):
                    out[b, c, i, j] = sum(omega[b, a, c] * feats[a][b, c, i, j] for a in range(n))
    return out, omega


def make_sa(radix=2, width=4, inter=8, seed=0):
    sa = SplitAttention(width, radix, inter, rng=np.random.default_rng(seed))
    return sa.astype(np.float64)


class TestSplitAttention:
    def test_single_radix_is_identity(self, rng):
        sa = make_sa(radix=1)
        r = rng.standard_normal((2, 4, 3, 3))
        np.testing.assert_array_equal(sa([Tensor(r)]).data, r)

    def test_identical_radices_return_input(self, rng):
        sa = make_sa(radix=2)
        r = rng.standard_normal((2, 4, 3, 3))
        np.testing.assert_allclose(sa([Tensor(r), Tensor(r)]).data, r, rtol=1e-12)

    def test_identical_radices_with_symmetric_dense_give_half(self, rng):
        sa = make_sa(radix=2)
        sa.fc2.weight.data[4:] = sa.fc2.weight.data[:4]
        sa.fc2.bias.data[4:] = sa.fc2.bias.data[:4]
        r = Tensor(rng.standard_normal((2, 4, 3, 3)))
        np.testing.assert_allclose(sa.weights([r, r]).data, 0.5, atol=1e-15)

    @pytest.mark.parametrize("radix,seed", [(2, 0), (2, 1), (3, 2)])
    def test_matches_scalar_loop(self, radix, seed):
        r = np.random.default_rng(seed)
        sa = make_sa(radix=radix, width=3, inter=5, seed=seed)
        feats = [r.standard_normal((3, 3, 2, 4)) for _ in range(radix)]
        ref, omega = split_attention_loop(feats, sa)
        got = split_attention([Tensor(f) for f in feats], sa)
        np.testing.assert_allclose(got.data, ref, rtol=1e-10, atol=1e-12)
        np.testing.assert_allclose(sa.weights([Tensor(f) for f in feats]).data, omega, rtol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 4), st.integers(0, 10_000))
    def test_weights_sum_to_one(self, radix, seed):
        r = np.random.default_rng(seed)
        sa = make_sa(radix=radix, seed=seed)
        feats = [Tensor(r.standard_normal((2, 4, 3, 3)) * 5) for _ in range(radix)]
        w = sa.weights(feats).data
        np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-6)

    def test_weights_depend_only_on_channel_means(self, rng):
        sa = make_sa(radix=2)
        feats = [rng.standard_normal((2, 4, 3, 3)) for _ in range(2)]
        # add a spatially zero-mean pattern: channel means are unchanged
        pattern = rng.standard_normal((2, 4, 3, 3))
        pattern -= pattern.mean(axis=(2, 3), keepdims=True)
        moved = [feats[0] + pattern, feats[1] - 0.5 * pattern]
        w1 = sa.weights([Tensor(f) for f in feats]).data
        w2 = sa.weights([Tensor(f) for f in moved]).data
        np.testing.assert_allclose(w1, w2, atol=1e-6)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            make_sa()([])

    def test_shape_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            make_sa()([Tensor(np.zeros((2, 4, 3, 3))), Tensor(np.zeros((2, 4, 3, 2)))])


class TestConfig:
    def test_defaults(self):
        cfg = SplitAttentionConfig()
        assert (cfg.cardinality, cfg.radix) == (1, 2)
        assert cfg.bottleneck == 16

    def test_small_width_bottleneck_floor(self):
        assert SplitAttentionConfig(channels=16).bottleneck == 8

    def test_indivisible_rejected(self):
        with pytest.raises(ValueError):
            SplitAttentionConfig(cardinality=3, channels=16)


class TestBlock:
    def test_shape_stride1(self, rng):
        blk = ResNeStBlock(4, 6, stride=1, rng=rng)
        assert blk(Tensor(rng.standard_normal((2, 4, 9, 9)))).shape == (2, 6, 9, 9)

    def test_stride2_38_to_19(self, rng):
        blk = ResNeStBlock(4, 8, stride=2, rng=rng)
        assert blk(Tensor(rng.standard_normal((2, 4, 38, 38)))).shape == (2, 8, 19, 19)

    def test_odd_extent_ceil(self, rng):
        blk = ResNeStBlock(4, 8, stride=2, rng=rng)
        assert blk(Tensor(rng.standard_normal((2, 4, 19, 19)))).shape == (2, 8, 10, 10)

    def test_cardinality_two(self, rng):
        blk = ResNeStBlock(4, 8, stride=1, cardinality=2, radix=2, width=8, rng=rng)
        assert len(blk.cardinals) == 2
        assert blk(Tensor(rng.standard_normal((2, 4, 5, 5)))).shape == (2, 8, 5, 5)

    def test_zero_input_zero_output(self, rng):
        blk = ResNeStBlock(4, 8, stride=2, rng=rng)
        for name, p in blk.named_parameters():
            if name.endswith("bias"):
                p.data[...] = 0
        out = blk(Tensor(np.zeros((2, 4, 8, 8), np.float32)))
        np.testing.assert_array_equal(out.data, 0.0)

    @pytest.mark.parametrize("cin,cout,stride", [(4, 4, 1), (4, 8, 2)])
    def test_zeroed_main_branch_leaves_shortcut(self, rng, cin, cout, stride):
        blk = ResNeStBlock(cin, cout, stride=stride, rng=rng)
        blk.project.weight.data[...] = 0
        x = Tensor(rng.standard_normal((2, cin, 6, 6)).astype(np.float32))
        expected = ops.relu(blk.residual(x)).data
        np.testing.assert_allclose(blk(x).data, expected, atol=1e-6)

    def test_identity_shortcut_only_when_shapes_match(self, rng):
        assert ResNeStBlock(4, 4, stride=1, rng=rng).shortcut is None
        assert ResNeStBlock(4, 8, stride=1, rng=rng).shortcut is not None
        assert ResNeStBlock(4, 4, stride=2, rng=rng).shortcut is not None

    def test_channel_mismatch_rejected(self, rng):
        with pytest.raises(ShapeError):
            ResNeStBlock(4, 4, rng=rng)(Tensor(np.zeros((2, 3, 5, 5))))

    def test_nonnegative_output(self, rng):
        blk = ResNeStBlock(3, 5, stride=2, rng=rng)
        assert blk(Tensor(rng.standard_normal((2, 3, 7, 7)))).data.min() >= 0


class TestStage:
    def test_one_block_152_to_76(self, rng):
        st_ = ResNeStStage(2, 4, num_blocks=1, stride=2, rng=rng)
        assert st_(Tensor(rng.standard_normal((2, 2, 152, 152)).astype(np.float32))).shape == (2, 4, 76, 76)

    def test_second_block_keeps_extent(self, rng):
        stage = ResNeStStage(3, 6, num_blocks=2, stride=2, rng=rng)
        assert [b.stride for b in stage.blocks] == [2, 1]
        x = Tensor(rng.standard_normal((2, 3, 10, 10)))
        mid = stage.blocks[0](x)
        assert stage.blocks[1](mid).shape == mid.shape == (2, 6, 5, 5)
        np.testing.assert_array_equal(resnest_stage(x, stage.blocks).data, stage(x).data)

    def test_gradient_reaches_every_parameter(self, rng):
        stage = ResNeStStage(3, 6, num_blocks=2, stride=2, rng=rng)
        x = Tensor(rng.standard_normal((2, 3, 8, 8)))
        ops.mean(stage(x)).backward()
        missing = [n for n, p in stage.named_parameters() if p.grad is None]
        assert not missing
        # biases feeding batch norm have identically zero gradient; all others must move
        silent = [n for n, p in stage.named_parameters()
                  if not np.any(p.grad) and not n.endswith("fc1.bias")]
        assert not silent
