"""Attention, transformer block, and BLSTM layer tests."""

import numpy as np
import pytest

from polyg2p import tensor as T
from polyg2p.layers import BLSTM, Linear, MultiHeadAttention, TransformerBlock
from polyg2p.tensor import Tensor

from gradcheck import check_op, projection_loss

RNG = np.random.default_rng(77)


def make_mha(width=8, heads=2, seed=0):
    return MultiHeadAttention(width, heads, "attn", np.random.default_rng(seed))


class TestMultiHeadAttention:
    def test_single_position_weight_is_one(self):
        mha = make_mha()
        x = Tensor(RNG.normal(size=(1, 1, 8)))
        _, weights = mha(x)
        np.testing.assert_allclose(weights.data, np.ones((1, 2, 1, 1)))

    def test_rows_sum_to_one(self):
        mha = make_mha()
        x = Tensor(RNG.normal(size=(2, 5, 8)))
        _, weights = mha(x)
        assert weights.data.shape == (2, 2, 5, 5)
        assert np.all(weights.data >= 0)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_constant_scores_average_values(self):
        # zeroed query projection makes every score identical, so attention
        # weights are uniform and the context is the mean of the value rows
        mha = make_mha()
        mha.wq.W.data[:] = 0.0
        mha.wq.b.data[:] = 0.0
        x = Tensor(RNG.normal(size=(1, 6, 8)))
        _, weights = mha(x)
        np.testing.assert_allclose(weights.data, 1.0 / 6.0, atol=1e-12)
        v = mha.wv(x).data.reshape(1, 6, 2, 4).transpose(0, 2, 1, 3)
        ctx = (weights.data[..., None] * v[:, :, None, :, :]).sum(axis=3)
        np.testing.assert_allclose(ctx[0, :, 0], v.mean(axis=2)[0], atol=1e-12)

    def test_mask_blocks_attention_to_invalid_keys(self):
        mha = make_mha()
        x = Tensor(RNG.normal(size=(1, 4, 8)))
        valid = np.array([[True, True, False, True]])
        _, weights = mha(x, valid=valid)
        np.testing.assert_allclose(weights.data[..., 2], 0.0, atol=1e-12)
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_mask_length_mismatch(self):
        mha = make_mha()
        x = Tensor(RNG.normal(size=(1, 4, 8)))
        with pytest.raises(T.ShapeError):
            mha(x, valid=np.ones((1, 5), dtype=bool))

    def test_width_not_divisible_by_heads(self):
        with pytest.raises(T.ShapeError):
            MultiHeadAttention(10, 3, "attn", np.random.default_rng(0))

    def test_gradients_through_attention(self):
        mha = make_mha()
        x = Tensor(RNG.normal(size=(1, 3, 8)), requires_grad=True)
        p = RNG.normal(size=(1, 3, 8))
        inputs = [x] + mha.parameters()
        check_op(lambda *_: projection_loss(mha(x)[0], p), inputs)


class TestTransformerBlock:
    def test_output_finite_and_shaped(self):
        block = TransformerBlock(8, 2, 16, "blk", np.random.default_rng(1))
        x = Tensor(RNG.normal(size=(2, 5, 8)) * 10)
        out, weights = block(x)
        assert out.data.shape == (2, 5, 8)
        assert np.all(np.isfinite(out.data))
        np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_gradients_through_block(self):
        block = TransformerBlock(6, 2, 8, "blk", np.random.default_rng(2))
        x = Tensor(RNG.normal(size=(1, 3, 6)), requires_grad=True)
        p = RNG.normal(size=(1, 3, 6))
        check_op(lambda *_: projection_loss(block(x)[0], p),
                 [x] + block.parameters(), tol=1e-4)


class TestBLSTM:
    def test_output_width_is_twice_hidden(self):
        blstm = BLSTM(6, 5, 2, "lstm", np.random.default_rng(3))
        x = Tensor(RNG.normal(size=(2, 7, 6)))
        out = blstm(x)
        assert out.data.shape == (2, 7, 10)
        assert blstm.out_width == 10

    def test_backward_direction_sees_the_future(self):
        # perturbing a later timestep must change an earlier output position
        blstm = BLSTM(4, 3, 1, "lstm", np.random.default_rng(4))
        x = RNG.normal(size=(1, 6, 4))
        base = blstm(Tensor(x)).data.copy()
        x2 = x.copy()
        x2[0, 5] += 1.0
        out2 = blstm(Tensor(x2)).data
        assert not np.allclose(base[0, 0], out2[0, 0])

    def test_single_direction_is_causal(self):
        from polyg2p.layers import LSTMLayer
        lstm = LSTMLayer(4, 3, "l", np.random.default_rng(5))
        x = RNG.normal(size=(1, 6, 4))
        base = lstm(Tensor(x)).data.copy()
        x2 = x.copy()
        x2[0, 5] += 1.0
        out2 = lstm(Tensor(x2)).data
        np.testing.assert_allclose(base[0, :5], out2[0, :5], atol=1e-12)
        assert not np.allclose(base[0, 5], out2[0, 5])

    def test_gradients_through_blstm(self):
        blstm = BLSTM(3, 2, 1, "lstm", np.random.default_rng(6))
        x = Tensor(RNG.normal(size=(1, 4, 3)), requires_grad=True)
        p = RNG.normal(size=(1, 4, 4))
        check_op(lambda *_: projection_loss(blstm(x), p),
                 [x] + blstm.parameters(), tol=1e-4)


class TestLinear:
    def test_bias_broadcasts_over_batch_and_length(self):
        lin = Linear(4, 3, "fc", np.random.default_rng(8))
        x = Tensor(RNG.normal(size=(2, 5, 4)))
        out = lin(x)
        assert out.data.shape == (2, 5, 3)
        expect = x.data @ lin.W.data + lin.b.data
        np.testing.assert_allclose(out.data, expect, atol=1e-12)
