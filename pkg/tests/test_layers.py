import numpy as np
import pytest

from tokconf import autodiff as ad
from tokconf.autodiff import Tape, Tensor, finite_diff_check
from tokconf.layers import (
    AttentionBlock,
    BiLSTMLayer,
    Embedding,
    Linear,
    LSTMCell,
    StepMask,
    bilstm,
    embed,
    key_padding_bias,
    layer_norm_rows,
    lstm_step,
    self_attention_encode,
    sinusoidal_positions,
)


def rng(seed=0):
    return np.random.default_rng(seed)


class TestEmbedding:
    def test_one_hot_lookup(self):
        table = Embedding(4, 4, rng())
        table.weights = Tensor(np.eye(4), requires_grad=True)
        out = embed(table, [2])
        np.testing.assert_array_equal(out.data, [[0, 0, 1, 0]])

    def test_empty_sequence(self):
        table = Embedding(4, 3, rng())
        assert embed(table, []).shape == (0, 3)

    def test_duplicate_ids_give_identical_rows(self):
        table = Embedding(6, 3, rng())
        out = embed(table, [5, 1, 5]).data
        np.testing.assert_array_equal(out[0], out[2])

    def test_out_of_range_names_position_and_id(self):
        table = Embedding(4, 3, rng())
        with pytest.raises(ValueError, match=r"token id 9 at position 1"):
            embed(table, [0, 9])

    def test_gradient(self):
        table = Embedding(5, 3, rng(3))
        err = finite_diff_check(
            lambda w: ad.tsum(ad.tanh(ad.gather_rows(w, [0, 2, 2, 4]))),
            table.weights,
        )
        assert err < 1e-4


class TestLSTMCell:
    def test_zero_params_closed_form(self):
        cell = LSTMCell(2, 3, rng())
        for p in cell.params():
            p.data[:] = 0.0
        c_prev = np.array([[0.3, -0.4, 1.2]])
        h, c = lstm_step(cell, Tensor([[1.0, -1.0]]), Tensor(np.zeros((1, 3))), Tensor(c_prev))
        np.testing.assert_allclose(c.data, 0.5 * c_prev, atol=1e-15)
        np.testing.assert_allclose(h.data, 0.5 * np.tanh(0.5 * c_prev), atol=1e-15)

    def test_zero_everything_gives_zero_state(self):
        cell = LSTMCell(2, 3, rng())
        for p in cell.params():
            p.data[:] = 0.0
        h, c = lstm_step(cell, Tensor(np.zeros((1, 2))), *cell.initial_state(1))
        np.testing.assert_array_equal(h.data, np.zeros((1, 3)))

    def test_matches_hand_computed_recurrence(self):
        # Independent evaluation of the gate formulas on a 2-dim state.
        r = rng(11)
        cell = LSTMCell(2, 2, r)
        x = r.uniform(-1, 1, (1, 2))
        h0 = r.uniform(-1, 1, (1, 2))
        c0 = r.uniform(-1, 1, (1, 2))

        pre = x @ cell.w_x.data + h0 @ cell.w_h.data + cell.bias.data

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        i, f, g, o = sig(pre[:, 0:2]), sig(pre[:, 2:4]), np.tanh(pre[:, 4:6]), sig(pre[:, 6:8])
        c_ref = f * c0 + i * g
        h_ref = o * np.tanh(c_ref)

        h, c = lstm_step(cell, Tensor(x), Tensor(h0), Tensor(c0))
        np.testing.assert_allclose(h.data, h_ref, atol=1e-14)
        np.testing.assert_allclose(c.data, c_ref, atol=1e-14)

    def test_shape_mismatch(self):
        cell = LSTMCell(2, 3, rng())
        with pytest.raises(ad.ShapeError):
            lstm_step(cell, Tensor(np.zeros((1, 5))), *cell.initial_state(1))

    def test_gradients(self):
        r = rng(5)
        cell = LSTMCell(2, 3, r)
        x = Tensor(r.uniform(-1, 1, (2, 2)))
        for p in cell.params():
            def f(_):
                h, c = cell.step(x, *cell.initial_state(2))
                return ad.tsum(ad.mul(h, h))
            assert finite_diff_check(f, p) < 1e-4


class TestBiLSTM:
    def test_length_one_symmetry(self):
        r = rng(2)
        fwd, bwd = LSTMCell(3, 2, r), LSTMCell(3, 2, r)
        x = Tensor(r.uniform(-1, 1, (1, 3)))
        out = bilstm(fwd, bwd, x)
        assert out.shape == (1, 4)
        hf, _ = fwd.step(ad.narrow(x, 0, 0, 1), *fwd.initial_state(1))
        hb, _ = bwd.step(ad.narrow(x, 0, 0, 1), *bwd.initial_state(1))
        np.testing.assert_allclose(out.data, np.concatenate([hf.data, hb.data], axis=1))

    def test_reversal_swaps_roles(self):
        r = rng(3)
        pf, pb = LSTMCell(3, 2, r), LSTMCell(3, 2, r)
        x = r.uniform(-1, 1, (3, 3))
        direct = bilstm(pf, pb, Tensor(x)).data
        swapped = bilstm(pb, pf, Tensor(x[::-1].copy())).data
        # Row-reversing the swapped run and swapping halves recovers direct.
        recovered = np.concatenate(
            [swapped[::-1, 2:], swapped[::-1, :2]], axis=1
        )
        np.testing.assert_allclose(direct, recovered, atol=1e-14)

    def test_zero_params_zero_input_rows_equal(self):
        r = rng(4)
        pf, pb = LSTMCell(3, 2, r), LSTMCell(3, 2, r)
        for p in pf.params() + pb.params():
            p.data[:] = 0.0
        out = bilstm(pf, pb, Tensor(np.zeros((4, 3)))).data
        assert np.all(out == out[0])

    def test_empty_sequence_rejected(self):
        r = rng(0)
        with pytest.raises(ValueError, match="T >= 1"):
            bilstm(LSTMCell(3, 2, r), LSTMCell(3, 2, r), Tensor(np.zeros((0, 3))))

    def test_output_width_is_twice_hidden(self):
        r = rng(9)
        layer = BiLSTMLayer(3, 5, r)
        xs = [Tensor(r.uniform(-1, 1, (2, 3))) for _ in range(3)]
        outs = layer.run(xs)
        assert all(o.shape == (2, 10) for o in outs)

    def test_masked_carry_matches_unpadded_run(self):
        r = rng(12)
        layer = BiLSTMLayer(2, 3, r)
        xs_real = [Tensor(r.uniform(-1, 1, (1, 2))) for _ in range(3)]
        plain = layer.run(xs_real)

        pad = [Tensor(np.zeros((1, 2))) for _ in range(2)]
        mask = StepMask(np.array([[True, True, True, False, False]]))
        padded = layer.run(xs_real + pad, step_mask=mask)
        for t in range(3):
            np.testing.assert_allclose(padded[t].data, plain[t].data, atol=1e-15)

    def test_gradients(self):
        r = rng(6)
        layer = BiLSTMLayer(2, 2, r)
        xs = [Tensor(r.uniform(-1, 1, (1, 2))) for _ in range(3)]
        for p in layer.params():
            def f(_):
                outs = layer.run(xs)
                return ad.tsum(ad.mul(outs[1], outs[1]))
            assert finite_diff_check(f, p) < 1e-4


class TestLinear:
    def test_gradient(self):
        r = rng(8)
        lin = Linear(3, 2, r)
        x = Tensor(r.uniform(-1, 1, (4, 3)))
        for p in lin.params():
            assert finite_diff_check(lambda _: ad.tsum(ad.tanh(lin(x))), p) < 1e-4


class TestAttention:
    def test_single_unmasked_position_attends_to_self(self):
        r = rng(1)
        block = AttentionBlock(4, 2, 4, r)
        x = Tensor(r.uniform(-1, 1, (3, 4)))
        bias = key_padding_bias([True, False, False])
        for weights in block.attention_weights(x, bias):
            np.testing.assert_allclose(weights[:, 0], 1.0, atol=1e-12)
            np.testing.assert_allclose(weights[:, 1:], 0.0, atol=0.0)

    def test_weights_sum_to_one_over_unmasked(self):
        r = rng(2)
        block = AttentionBlock(4, 2, 4, r)
        x = Tensor(r.uniform(-1, 1, (5, 4)))
        mask = np.array([True, True, True, False, False])
        bias = key_padding_bias(mask)
        for weights in block.attention_weights(x, bias):
            np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-9)
            assert np.all(weights[:, ~mask] == 0.0)

    def test_permutation_equivariance_without_positions(self):
        r = rng(3)
        blocks = [AttentionBlock(4, 2, 4, r) for _ in range(2)]
        x = r.uniform(-1, 1, (3, 4))
        mask = np.ones(3, dtype=bool)
        perm = np.array([2, 0, 1])
        direct = self_attention_encode(blocks, Tensor(x), mask).data
        permuted = self_attention_encode(blocks, Tensor(x[perm]), mask).data
        np.testing.assert_allclose(permuted, direct[perm], atol=1e-12)

    def test_masked_tail_does_not_change_unmasked_outputs(self):
        r = rng(4)
        blocks = [AttentionBlock(4, 2, 4, r) for _ in range(2)]
        x = r.uniform(-1, 1, (3, 4))
        short = self_attention_encode(blocks, Tensor(x), np.ones(3, dtype=bool)).data

        padded_x = np.vstack([x, r.uniform(-1, 1, (2, 4))])
        mask = np.array([True, True, True, False, False])
        long = self_attention_encode(blocks, Tensor(padded_x), mask).data
        np.testing.assert_allclose(long[:3], short, atol=1e-12)

    def test_all_masked_rejected(self):
        r = rng(5)
        block = AttentionBlock(4, 2, 4, r)
        with pytest.raises(ValueError, match="masked"):
            self_attention_encode([block], Tensor(np.zeros((2, 4))), [False, False])

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            AttentionBlock(5, 2, 5, rng())

    def test_gradients(self):
        r = rng(7)
        block = AttentionBlock(4, 2, 4, r)
        x = Tensor(r.uniform(-1, 1, (3, 4)))
        bias = key_padding_bias(np.ones(3, dtype=bool))
        for p in block.params():
            def f(_):
                out = block(x, bias)
                return ad.tsum(ad.mul(out, out))
            assert finite_diff_check(f, p) < 1e-4


class TestLayerNorm:
    def test_normalizes_rows(self):
        r = rng(0)
        x = Tensor(r.uniform(-3, 3, (4, 6)))
        out = layer_norm_rows(x, Tensor(np.ones(6)), Tensor(np.zeros(6))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-4)

    def test_gradient(self):
        r = rng(1)
        gain = Tensor(np.ones(4), requires_grad=True)
        bias = Tensor(np.zeros(4), requires_grad=True)
        x = Tensor(r.uniform(-1, 1, (3, 4)), requires_grad=True)
        for p in (x, gain, bias):
            def f(_):
                out = layer_norm_rows(x, gain, bias)
                return ad.tsum(ad.mul(out, out))
            assert finite_diff_check(f, p) < 1e-4


class TestPositions:
    def test_shape_and_range(self):
        table = sinusoidal_positions(7, 6)
        assert table.shape == (7, 6)
        assert np.all(np.abs(table) <= 1.0)

    def test_first_row_is_sin0_cos0(self):
        table = sinusoidal_positions(3, 4)
        np.testing.assert_allclose(table[0], [0.0, 1.0, 0.0, 1.0])
