import numpy as np
import pytest

import windformer.tensor as T
from windformer.errors import ShapeError
from windformer.temporal import (
    BidirectionalRecurrent,
    ConvGRUCell,
    TurbineEmbed,
    make_temporal_encoder,
    run_direction,
)
from windformer.tensor import Tensor, backward

from conftest import finite_difference, rel_err


def make_cell(rng, in_ch=3, hidden=4, k=3):
    return ConvGRUCell(in_ch, hidden, k, np.random.default_rng(rng))


def seq_of(arrs):
    return [Tensor(a) for a in arrs]


class TestConvGRUCell:
    def test_zero_is_fixed_point_with_zero_biases(self):
        cell = make_cell(0)
        x = Tensor(np.zeros((2, 3, 5, 5), dtype=np.float32))
        h = cell.init_state(2, 5, 5, np.float32)
        out = cell.step(x, h)
        assert np.array_equal(out.data, np.zeros((2, 4, 5, 5)))

    def test_saturated_update_gate_keeps_previous_state(self, rng):
        cell = make_cell(1)
        cell.update.bias.data = np.full(4, -30.0, dtype=np.float32)  # z ~ 0
        x = Tensor(rng.normal(size=(1, 3, 4, 4)).astype(np.float32))
        h = Tensor(rng.normal(size=(1, 4, 4, 4)).astype(np.float32))
        out = cell.step(x, h)
        assert np.max(np.abs(out.data - h.data)) < 1e-3

    def test_spatial_mismatch_raises(self):
        cell = make_cell(2)
        with pytest.raises(ShapeError):
            cell.step(Tensor(np.zeros((1, 3, 4, 4), dtype=np.float32)),
                      Tensor(np.zeros((1, 4, 5, 5), dtype=np.float32)))

    def test_gradient_through_chained_steps(self, rng):
        cell = ConvGRUCell(2, 2, 3, np.random.default_rng(3))
        cell.to_dtype(np.float64)
        xs = [rng.normal(size=(1, 2, 3, 3)) for _ in range(3)]
        probe = rng.normal(size=(1, 2, 3, 3))

        def loss_value(flat_w):
            cell.candidate.weight.data = flat_w.reshape(cell.candidate.weight.shape)
            with T.no_grad():
                outs = run_direction(cell, seq_of(xs))
                return float((outs[-1].data * probe).sum())

        w0 = cell.candidate.weight.data.copy()
        outs = run_direction(cell, seq_of(xs))
        backward(T.tsum(T.mul(outs[-1], Tensor(probe))))
        auto = cell.candidate.weight.grad.copy()
        fd = finite_difference(loss_value, w0.ravel(), h=1e-5).reshape(w0.shape)
        cell.candidate.weight.data = w0
        assert rel_err(auto, fd) < 1e-3


class TestBidirectional:
    def make_bi(self, seed=0, in_ch=2, hidden=3):
        r = np.random.default_rng(seed)
        return BidirectionalRecurrent(
            ConvGRUCell(in_ch, hidden, 3, r), ConvGRUCell(in_ch, hidden, 3, r)
        )

    def test_single_step_has_double_channels(self, rng):
        bi = self.make_bi()
        outs = bi(seq_of([rng.normal(size=(2, 2, 4, 4)).astype(np.float32)]))
        assert len(outs) == 1
        assert outs[0].shape == (2, 6, 4, 4)
        # both halves computed from the single scene: neither is zero
        assert np.abs(outs[0].data[:, :3]).sum() > 0
        assert np.abs(outs[0].data[:, 3:]).sum() > 0

    def test_zero_input_zero_biases_gives_zero(self):
        bi = self.make_bi()
        outs = bi(seq_of([np.zeros((1, 2, 4, 4), dtype=np.float32)] * 4))
        for o in outs:
            assert np.array_equal(o.data, np.zeros_like(o.data))

    def test_time_reversal_symmetry(self, rng):
        bi = self.make_bi(seed=5)
        xs = [rng.normal(size=(1, 2, 4, 4)).astype(np.float32) for _ in range(5)]
        outs = bi(seq_of(xs))
        swapped = BidirectionalRecurrent(bi.backward_cell, bi.forward_cell)
        rev_outs = swapped(seq_of(xs[::-1]))
        hidden = 3
        for t in range(5):
            fwd_half = outs[t].data[:, :hidden]
            bwd_half = outs[t].data[:, hidden:]
            mirrored = rev_outs[4 - t].data
            assert np.array_equal(mirrored[:, :hidden], bwd_half)
            assert np.array_equal(mirrored[:, hidden:], fwd_half)

    def test_causality_of_each_half(self, rng):
        bi = self.make_bi(seed=7)
        xs = [rng.normal(size=(1, 2, 4, 4)).astype(np.float32) for _ in range(4)]
        base = bi(seq_of(xs))
        t = 1
        hidden = 3
        # perturbing x_{t+1} leaves the forward half at t bit-identical
        bumped = [x.copy() for x in xs]
        bumped[t + 1] += 1.0
        out_b = bi(seq_of(bumped))
        assert np.array_equal(out_b[t].data[:, :hidden], base[t].data[:, :hidden])
        assert not np.array_equal(out_b[t].data[:, hidden:], base[t].data[:, hidden:])
        # perturbing x_{t-1} leaves the backward half at t bit-identical
        bumped = [x.copy() for x in xs]
        bumped[t - 1] += 1.0
        out_b = bi(seq_of(bumped))
        assert np.array_equal(out_b[t].data[:, hidden:], base[t].data[:, hidden:])
        assert not np.array_equal(out_b[t].data[:, :hidden], base[t].data[:, :hidden])

    def test_empty_sequence_rejected(self):
        with pytest.raises(ShapeError, match="empty"):
            self.make_bi()([])

    def test_spatial_dims_preserved_by_all_variants(self, rng):
        x = [rng.normal(size=(1, 6, 5, 7)).astype(np.float32) for _ in range(2)]
        for variant in ("empty", "bi-convrnn", "bi-convlstm", "bi-gru", "convgru",
                        "bi-convgru"):
            enc = make_temporal_encoder(variant, 6, 4, 3, np.random.default_rng(0))
            outs = enc(seq_of(x))
            assert all(o.shape[2:] == (5, 7) for o in outs)
            assert all(o.shape[1] == enc.out_channels for o in outs)


class TestBiGruVariant:
    def test_no_spatial_mixing(self, rng):
        enc = make_temporal_encoder("bi-gru", 2, 3, 3, np.random.default_rng(1))
        xs = [rng.normal(size=(1, 2, 4, 4)).astype(np.float32) for _ in range(3)]
        base = enc(seq_of(xs))
        bumped = [x.copy() for x in xs]
        bumped[0][0, :, 2, 2] += 5.0
        out = enc(seq_of(bumped))
        for t in range(3):
            delta = np.abs(out[t].data - base[t].data) > 0
            changed = np.argwhere(delta.any(axis=(0, 1)))
            assert changed.tolist() == [[2, 2]]


class TestTurbineEmbed:
    def test_identity_weight_returns_time_concatenation(self, rng):
        embed = TurbineEmbed(2, 3, 6, np.random.default_rng(0))
        embed.proj.weight.data = np.eye(6, dtype=np.float32)
        embed.proj.bias.data = np.zeros(6, dtype=np.float32)
        xs = [rng.normal(size=(1, 3, 2, 2)).astype(np.float32) for _ in range(2)]
        out = embed(seq_of(xs))
        concat = np.concatenate([x for x in xs], axis=1).transpose(0, 2, 3, 1)
        assert np.array_equal(out.data, concat)

    def test_cell_locality_under_permutation(self, rng):
        embed = TurbineEmbed(2, 3, 5, np.random.default_rng(2))
        xs = [rng.normal(size=(1, 3, 3, 3)).astype(np.float32) for _ in range(2)]
        out = embed(seq_of(xs)).data
        swapped = [x.copy() for x in xs]
        for x in swapped:
            x[:, :, 0, 0], x[:, :, 2, 1] = x[:, :, 2, 1].copy(), x[:, :, 0, 0].copy()
        out_sw = embed(seq_of(swapped)).data
        assert np.array_equal(out_sw[:, 0, 0], out[:, 2, 1])
        assert np.array_equal(out_sw[:, 2, 1], out[:, 0, 0])
        out_sw[:, 0, 0] = out[:, 0, 0]
        out_sw[:, 2, 1] = out[:, 2, 1]
        assert np.array_equal(out_sw, out)

    def test_gradient(self, rng):
        embed = TurbineEmbed(2, 2, 3, np.random.default_rng(4))
        embed.to_dtype(np.float64)
        xs = [rng.normal(size=(1, 2, 2, 2)) for _ in range(2)]
        probe = rng.normal(size=(1, 2, 2, 3))

        def f(flat):
            embed.proj.weight.data = flat.reshape(embed.proj.weight.shape)
            with T.no_grad():
                return float((embed(seq_of(xs)).data * probe).sum())

        w0 = embed.proj.weight.data.copy()
        out = embed(seq_of(xs))
        backward(T.tsum(T.mul(out, Tensor(probe))))
        fd = finite_difference(f, w0.ravel(), h=1e-6).reshape(w0.shape)
        assert rel_err(embed.proj.weight.grad, fd) < 1e-4

    def test_wrong_channel_count_raises(self, rng):
        embed = TurbineEmbed(2, 3, 5, np.random.default_rng(0))
        with pytest.raises(ShapeError, match="per-cell features"):
            embed(seq_of([rng.normal(size=(1, 4, 2, 2)).astype(np.float32)] * 2))
