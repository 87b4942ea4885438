"""Tests for the triple-attention calibration block."""

import numpy as np
import pytest

from app.models.schemas import Dimension
from app.services.mta import (
    FrameStatistics,
    MtaBlock,
    aggregation_gate,
    dimension_select,
    global_stream,
    local_stream,
    mta_forward,
)
from app.services.tensor import ShapeError, Tensor, no_grad

SHAPE = (4, 6, 8, 6)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def _zero_generators(block: MtaBlock) -> None:
    for source in block.sources.values():
        source.net.w_meta2.data = np.zeros_like(source.net.w_meta2.data)


class TestDimensionSelect:
    """Statistics for each calibrated view."""

    def test_view_shapes(self, rng):
        """Channel, temporal and spatial statistics have their documented shapes."""
        x = Tensor(rng.normal(size=(3, 4, 2, 2)))
        assert dimension_select(x, Dimension.CHANNEL).s.shape == (4, 3)
        assert dimension_select(x, Dimension.TEMPORAL).s.shape == (1, 4)
        assert dimension_select(x, Dimension.SPATIAL).s.shape == (4, 2, 2)

    def test_restore_broadcasts_onto_input(self, rng):
        """Restored statistics broadcast against the C x T x H x W input."""
        x = Tensor(rng.normal(size=(3, 4, 2, 2)))
        expected = {Dimension.CHANNEL: (3, 4, 1, 1), Dimension.TEMPORAL: (1, 4, 1, 1), Dimension.SPATIAL: (1, 4, 2, 2)}
        for dim, shape in expected.items():
            stats = dimension_select(x, dim)
            assert stats.restore(stats.s).shape == shape

    def test_channel_statistics_are_frame_means(self, rng):
        """Channel statistics are per-frame spatial means."""
        x = rng.normal(size=(3, 4, 2, 2))
        stats = dimension_select(Tensor(x), "channel")
        np.testing.assert_allclose(stats.s.data, x.mean(axis=(2, 3)).T)

    def test_rejects_wrong_rank(self):
        """Only rank-4 maps are accepted."""
        with pytest.raises(ShapeError):
            dimension_select(Tensor(np.ones((2, 3, 4))), Dimension.CHANNEL)


class TestStreams:
    """Global and local calibration streams."""

    def test_global_stream_hand_example(self):
        """Bottleneck then expansion of a two-value input."""
        out = global_stream(Tensor([1.0, 2.0]), Tensor([[1.0, 1.0]]), Tensor([[1.0], [2.0]]))
        np.testing.assert_allclose(out.data, [3.0, 6.0])

    def test_local_identity_kernels(self, rng):
        """Delta kernels of any odd size leave the statistics unchanged."""
        s = Tensor(rng.normal(size=(3, 5)))
        np.testing.assert_allclose(local_stream(s, Tensor([1.0])).data, s.data)
        np.testing.assert_allclose(local_stream(s, Tensor([0.0, 1.0, 0.0])).data, s.data)

    def test_local_stream_is_local(self, rng):
        """Perturbing position ``i`` only changes outputs within ``k // 2`` of it."""
        s = rng.normal(size=9)
        kernel = Tensor(rng.normal(size=3))
        base = local_stream(Tensor(s), kernel).data
        bumped = s.copy()
        bumped[4] += 1.0
        changed = np.flatnonzero(local_stream(Tensor(bumped), kernel).data != base)
        assert set(changed) <= {3, 4, 5}

    def test_spatial_local_stream_keeps_extent(self, rng):
        """2D local streams keep the frame extent."""
        s = Tensor(rng.normal(size=(4, 8, 6)))
        assert local_stream(s, Tensor(rng.normal(size=(5, 5)))).shape == (4, 8, 6)


class TestGate:
    """Soft aggregation weights."""

    def test_zero_weights_give_half(self, rng):
        """Zero gate weights give 0.5 for every stream."""
        stats = dimension_select(Tensor(rng.normal(size=(2, 3, 2, 2))), Dimension.TEMPORAL)
        gate = aggregation_gate(stats, Tensor(np.zeros((3, 3))))
        np.testing.assert_allclose(gate.g.data, 0.5)

    def test_unit_weight_on_pooled_spatial_statistics(self):
        """``GAP(s) = 2`` with weight 1 gives ``sigmoid(2)`` for both streams."""
        stats = FrameStatistics(dim=Dimension.SPATIAL, s=Tensor(np.full((1, 2, 2), 2.0)), input_shape=(1, 1, 2, 2))
        gate = aggregation_gate(stats, Tensor(np.ones((2, 1))))
        np.testing.assert_allclose(gate.g.data, [[0.8807970779778823, 0.8807970779778823]], atol=1e-12)
        assert gate.stream(2).shape == (1, 1)

    def test_stream_index_is_one_based(self):
        """Streams are numbered from 1 to L + 1."""
        stats = FrameStatistics(dim=Dimension.TEMPORAL, s=Tensor(np.ones((1, 2))), input_shape=(1, 2, 1, 1))
        gate = aggregation_gate(stats, Tensor(np.zeros((3, 2))))
        with pytest.raises(IndexError):
            gate.stream(0)
        with pytest.raises(IndexError):
            gate.stream(4)


class TestMtaBlock:
    """Full calibration ``X * sigmoid(gated streams)``."""

    @pytest.mark.parametrize("dim", list(Dimension))
    def test_zero_generated_weights_halve_input(self, rng, dim):
        """Zero generated weights make the attention 0.5 everywhere."""
        block = MtaBlock(dim, *SHAPE, rng=rng)
        _zero_generators(block)
        x = rng.normal(size=SHAPE)
        np.testing.assert_allclose(mta_forward(Tensor(x), block).data, 0.5 * x, rtol=1e-15, atol=0)

    @pytest.mark.parametrize("dim", list(Dimension))
    def test_output_bounded_by_input(self, rng, dim):
        """Calibration never increases a magnitude."""
        block = MtaBlock(dim, *SHAPE, rng=rng)
        x = rng.normal(size=SHAPE) * 3.0
        out = block(Tensor(x)).data
        assert out.shape == SHAPE
        assert np.all(np.abs(out) <= np.abs(x))

    @pytest.mark.parametrize("dim", list(Dimension))
    def test_matches_composed_streams(self, rng, dim):
        """Forward equals the gated sum of separately computed streams."""
        block = MtaBlock(dim, *SHAPE, rng=rng)
        for _ in range(10):
            x = rng.normal(size=SHAPE)
            with no_grad():
                calibration = block.calibrate(Tensor(x))
                out = block(Tensor(x)).data
            g = calibration.gate.g.data
            extra = (1,) * (calibration.f_global.ndim - 2)
            total = g[:, -1].reshape((-1, 1) + extra) * calibration.f_global.data
            for index, k in enumerate(block.kernel_set):
                total = total + g[:, index].reshape((-1, 1) + extra) * calibration.f_locals[k].data
            attention = _sigmoid(total)
            np.testing.assert_allclose(calibration.attention.data, attention, atol=1e-12)
            np.testing.assert_allclose(out, calibration.stats.restore(Tensor(attention)).data * x, atol=1e-12)

    def test_channel_attention_follows_frame_order(self, rng):
        """Permuting frames permutes the calibrated output the same way."""
        block = MtaBlock(Dimension.CHANNEL, *SHAPE, rng=rng)
        x = rng.normal(size=SHAPE)
        perm = rng.permutation(SHAPE[1])
        with no_grad():
            out = block(Tensor(x)).data
            permuted = block(Tensor(x[:, perm])).data
        np.testing.assert_allclose(permuted, out[:, perm], atol=1e-12)

    @pytest.mark.parametrize("dim", list(Dimension))
    def test_static_block_with_generated_values_matches_meta(self, rng, dim):
        """Static weights set to the generated values reproduce the meta block."""
        meta = MtaBlock(dim, *SHAPE, rng=rng, mode="meta")
        static = MtaBlock(dim, *SHAPE, rng=rng, mode="static")
        x = rng.normal(size=SHAPE)
        with no_grad():
            generated = meta.calibrate(Tensor(x)).params
            for name, source in static.sources.items():
                source.weight.data = generated[name].data.copy()
            np.testing.assert_allclose(static(Tensor(x)).data, meta(Tensor(x)).data, atol=1e-12)

    def test_gate_off_uses_unit_weights(self, rng):
        """Without the gate every stream has weight 1."""
        block = MtaBlock(Dimension.TEMPORAL, *SHAPE, rng=rng, gate=False)
        assert "gate" not in block.sources
        calibration = block.calibrate(Tensor(rng.normal(size=SHAPE)))
        np.testing.assert_array_equal(calibration.gate.g.data, np.ones((1, 4)))

    def test_every_dimension_shares_one_block_type(self, rng):
        """All three dimensions use the same block with L + 1 streams."""
        blocks = [MtaBlock(dim, *SHAPE, rng=rng) for dim in Dimension]
        assert {type(b) for b in blocks} == {MtaBlock}
        assert [b.streams for b in blocks] == [4, 4, 4]

    def test_ratio_must_divide_extent(self, rng):
        """The reduction ratio must divide the calibrated extent."""
        with pytest.raises(ShapeError):
            MtaBlock(Dimension.CHANNEL, 3, 6, 4, 4, rng=rng, ratio=2)

    def test_rejects_other_input_shape(self, rng):
        """Inputs must match the shape the block was built for."""
        block = MtaBlock(Dimension.TEMPORAL, *SHAPE, rng=rng)
        with pytest.raises(ShapeError):
            block(Tensor(np.ones((4, 6, 4, 6))))
