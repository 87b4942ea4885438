"""Triple attention: one calibration block applied to spatial, channel or temporal views.

The block is identical for the three dimensions; only :func:`dimension_select`
differs. Each block mixes a global bottleneck stream with one local
convolution stream per kernel size under a soft gate, and rescales the input
with the sigmoid of the gated sum.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from app.models.schemas import Dimension
from app.services.mhn import ParamSource, compute_statistics, make_param_source
from app.services.tensor import (
    Module,
    ShapeError,
    Tensor,
    conv,
    dense,
    elementwise,
    leaky_relu,
    reduce,
    sigmoid,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FrameStatistics:
    """Statistics of the selected view plus the mapping back onto the input.

    ``s`` is ``(frames, C)`` for the channel view, ``(1, T)`` for the temporal
    view and ``(T, H, W)`` (channel-mean map) for the spatial view.
    """

    dim: Dimension
    s: Tensor
    input_shape: tuple[int, int, int, int]

    def pooled(self) -> Tensor:
        """Gate input: the view's statistics averaged down to one vector per row."""
        if self.dim is Dimension.SPATIAL:
            frames = self.s.shape[0]
            return reduce(self.s, "mean", (1, 2)).reshape(frames, 1)
        return self.s

    def restore(self, attention: Tensor) -> Tensor:
        """Map view-shaped attention to a tensor broadcast-compatible with the input."""
        channels, frames, height, width = self.input_shape
        if attention.shape != self.s.shape:
            raise ShapeError(f"attention {attention.shape} does not match view {self.s.shape}")
        if self.dim is Dimension.CHANNEL:
            return attention.transpose(1, 0).reshape(channels, frames, 1, 1)
        if self.dim is Dimension.TEMPORAL:
            return attention.reshape(1, frames, 1, 1)
        return attention.reshape(1, frames, height, width)


def dimension_select(x: Tensor, dim: Dimension | str) -> FrameStatistics:
    dim = Dimension(dim)
    if x.ndim != 4:
        raise ShapeError(f"dimension_select expects C x T x H x W, got {x.shape}")
    channels, frames, height, width = x.shape
    if dim is Dimension.CHANNEL:
        s = reduce(x, "mean", (2, 3)).reshape(channels, frames).transpose(1, 0)
    elif dim is Dimension.TEMPORAL:
        s = reduce(x, "mean", (0, 2, 3)).reshape(1, frames)
    else:
        s = reduce(x, "mean", (0,)).reshape(frames, height, width)
    return FrameStatistics(dim=dim, s=s, input_shape=x.shape)


@dataclass(frozen=True)
class GateWeights:
    """Soft aggregation weights, one row per calibrated frame, ``L + 1`` columns."""

    g: Tensor

    @property
    def streams(self) -> int:
        return self.g.shape[-1]

    def stream(self, index: int) -> Tensor:
        """Column ``index`` (1-based; ``L + 1`` weights the global stream) as ``(rows, 1)``."""
        if not 1 <= index <= self.streams:
            raise IndexError(f"gate stream {index} outside 1..{self.streams}")
        return self.g[:, index - 1 : index]


def global_stream(s: Tensor, w_g1: Tensor, w_g2: Tensor) -> Tensor:
    return dense(leaky_relu(dense(s, w_g1)), w_g2)


def spatial_global_stream(s: Tensor, row_weights: Sequence[Tensor], col_weights: Sequence[Tensor]) -> Tensor:
    """Bottleneck over the row profile plus bottleneck over the column profile."""
    frames, height, width = s.shape
    rows = reduce(s, "mean", (2,)).reshape(frames, height)
    cols = reduce(s, "mean", (1,)).reshape(frames, width)
    f_rows = global_stream(rows, *row_weights).reshape(frames, height, 1)
    f_cols = global_stream(cols, *col_weights).reshape(frames, 1, width)
    return f_rows + f_cols


def local_stream(s: Tensor, kernel: Tensor) -> Tensor:
    """Same-extent convolution of the view statistics with one kernel.

    A rank-1 kernel convolves along the last axis (channel/temporal views), a
    rank-2 kernel over the trailing ``H x W`` axes (spatial view).
    """
    dims = kernel.ndim
    if dims not in (1, 2):
        raise ShapeError(f"local_stream kernel must be rank 1 or 2, got {kernel.shape}")
    if s.ndim == dims:
        return conv(s, kernel, dims=dims)
    lead = s.shape[:-dims]
    rows = int(np.prod(lead))
    batched = s.reshape((rows, 1) + s.shape[-dims:])
    out = conv(batched, kernel.reshape((1, 1) + kernel.shape), dims=dims)
    return out.reshape(s.shape)


def aggregation_gate(stats: FrameStatistics, weight: Tensor) -> GateWeights:
    return GateWeights(g=sigmoid(dense(stats.pooled(), weight)))


def combine_streams(gate: GateWeights, f_global: Tensor, f_locals: Sequence[Tensor]) -> Tensor:
    """Gated sum ``g[L+1] * f_global + sum_l g[l] * f_local[l]`` (before the sigmoid)."""
    extra = f_global.ndim - 2

    def column(index: int) -> Tensor:
        col = gate.stream(index)
        return col.reshape(col.shape + (1,) * extra) if extra else col

    total = elementwise(column(len(f_locals) + 1), f_global, "mul")
    for index, f_local in enumerate(f_locals, start=1):
        total = total + elementwise(column(index), f_local, "mul")
    return total


@dataclass(frozen=True)
class Calibration:
    """Everything one block computed for one input."""

    stats: FrameStatistics
    params: dict[str, Tensor]
    gate: GateWeights
    f_global: Tensor
    f_locals: dict[int, Tensor]
    attention: Tensor
    full: Tensor


class MtaBlock(Module):
    """Triple-attention unit for one dimension at a fixed feature-map shape."""

    def __init__(
        self,
        dim: Dimension | str,
        channels: int,
        frames: int,
        height: int,
        width: int,
        *,
        rng: np.random.Generator,
        kernel_set: Sequence[int] = (1, 3, 5),
        ratio: int = 2,
        mode: str = "meta",
        gate: bool = True,
    ) -> None:
        self.dim = Dimension(dim)
        self.input_shape = (channels, frames, height, width)
        self.kernel_set = tuple(int(k) for k in kernel_set)
        self.ratio = int(ratio)
        self.mode = mode
        self.gate_enabled = gate
        if not self.kernel_set:
            raise ValueError("kernel_set needs at least one kernel size (L >= 1)")
        if any(k % 2 == 0 or k < 1 for k in self.kernel_set):
            raise ShapeError(f"kernel sizes must be positive and odd, got {self.kernel_set}")
        if self.ratio < 1:
            raise ValueError(f"ratio must be positive, got {ratio}")

        self.global_layout = self._global_layout()
        n_global = sum(rows * cols for rows, cols in self.global_layout)
        local_dims = 2 if self.dim is Dimension.SPATIAL else 1

        sources: dict[str, ParamSource] = {
            "global": make_param_source(mode, channels, (n_global,), rng),
        }
        for k in self.kernel_set:
            sources[f"local_{k}"] = make_param_source(mode, channels, (k,) * local_dims, rng)
        if gate:
            sources["gate"] = make_param_source(mode, channels, (len(self.kernel_set) + 1, self._gate_extent()), rng)
        self.sources = sources

    @property
    def streams(self) -> int:
        return len(self.kernel_set) + 1

    def _calibrated_extent(self) -> int:
        channels, frames, _, _ = self.input_shape
        return channels if self.dim is Dimension.CHANNEL else frames

    def _gate_extent(self) -> int:
        return 1 if self.dim is Dimension.SPATIAL else self._calibrated_extent()

    def _global_layout(self) -> list[tuple[int, int]]:
        if self.dim is Dimension.SPATIAL:
            _, _, height, width = self.input_shape
            hidden_h = math.ceil(height / self.ratio)
            hidden_w = math.ceil(width / self.ratio)
            return [(hidden_h, height), (height, hidden_h), (hidden_w, width), (width, hidden_w)]
        extent = self._calibrated_extent()
        if extent % self.ratio:
            raise ShapeError(f"ratio {self.ratio} does not divide the {self.dim.value} extent {extent}")
        hidden = extent // self.ratio
        return [(hidden, extent), (extent, hidden)]

    def split_global(self, flat: Tensor) -> list[Tensor]:
        """Cut the flat global-stream block into its bottleneck matrices."""
        matrices = []
        offset = 0
        for rows, cols in self.global_layout:
            size = rows * cols
            matrices.append(flat[offset : offset + size].reshape(rows, cols))
            offset += size
        return matrices

    def calibrate(self, x: Tensor) -> Calibration:
        if x.shape != self.input_shape:
            raise ShapeError(f"{self.dim.value} block built for {self.input_shape}, got {x.shape}")
        m = compute_statistics(x)
        params = {name: source.weights(m) for name, source in self.sources.items()}
        stats = dimension_select(x, self.dim)

        matrices = self.split_global(params["global"])
        if self.dim is Dimension.SPATIAL:
            f_global = spatial_global_stream(stats.s, matrices[:2], matrices[2:])
        else:
            f_global = global_stream(stats.s, *matrices)
        f_locals = {k: local_stream(stats.s, params[f"local_{k}"]) for k in self.kernel_set}

        if self.gate_enabled:
            gate = aggregation_gate(stats, params["gate"])
        else:
            gate = GateWeights(g=Tensor(np.ones((stats.s.shape[0], self.streams))))

        attention = sigmoid(combine_streams(gate, f_global, [f_locals[k] for k in self.kernel_set]))
        return Calibration(
            stats=stats,
            params=params,
            gate=gate,
            f_global=f_global,
            f_locals=f_locals,
            attention=attention,
            full=stats.restore(attention),
        )

    def forward(self, x: Tensor) -> Tensor:
        return elementwise(self.calibrate(x).full, x, "mul")

    __call__ = forward


def mta_forward(x: Tensor, block: MtaBlock) -> Tensor:
    return block.forward(x)
