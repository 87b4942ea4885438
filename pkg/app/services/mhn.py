"""Hyper network that turns sequence statistics into calibration weights."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from app.services.tensor import Module, ShapeError, Tensor, dense, leaky_relu, parameter, reduce

logger = logging.getLogger(__name__)

STATIC_INIT_SCALE = 0.1


@dataclass(frozen=True)
class GeneratedParams:
    """Flat generated vector and its reshape to the target parameter block."""

    flat: Tensor
    view: Tensor


class MetaHyperNet(Module):
    """Meta-knowledge weights generating one parameter block of shape ``target_shape``.

    ``w_meta1`` is ``C x C`` and ``w_meta2`` is ``N x C`` with ``N`` the product of
    ``target_shape``.
    """

    def __init__(self, channels: int, target_shape: Sequence[int], rng: np.random.Generator) -> None:
        if channels < 1:
            raise ShapeError(f"MetaHyperNet needs at least one channel, got {channels}")
        self.channels = channels
        self.target_shape = tuple(int(s) for s in target_shape)
        self.n_params = int(np.prod(self.target_shape))
        bound = 1.0 / np.sqrt(channels)
        self.w_meta1 = parameter(rng.uniform(-bound, bound, size=(channels, channels)))
        self.w_meta2 = parameter(rng.uniform(-0.1 * bound, 0.1 * bound, size=(self.n_params, channels)))


def compute_statistics(x: Tensor) -> Tensor:
    """Per-channel mean over the temporal and spatial axes of a ``C x T x H x W`` map."""
    if x.ndim != 4 or min(x.shape) < 1:
        raise ShapeError(f"compute_statistics expects a non-empty C x T x H x W map, got {x.shape}")
    return reduce(x, "mean", (1, 2, 3)).reshape(x.shape[0])


def generate_parameters(net: MetaHyperNet, m: Tensor) -> GeneratedParams:
    if m.shape != (net.channels,):
        raise ShapeError(f"statistics extent {m.shape} does not match meta weights ({net.channels},)")
    hidden = leaky_relu(dense(m, net.w_meta1))
    flat = leaky_relu(dense(hidden, net.w_meta2))
    return GeneratedParams(flat=flat, view=flat.reshape(net.target_shape))


class ParamSource(Module):
    """Where a calibration network gets its weights for one forward pass."""

    target_shape: tuple[int, ...]

    def weights(self, m: Tensor) -> Tensor:
        raise NotImplementedError


class MetaParams(ParamSource):
    """Sample-adaptive weights generated from the statistics ``m``."""

    def __init__(self, channels: int, target_shape: Sequence[int], rng: np.random.Generator) -> None:
        self.net = MetaHyperNet(channels, target_shape, rng)
        self.target_shape = self.net.target_shape

    def weights(self, m: Tensor) -> Tensor:
        return generate_parameters(self.net, m).view


class StaticParams(ParamSource):
    """Ordinary trainable weights, identical for every sample."""

    def __init__(self, target_shape: Sequence[int], rng: np.random.Generator) -> None:
        self.target_shape = tuple(int(s) for s in target_shape)
        self.weight = parameter(rng.uniform(-STATIC_INIT_SCALE, STATIC_INIT_SCALE, size=self.target_shape))

    def weights(self, m: Tensor) -> Tensor:
        return self.weight


def make_param_source(
    mode: str,
    channels: int,
    target_shape: Sequence[int],
    rng: np.random.Generator,
) -> ParamSource:
    if mode == "meta":
        return MetaParams(channels, target_shape, rng)
    if mode == "static":
        return StaticParams(target_shape, rng)
    raise ValueError(f"unknown calibration mode {mode!r}")
