"""Temporal pooling head fusing mean, max and generalized-mean aggregation."""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np

from app.models.schemas import PoolingMethod
from app.services.mhn import ParamSource, compute_statistics, make_param_source
from app.services.tensor import (
    Module,
    ShapeError,
    Tensor,
    clamp_min,
    dense,
    parameter,
    power,
    reduce,
    sigmoid,
)

logger = logging.getLogger(__name__)

GEM_EPS = 1e-6
P_BOUNDS = (1.0, 128.0)
BETA_ORDER = (PoolingMethod.MEAN, PoolingMethod.MAX, PoolingMethod.GEM)


def pool_temporal(
    x: Tensor,
    method: PoolingMethod | str,
    p: Tensor | float | None = None,
    eps: float = GEM_EPS,
) -> Tensor:
    """Reduce ``C x T x H x W`` over ``T`` to ``C x 1 x H x W``.

    GeM is ``mean_t(clamp(x, eps) ** p) ** (1 / p)``.
    """
    method = PoolingMethod(method)
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeError(f"pool_temporal expects C x T x H x W with T >= 1, got {x.shape}")
    if method is PoolingMethod.MEAN:
        return reduce(x, "mean", (1,))
    if method is PoolingMethod.MAX:
        return reduce(x, "max", (1,))

    if p is None:
        raise ValueError("GeM pooling needs an exponent p")
    exponent = p if isinstance(p, Tensor) else Tensor([float(p)])
    if exponent.item() < 1.0:
        raise ValueError(f"GeM exponent must be >= 1, got {exponent.item()}")
    powered = power(clamp_min(x, eps), exponent)
    return power(reduce(powered, "mean", (1,)), power(exponent, -1.0))


class MtpHead(Module):
    """Weights the enabled pooling branches with ``beta = sigmoid(W_t . frame stats)``.

    ``weighting`` chooses where ``W_t`` comes from: generated per sample
    (``meta``), a plain trainable matrix (``static``), or no weighting at all
    (``none``, every beta fixed at 1).
    """

    def __init__(
        self,
        channels: int,
        frames: int,
        *,
        rng: np.random.Generator,
        pooling: Sequence[PoolingMethod | str] = BETA_ORDER,
        weighting: str = "meta",
        p_init: float = 3.0,
        eps: float = GEM_EPS,
    ) -> None:
        self.channels = channels
        self.frames = frames
        self.pooling = tuple(PoolingMethod(m) for m in pooling)
        if not self.pooling:
            raise ValueError("at least one pooling branch must be enabled")
        self.weighting = weighting
        self.eps = eps
        self.p = parameter(np.array([float(p_init)]))
        self.weights_source: ParamSource | None = None
        if weighting != "none":
            self.weights_source = make_param_source(weighting, channels, (len(BETA_ORDER), frames), rng)

    def compute_beta(self, f_mta: Tensor) -> Tensor:
        if f_mta.ndim != 4 or f_mta.shape[1] != self.frames:
            raise ShapeError(f"head configured for T={self.frames}, got map {f_mta.shape}")
        if self.weights_source is None:
            return Tensor(np.ones(len(BETA_ORDER)))
        frame_stats = reduce(f_mta, "mean", (0, 2, 3)).reshape(self.frames)
        w_t = self.weights_source.weights(compute_statistics(f_mta))
        return sigmoid(dense(frame_stats, w_t))

    def forward(self, f_mta: Tensor) -> Tensor:
        beta = self.compute_beta(f_mta)
        total: Tensor | None = None
        for position, method in enumerate(BETA_ORDER):
            if method not in self.pooling:
                continue
            weight = beta[position : position + 1].reshape(1, 1, 1, 1)
            term = weight * pool_temporal(f_mta, method, self.p, self.eps)
            total = term if total is None else total + term
        assert total is not None
        return total

    __call__ = forward

    def clamp_exponent(self) -> None:
        low, high = P_BOUNDS
        before = self.p.data.copy()
        self.p.data = np.clip(self.p.data, low, high)
        if not np.array_equal(before, self.p.data):
            logger.debug("GeM exponent clamped from %.4f to %.4f", before[0], self.p.data[0])


def mtp_forward(head: MtpHead, f_mta: Tensor) -> Tensor:
    return head.forward(f_mta)
