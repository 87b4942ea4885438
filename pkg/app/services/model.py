"""Full gait model: conv backbone with per-stage triple attention, temporal pooling and part heads."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from app.models.schemas import Dimension, ModelConfig
from app.services.data import Batch, clip_from_sequence
from app.services.losses import LossBreakdown, total_loss
from app.services.mta import Calibration, MtaBlock
from app.services.mtp import MtpHead
from app.services.optim import Adam
from app.services.tensor import (
    Module,
    ShapeError,
    Tensor,
    conv,
    dense,
    leaky_relu,
    no_grad,
    parameter,
    reduce,
    stack,
)

logger = logging.getLogger(__name__)

STAGES = 3
CONV_KERNEL = 3


class NonFiniteLossError(RuntimeError):
    """Training produced a NaN or infinite loss."""


@dataclass(frozen=True)
class StepResult:
    triplet: float
    cross_entropy: float
    total: float
    active_triplets: int


@dataclass
class AttentionRecord:
    """Calibrations of every block plus the pooling weights for one clip."""

    calibrations: list[tuple[int, Dimension, Calibration]] = field(default_factory=list)
    beta: np.ndarray | None = None
    p: float = 0.0


def stage_resolution(config: ModelConfig, stage: int) -> tuple[int, int]:
    height, width = config.resolution
    return height // 2**stage, width // 2**stage


class GaitModel(Module):
    """Backbone, attention blocks, temporal pooling head, separate FC and classifiers."""

    def __init__(self, config: ModelConfig, num_classes: int) -> None:
        if num_classes < 2:
            raise ValueError(f"need at least two training identities, got {num_classes}")
        self.config = config
        self.num_classes = num_classes
        rng = np.random.default_rng(config.seed)

        channels_in = (1,) + tuple(config.stage_channels[:-1])
        self.stage_kernels = []
        for c_in, c_out in zip(channels_in, config.stage_channels):
            scale = math.sqrt(2.0 / (c_in * CONV_KERNEL * CONV_KERNEL))
            self.stage_kernels.append(parameter(rng.normal(0.0, scale, size=(c_out, c_in, CONV_KERNEL, CONV_KERNEL))))

        self.mta: list[list[MtaBlock]] = []
        for stage, channels in enumerate(config.stage_channels):
            height, width = stage_resolution(config, stage)
            blocks = []
            if stage in config.mta_stages:
                for dim in config.mta_dims:
                    blocks.append(
                        MtaBlock(
                            dim,
                            channels,
                            config.clip_length,
                            height,
                            width,
                            rng=rng,
                            kernel_set=config.kernel_set,
                            ratio=config.ratio,
                            mode=config.mta_mode,
                            gate=config.gate,
                        )
                    )
            self.mta.append(blocks)

        final_channels = config.stage_channels[-1]
        self.head = MtpHead(
            final_channels,
            config.clip_length,
            rng=rng,
            pooling=config.pooling,
            weighting=config.weighting,
            p_init=config.gem_p,
        )
        fc_bound = 1.0 / math.sqrt(final_channels)
        self.fc = [
            parameter(rng.uniform(-fc_bound, fc_bound, size=(config.embed_dim, final_channels)))
            for _ in range(config.bins)
        ]
        cls_bound = 1.0 / math.sqrt(config.embed_dim)
        self.classifiers = [
            parameter(rng.uniform(-cls_bound, cls_bound, size=(num_classes, config.embed_dim)))
            for _ in range(config.bins)
        ]
        logger.debug(
            "Built gait model: %d parameter tensors, %d attention blocks",
            len(self.named_parameters()),
            sum(len(blocks) for blocks in self.mta),
        )

    @property
    def clip_shape(self) -> tuple[int, int, int, int]:
        height, width = self.config.resolution
        return (1, self.config.clip_length, height, width)

    def backbone_forward(self, clip: Tensor, record: AttentionRecord | None = None) -> Tensor:
        if clip.shape != self.clip_shape:
            raise ShapeError(f"model expects a clip of shape {self.clip_shape}, got {clip.shape}")
        x = clip
        for stage, kernel in enumerate(self.stage_kernels):
            frames = conv(x.transpose(1, 0, 2, 3), kernel, dims=2)
            x = leaky_relu(frames.transpose(1, 0, 2, 3))
            for block in self.mta[stage]:
                if record is not None:
                    calibration = block.calibrate(x)
                    record.calibrations.append((stage, block.dim, calibration))
                    x = calibration.full * x
                else:
                    x = block(x)
            if stage < STAGES - 1:
                x = downsample(x)
        return x

    def embed(self, clip: Tensor, record: AttentionRecord | None = None) -> Tensor:
        """``(bins, E)`` part embeddings of one ``1 x T x H x W`` clip."""
        f_mta = self.backbone_forward(clip, record)
        if record is not None:
            record.beta = self.head.compute_beta(f_mta).numpy()
            record.p = self.head.p.item()
        f_omni = self.head.forward(f_mta)
        return separate_fc(horizontal_pool(f_omni, self.config.bins), self.fc)

    def embed_sequence(self, frames: np.ndarray) -> np.ndarray:
        """Concatenated part embeddings of a whole sequence (first T frames, looped when shorter)."""
        clip = clip_from_sequence(frames, self.config.clip_length)
        with no_grad():
            return self.embed(Tensor(clip[None])).numpy().reshape(-1)

    def inspect(self, frames: np.ndarray) -> AttentionRecord:
        record = AttentionRecord()
        clip = clip_from_sequence(frames, self.config.clip_length)
        with no_grad():
            self.embed(Tensor(clip[None]), record)
        return record

    def loss(self, batch: Batch) -> LossBreakdown:
        embeddings = stack([self.embed(Tensor(clip[None])) for clip in batch.clips], axis=0)
        return total_loss(embeddings, batch.labels, self.classifiers, self.config.margin)


def downsample(x: Tensor) -> Tensor:
    """2x2 average over the spatial axes of ``C x T x H x W``."""
    channels, frames, height, width = x.shape
    if height % 2 or width % 2:
        raise ShapeError(f"cannot halve spatial extent {height}x{width}")
    blocks = x.reshape(channels, frames, height // 2, 2, width // 2, 2)
    return reduce(blocks, "mean", (3, 5)).reshape(channels, frames, height // 2, width // 2)


def horizontal_pool(f_omni: Tensor, bins: int) -> Tensor:
    """``(bins, C)`` parts: per-strip spatial mean plus max."""
    if f_omni.ndim != 4 or f_omni.shape[1] != 1:
        raise ShapeError(f"horizontal_pool expects C x 1 x H x W, got {f_omni.shape}")
    channels, _, height, width = f_omni.shape
    if bins < 1 or height % bins:
        raise ShapeError(f"bins={bins} does not divide feature height {height}")
    strips = f_omni.reshape(channels, bins, (height // bins) * width)
    pooled = reduce(strips, "mean", (2,)) + reduce(strips, "max", (2,))
    return pooled.reshape(channels, bins).transpose(1, 0)


def separate_fc(parts: Tensor, weights: list[Tensor]) -> Tensor:
    if parts.shape[0] != len(weights):
        raise ShapeError(f"{parts.shape[0]} parts but {len(weights)} part matrices")
    return stack([dense(parts[b], weight) for b, weight in enumerate(weights)], axis=0)


def train_step(model: GaitModel, batch: Batch, optimizer: Adam) -> StepResult:
    optimizer.zero_grad()
    breakdown = model.loss(batch)
    total = breakdown.total.item()
    if not np.isfinite(total):
        raise NonFiniteLossError(
            f"non-finite loss {total} (triplet={breakdown.triplet.item()}, ce={breakdown.cross_entropy.item()})"
        )
    breakdown.total.backward()
    optimizer.step()
    model.head.clamp_exponent()
    return StepResult(
        triplet=breakdown.triplet.item(),
        cross_entropy=breakdown.cross_entropy.item(),
        total=total,
        active_triplets=breakdown.active_triplets,
    )
