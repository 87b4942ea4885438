"""Single-file checkpoint container.

Layout::

    magic      8 bytes   b"GAITCKPT"
    version    uint32 LE
    length     uint64 LE  size of the manifest in bytes
    manifest   UTF-8 JSON {"config", "num_classes", "step", "entries": [{"path", "shape", "offset"}]}
    payload    float64 LE values of every entry, concatenated in manifest order

Offsets are byte offsets into the payload.
"""
from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from app.models.schemas import ModelConfig
from app.services.model import GaitModel
from app.services.optim import Adam

logger = logging.getLogger(__name__)

MAGIC = b"GAITCKPT"
VERSION = 1
DTYPE = np.dtype("<f8")
_HEADER = struct.Struct("<IQ")


class CheckpointError(RuntimeError):
    """Raised for unreadable checkpoints or ones that do not fit the current model."""


@dataclass
class Checkpoint:
    config: ModelConfig
    num_classes: int
    step: int
    tensors: dict[str, np.ndarray]

    def model_state(self) -> dict[str, np.ndarray]:
        return {path[len("model.") :]: value for path, value in self.tensors.items() if path.startswith("model.")}

    def optimizer_state(self) -> dict[str, np.ndarray]:
        return {path[len("adam.") :]: value for path, value in self.tensors.items() if path.startswith("adam.")}


def save_checkpoint(path: Path, model: GaitModel, optimizer: Adam | None = None, step: int = 0) -> Path:
    tensors = {f"model.{name}": value for name, value in model.state_dict().items()}
    if optimizer is not None:
        tensors.update({f"adam.{name}": value for name, value in optimizer.state_dict().items()})

    entries = []
    offset = 0
    for name, value in tensors.items():
        entries.append({"path": name, "shape": list(value.shape), "offset": offset})
        offset += value.size * DTYPE.itemsize
    manifest = json.dumps(
        {
            "config": model.config.model_dump(mode="json"),
            "num_classes": model.num_classes,
            "step": int(step),
            "entries": entries,
        },
        sort_keys=True,
    ).encode("utf-8")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("wb") as handle:
        handle.write(MAGIC)
        handle.write(_HEADER.pack(VERSION, len(manifest)))
        handle.write(manifest)
        for value in tensors.values():
            handle.write(np.ascontiguousarray(value, dtype=DTYPE).tobytes())
    tmp.replace(path)
    logger.info("Saved checkpoint %s (step %d, %d tensors)", path, step, len(entries))
    return path


def read_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    if blob[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a gait checkpoint")
    start = len(MAGIC)
    if len(blob) < start + _HEADER.size:
        raise CheckpointError(f"{path} is truncated")
    version, length = _HEADER.unpack_from(blob, start)
    if version != VERSION:
        raise CheckpointError(f"{path} has format version {version}, expected {VERSION}")
    start += _HEADER.size
    try:
        manifest = json.loads(blob[start : start + length].decode("utf-8"))
        config = ModelConfig.model_validate(manifest["config"])
        num_classes = int(manifest["num_classes"])
        step = int(manifest["step"])
        entries = [(str(e["path"]), tuple(int(s) for s in e["shape"]), int(e["offset"])) for e in manifest["entries"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        # ValidationError is a ValueError.
        raise CheckpointError(f"{path} has an invalid manifest: {exc}") from exc

    payload = memoryview(blob)[start + length :]
    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset in entries:
        if offset < 0 or any(s < 0 for s in shape):
            raise CheckpointError(f"{path}: entry {name} has a negative shape or offset")
        count = int(np.prod(shape))
        if offset + count * DTYPE.itemsize > len(payload):
            raise CheckpointError(f"{path}: entry {name} runs past the payload")
        tensors[name] = np.frombuffer(payload, dtype=DTYPE, count=count, offset=offset).reshape(shape).copy()
    return Checkpoint(config=config, num_classes=num_classes, step=step, tensors=tensors)


def load_checkpoint(
    path: Path,
    expected: ModelConfig | None = None,
    optimizer_lr: float | None = None,
) -> tuple[GaitModel, Adam | None, int]:
    """Rebuild the model (and Adam, when moments were saved) from ``path``.

    ``expected`` is the model section of the caller's run config; any
    difference from the stored config is a mismatch.
    """
    checkpoint = read_checkpoint(path)
    if expected is not None and expected != checkpoint.config:
        raise CheckpointError(f"{path} was trained with a different model configuration")
    model = GaitModel(checkpoint.config, checkpoint.num_classes)
    try:
        model.load_state_dict(checkpoint.model_state())
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path} does not match the model layout: {exc}") from exc

    optimizer = None
    optimizer_state = checkpoint.optimizer_state()
    if optimizer_state:
        optimizer = Adam(model, lr=optimizer_lr or checkpoint.config.learning_rate)
        try:
            optimizer.load_state_dict(optimizer_state, checkpoint.step)
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path} has inconsistent optimizer state: {exc}") from exc
    return model, optimizer, checkpoint.step
