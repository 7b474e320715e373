"""
Binary training checkpoints.

Layout (little-endian):
    4 bytes   magic ``IGAP``
    u32       format version
    u64       length of the JSON metadata block
    ...       UTF-8 JSON metadata (sorted keys): stage, epoch, config, config
              hash, rng state, traces, and the name/shape of every array
    per array: u64 element count, then that many f64 values
"""

import json
import logging
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import errors
from .const import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from .model import AdamState, ModelParams

logger = logging.getLogger(__name__)

_HEADER = struct.Struct("<4sIQ")
_COUNT = struct.Struct("<Q")


@dataclass
class Checkpoint:
    """
    Snapshot of a training run at the end of ``epoch`` epochs.

    ``prompts`` holds prompt arrays by name (``P_s``, ``alpha``, ``P_t``, ...);
    ``trace`` is the per-epoch loss or metric record; ``extra`` carries small
    JSON-serializable settings the loop needs to resume (mode flags, the best
    validation epoch, ...).
    """

    stage: str
    epoch: int
    model: ModelParams | None = None
    prompts: dict = field(default_factory=dict)
    adam: AdamState | None = None
    trace: list = field(default_factory=list)
    rng: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    def named_arrays(self):
        arrays = {}
        if self.model is not None:
            for name, arr in self.model.arrays.items():
                arrays[f"model.{name}"] = arr
        for name, arr in self.prompts.items():
            arrays[f"prompt.{name}"] = arr
        if self.adam is not None:
            for name, arr in self.adam.named_arrays().items():
                arrays[f"adam.{name}"] = arr
        return arrays


def _metadata(ckpt, arrays):
    return {
        "stage": ckpt.stage,
        "epoch": int(ckpt.epoch),
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "rng": ckpt.rng,
        "trace": ckpt.trace,
        "extra": ckpt.extra,
        "model": None if ckpt.model is None else {"n_layers": ckpt.model.n_layers, "frozen": ckpt.model.frozen},
        "adam_step": None if ckpt.adam is None else int(ckpt.adam.step),
        "arrays": [[name, list(arr.shape)] for name, arr in arrays.items()],
    }


def dump_checkpoint(ckpt):
    """Serialize a checkpoint to bytes."""
    arrays = ckpt.named_arrays()
    meta = json.dumps(_metadata(ckpt, arrays), sort_keys=True).encode("utf-8")
    parts = [_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(meta)), meta]
    for arr in arrays.values():
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        parts.append(_COUNT.pack(flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def save_checkpoint(ckpt, path):
    """
    Write a checkpoint atomically (temporary file, then rename).

    Args:
        ckpt: Checkpoint
        path: Destination file
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(dump_checkpoint(ckpt))
    os.replace(tmp_path, path)
    logger.info(f"Saved {ckpt.stage} checkpoint at epoch {ckpt.epoch} to {path}")


def parse_checkpoint(data):
    """Deserialize bytes written by ``dump_checkpoint``."""
    if len(data) < _HEADER.size:
        raise errors.CheckpointError("checkpoint truncated before header")
    magic, version, meta_len = _HEADER.unpack_from(data, 0)
    if magic != CHECKPOINT_MAGIC:
        raise errors.CheckpointError(f"bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise errors.CheckpointError(f"unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    offset = _HEADER.size
    if offset + meta_len > len(data):
        raise errors.CheckpointError("checkpoint truncated inside metadata")
    try:
        meta = json.loads(data[offset:offset + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise errors.CheckpointError(f"corrupt checkpoint metadata: {e}") from None
    offset += meta_len

    arrays = {}
    for name, shape in meta["arrays"]:
        if offset + _COUNT.size > len(data):
            raise errors.CheckpointError(f"checkpoint truncated before array {name}")
        (count,) = _COUNT.unpack_from(data, offset)
        offset += _COUNT.size
        if count != int(np.prod(shape, dtype=np.int64)):
            raise errors.CheckpointError(f"array {name} has {count} values for shape {shape}")
        end = offset + 8 * count
        if end > len(data):
            raise errors.CheckpointError(f"checkpoint truncated inside array {name}")
        arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset = end
    if offset != len(data):
        raise errors.CheckpointError(f"{len(data) - offset} trailing bytes after the last array")

    model = None
    if meta["model"] is not None:
        model_arrays = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
        model = ModelParams(model_arrays, meta["model"]["n_layers"], meta["model"]["frozen"])
    adam = None
    if meta["adam_step"] is not None:
        adam = AdamState(step=meta["adam_step"])
        for k, v in arrays.items():
            if k.startswith("adam.m."):
                adam.m[k[len("adam.m."):]] = v
            elif k.startswith("adam.v."):
                adam.v[k[len("adam.v."):]] = v
    prompts = {k[len("prompt."):]: v for k, v in arrays.items() if k.startswith("prompt.")}
    return Checkpoint(
        stage=meta["stage"],
        epoch=meta["epoch"],
        model=model,
        prompts=prompts,
        adam=adam,
        trace=meta["trace"],
        rng=meta["rng"],
        config=meta["config"],
        config_hash=meta["config_hash"],
        extra=meta["extra"],
    )


def load_checkpoint(path, expected_hash=None):
    """
    Read a checkpoint file.

    Args:
        path: Checkpoint file
        expected_hash: Config hash of the current run; a mismatch is logged

    Returns:
        Checkpoint

    Raises:
        CheckpointError: bad magic, unsupported version or truncation
    """
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise errors.CheckpointError(f"cannot read checkpoint {path}: {e}") from None
    ckpt = parse_checkpoint(data)
    if expected_hash and ckpt.config_hash and ckpt.config_hash != expected_hash:
        logger.warning(f"Checkpoint {path} was written with config {ckpt.config_hash}, current is {expected_hash}")
    logger.info(f"Loaded {ckpt.stage} checkpoint from {path} (epoch {ckpt.epoch})")
    return ckpt


def checkpoint_path(directory, stage, epoch):
    return os.path.join(directory, f"{stage}_epoch{epoch:04d}.ckpt")
