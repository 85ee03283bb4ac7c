"""Binary checkpoint format.

Layout: 4-byte magic "GCDT", 4-byte little-endian version, 8-byte
little-endian header length, UTF-8 JSON header, then raw little-endian
float32 parameter blocks in manifest order. The header carries the model
config, task specs, per-task normalization stats, and the ordered parameter
manifest (name, shape, byte offset into the data section).

Round trips are bit-exact: parameters are stored and trained in float32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import NormStats, TaskSpec
from .model import GoalConditionedTransformer, ModelConfig

MAGIC = b"GCDT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class ModelBundle:
    """A loaded checkpoint: model plus per-task normalization stats."""

    model: GoalConditionedTransformer
    norm_stats: dict[str, NormStats]

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    @property
    def task_specs(self) -> dict[str, TaskSpec]:
        return self.model.task_specs


def save_checkpoint(
    model: GoalConditionedTransformer,
    norm_stats: dict[str, NormStats],
    path,
    task_filter: list[str] | None = None,
) -> None:
    """Serialize the model; with task_filter only those adapters are kept."""
    path = Path(path)
    names = []
    for name in model.params:
        if task_filter is not None and name.startswith("adapter."):
            task = name.split(".", 2)[1]
            if task not in task_filter:
                continue
        names.append(name)
    kept_tasks = (
        list(model.task_specs) if task_filter is None else list(task_filter)
    )
    manifest = []
    blobs = []
    offset = 0
    for name in names:
        data = model.params[name].data.astype("<f4", copy=False)
        manifest.append({"name": name, "shape": list(data.shape), "offset": offset})
        blob = data.tobytes(order="C")
        blobs.append(blob)
        offset += len(blob)
    header = {
        "config": model.config.to_json(),
        "task_specs": {t: model.task_specs[t].to_json() for t in kept_tasks},
        "norm_stats": {
            t: norm_stats[t].to_json() for t in kept_tasks if t in norm_stats
        },
        "manifest": manifest,
    }
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent or Path("."), prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(header_bytes)))
            f.write(header_bytes)
            for blob in blobs:
                f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_header(path) -> dict:
    """Parse and validate the header without loading parameter data."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", f.read(4))
        if version != VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version: expected {VERSION}, found {version}"
            )
        (hlen,) = struct.unpack("<Q", f.read(8))
        raw = f.read(hlen)
        if len(raw) != hlen:
            raise CheckpointError("truncated header")
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"unparseable header: {e}") from e
    for key in ("config", "task_specs", "norm_stats", "manifest"):
        if key not in header:
            raise CheckpointError(f"header missing {key!r}")
    return header


def load_checkpoint(path) -> ModelBundle:
    """Reconstruct a ModelBundle; any inconsistency fails with no partial load."""
    header = read_header(path)
    config = ModelConfig.from_json(header["config"])
    task_specs = {k: TaskSpec.from_json(v) for k, v in header["task_specs"].items()}
    stats = {k: NormStats.from_json(v) for k, v in header["norm_stats"].items()}
    model = GoalConditionedTransformer(config, task_specs)
    expected = {name: p.data.shape for name, p in model.params.items()}
    manifest = header["manifest"]
    if [m["name"] for m in manifest] != list(expected):
        raise CheckpointError(
            "manifest parameter names do not match the declared config/tasks"
        )
    with open(path, "rb") as f:
        f.seek(8)
        (hlen,) = struct.unpack("<Q", f.read(8))
        data_start = 4 + 4 + 8 + hlen
        f.seek(0, os.SEEK_END)
        file_size = f.tell()
        loaded = {}
        offset_check = 0
        for entry in manifest:
            name, shape, offset = entry["name"], tuple(entry["shape"]), entry["offset"]
            if shape != expected[name]:
                raise CheckpointError(
                    f"parameter {name!r}: manifest shape {shape} != expected "
                    f"{expected[name]}"
                )
            if offset != offset_check:
                raise CheckpointError(f"parameter {name!r}: non-contiguous offset")
            nbytes = int(np.prod(shape, dtype=np.int64)) * 4
            if data_start + offset + nbytes > file_size:
                raise CheckpointError(f"parameter {name!r}: file truncated")
            f.seek(data_start + offset)
            raw = f.read(nbytes)
            loaded[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
            offset_check += nbytes
        if data_start + offset_check != file_size:
            raise CheckpointError("trailing bytes after last parameter block")
    for name, arr in loaded.items():
        model.params[name].data = arr.astype(np.float32)
    return ModelBundle(model=model, norm_stats=stats)


def parameter_count_formula(config: ModelConfig, task_specs: dict[str, TaskSpec]) -> int:
    """Closed-form parameter total for a fresh model (cross-check for inspect)."""
    d = config.d_model
    per_layer = 12 * d * d + 13 * d
    backbone = config.max_timesteps * d + 4 * d + config.n_layers * per_layer + 2 * d
    total = backbone
    for spec in task_specs.values():
        s = 1 + spec.goal_dim + spec.obs_dim + spec.act_dim
        total += 2 * d * s + 12 * d + s
    return total
