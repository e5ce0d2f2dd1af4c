"""Versioned checkpoint container with content digests.

A checkpoint is a zip archive holding a JSON header (schema version,
task index, architecture constants, rig, schedule, replay manifest,
digest) plus one .npy blob per named parameter.  Writes are atomic
(temp file then rename) and byte-stable: entries are name-sorted and
carry a fixed timestamp, so identical state produces identical files.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

SCHEMA_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(RuntimeError):
    pass


def state_to_arrays(module: torch.nn.Module) -> dict:
    """Detached float copies of a module's state dict, name -> ndarray."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[name] = tensor.detach().cpu().numpy().copy()
    return out


def arrays_digest(params: dict, extra: Optional[dict] = None) -> str:
    """sha256 over name-sorted parameter bytes plus a JSON extra blob."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name])
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    if extra is not None:
        h.update(json.dumps(extra, sort_keys=True).encode())
    return h.hexdigest()


def state_digest(module: torch.nn.Module) -> str:
    """Content digest of a live module's parameters and buffers."""
    return arrays_digest(state_to_arrays(module))


@dataclass(frozen=True)
class TaskCheckpoint:
    """Immutable snapshot of all trainable state after one task."""

    task_index: int
    params: dict                  # name -> np.ndarray
    appearance_map: dict          # task_index -> appearance_id
    replay_records: list          # list of ReplayRecord JSON dicts
    schedule: dict
    options: dict
    arch: dict
    rig: dict
    rng_state: dict = field(default_factory=dict)
    digest: str = ""

    def __post_init__(self):
        if not self.digest:
            object.__setattr__(self, "digest", self.compute_digest())

    def compute_digest(self) -> str:
        extra = {
            "task_index": self.task_index,
            "appearance_map": {str(k): v for k, v in self.appearance_map.items()},
            "replay_records": self.replay_records,
        }
        return arrays_digest(self.params, extra)


def _write_entry(zf: zipfile.ZipFile, name: str, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(ckpt: TaskCheckpoint, path) -> str:
    """Write the container atomically; returns the digest."""
    header = {
        "schema_version": SCHEMA_VERSION,
        "task_index": ckpt.task_index,
        "appearance_map": {str(k): v for k, v in ckpt.appearance_map.items()},
        "schedule": ckpt.schedule,
        "options": ckpt.options,
        "arch": ckpt.arch,
        "rig": ckpt.rig,
        "rng_state": ckpt.rng_state,
        "digest": ckpt.digest,
        "param_names": sorted(ckpt.params),
    }
    path = os.fspath(path)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)), suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            with zipfile.ZipFile(f, "w") as zf:
                _write_entry(zf, "header.json",
                             json.dumps(header, sort_keys=True, indent=1).encode())
                _write_entry(zf, "replay.json",
                             json.dumps(ckpt.replay_records, sort_keys=True).encode())
                for name in sorted(ckpt.params):
                    buf = io.BytesIO()
                    np.save(buf, ckpt.params[name])
                    _write_entry(zf, f"params/{name}.npy", buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return ckpt.digest


def load_checkpoint(path) -> TaskCheckpoint:
    """Read and integrity-check a checkpoint container."""
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("schema_version") != SCHEMA_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint schema {header.get('schema_version')!r}"
            )
        replay = json.loads(zf.read("replay.json"))
        params = {}
        for name in header["param_names"]:
            buf = io.BytesIO(zf.read(f"params/{name}.npy"))
            params[name] = np.load(buf)
    ckpt = TaskCheckpoint(
        task_index=int(header["task_index"]),
        params=params,
        appearance_map={int(k): v for k, v in header["appearance_map"].items()},
        replay_records=replay,
        schedule=header["schedule"],
        options=header["options"],
        arch=header["arch"],
        rig=header["rig"],
        rng_state=header.get("rng_state", {}),
        digest=header["digest"],
    )
    if ckpt.compute_digest() != ckpt.digest:
        raise CheckpointError("checkpoint digest mismatch: file is corrupt or was edited")
    return ckpt


def load_into_module(module: torch.nn.Module, params: dict):
    """Load name -> ndarray params into a live module, strict on names."""
    tensors = {k: torch.as_tensor(v) for k, v in params.items()}
    missing, unexpected = module.load_state_dict(tensors, strict=False)
    if missing or unexpected:
        raise CheckpointError(
            f"parameter name mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}"
        )
