"""Versioned checkpoint container.

Layout::

    magic (8 bytes) | version (u32) | header length (u64) | JSON header
    | tensor blocks | sha256 of everything before it (32 bytes)

The JSON header holds every non-tensor field plus, for each tensor, its
dtype, shape, byte offset and byte length inside the block region. JSON is
written with sorted keys, so saving an unchanged checkpoint twice gives
identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corpus import TrainingSubset
from .model import ModelVariantConfig
from .speakers import SpeakerGaussian

MAGIC = b"PGTTSCKP"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_SIZE = 32


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    def __init__(self, found: int, expected: int = FORMAT_VERSION):
        super().__init__(f"checkpoint format version {found}, this code reads {expected}")
        self.found = found
        self.expected = expected


@dataclass(eq=False)
class Checkpoint:
    config: ModelVariantConfig
    schedule: dict
    step: int
    stage: str
    parameters: dict[str, torch.Tensor]
    vocab: list[str]
    locales: list[str]
    speakers: dict[str, SpeakerGaussian] = field(default_factory=dict)
    optimizer: dict | None = None
    subset: TrainingSubset | None = None
    rng: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def variant(self) -> str:
        return self.config.variant

    def locale_index(self, locale: str) -> int:
        try:
            return self.locales.index(locale)
        except ValueError:
            raise CheckpointError(f"locale {locale!r} unknown to this checkpoint") from None


# -- tensor blocks -----------------------------------------------------------


class _BlockWriter:
    def __init__(self):
        self.chunks: list[bytes] = []
        self.offset = 0

    def add(self, tensor: torch.Tensor) -> dict:
        arr = tensor.detach().cpu().contiguous().numpy()
        data = arr.tobytes()
        ref = {"dtype": arr.dtype.str, "shape": list(arr.shape), "offset": self.offset,
               "nbytes": len(data)}
        self.chunks.append(data)
        self.offset += len(data)
        return ref


def _read_block(blob: bytes, ref: dict) -> torch.Tensor:
    start, n = ref["offset"], ref["nbytes"]
    if start < 0 or start + n > len(blob):
        raise CorruptCheckpointError("tensor block outside the data region")
    arr = np.frombuffer(blob, dtype=np.dtype(ref["dtype"]), count=n // np.dtype(ref["dtype"]).itemsize,
                        offset=start)
    return torch.from_numpy(arr.reshape(ref["shape"]).copy())


def _encode_optimizer(opt: dict | None, writer: _BlockWriter) -> dict | None:
    if opt is None:
        return None
    state = {
        str(idx): {k: writer.add(v) if torch.is_tensor(v) else {"value": v}
                   for k, v in sorted(entry.items())}
        for idx, entry in sorted(opt["state"].items())
    }
    return {"state": state, "param_groups": opt["param_groups"]}


def _decode_optimizer(header: dict | None, blob: bytes) -> dict | None:
    if header is None:
        return None
    state = {
        int(idx): {k: _read_block(blob, ref) if "offset" in ref else ref["value"]
                   for k, ref in entry.items()}
        for idx, entry in header["state"].items()
    }
    return {"state": state, "param_groups": header["param_groups"]}


# -- save / load -------------------------------------------------------------


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    writer = _BlockWriter()
    params = [[name, writer.add(t)] for name, t in ckpt.parameters.items()]
    header = {
        "config": ckpt.config.to_dict(),
        "schedule": ckpt.schedule,
        "step": ckpt.step,
        "stage": ckpt.stage,
        "parameters": params,
        "vocab": list(ckpt.vocab),
        "locales": list(ckpt.locales),
        "speakers": [g.to_dict() for _, g in sorted(ckpt.speakers.items())],
        "optimizer": _encode_optimizer(ckpt.optimizer, writer),
        "subset": None if ckpt.subset is None else {
            "seed": ckpt.subset.seed,
            "n_per_speaker": ckpt.subset.n_per_speaker,
            "ids_by_speaker": {k: list(v) for k, v in ckpt.subset.ids_by_speaker.items()},
        },
        "rng": {k: (writer.add(v) if torch.is_tensor(v) else {"value": v})
                for k, v in sorted(ckpt.rng.items())},
        "metadata": ckpt.metadata,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = _PREFIX.pack(MAGIC, ckpt.version, len(head)) + head + b"".join(writer.chunks)
    return body + hashlib.sha256(body).digest()


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    """Write atomically: a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return path


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size + _DIGEST_SIZE:
        raise CorruptCheckpointError("file too short to be a checkpoint")
    magic, version, head_len = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CorruptCheckpointError("bad magic bytes")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(version)
    body, digest = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptCheckpointError("checksum mismatch (truncated or modified file)")
    head_end = _PREFIX.size + head_len
    if head_end > len(body):
        raise CorruptCheckpointError("header extends past end of file")
    try:
        header = json.loads(body[_PREFIX.size:head_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable header: {exc}") from None
    blob = body[head_end:]

    subset = header["subset"]
    if subset is not None:
        subset = TrainingSubset(
            {k: tuple(v) for k, v in subset["ids_by_speaker"].items()},
            subset["seed"], subset["n_per_speaker"],
        )
    return Checkpoint(
        config=ModelVariantConfig.from_dict(header["config"]),
        schedule=header["schedule"],
        step=header["step"],
        stage=header["stage"],
        parameters={name: _read_block(blob, ref) for name, ref in header["parameters"]},
        vocab=header["vocab"],
        locales=header["locales"],
        speakers={d["speaker"]: SpeakerGaussian.from_dict(d) for d in header["speakers"]},
        optimizer=_decode_optimizer(header["optimizer"], blob),
        subset=subset,
        rng={k: _read_block(blob, ref) if "offset" in ref else ref["value"]
             for k, ref in header["rng"].items()},
        metadata=header["metadata"],
        version=version,
    )


def load_checkpoint(path: str | Path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def parameter_blocks(ckpt: Checkpoint) -> dict[str, bytes]:
    """Raw bytes of each named parameter, for bit-exact comparisons."""
    return {name: t.detach().cpu().contiguous().numpy().tobytes()
            for name, t in ckpt.parameters.items()}
