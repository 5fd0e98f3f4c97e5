"""Bit-exact binary container for parameters and Fisher diagonals.

Layout (little-endian):

    "CFMA" | version u32 | entry count u32
    per entry: name length u32 | UTF-8 name | rank u32 | dims u64[rank]
               | payload f64[prod(dims)]
    optional trailer: metadata length u32 | UTF-8 JSON

Fisher entries live in the same container under "<param name>.fisher".
Writes are whole-file atomic (temp file + rename).
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import ParamSet
from .errors import CheckpointCorruptionError, CheckpointFormatError, InputError
from .fisher import FisherDiag
from .model import ClassifierModel, HeadRow, MlpConfig

MAGIC = b"CFMA"
VERSION = 1
FISHER_SUFFIX = ".fisher"


@dataclass
class Checkpoint:
    entries: ParamSet
    metadata: dict = field(default_factory=dict)

    def params(self) -> ParamSet:
        """Entries that are model parameters (no Fisher suffix)."""
        return ParamSet({n: a for n, a in self.entries.items() if not n.endswith(FISHER_SUFFIX)})

    def fisher(self) -> FisherDiag | None:
        """Fisher entries with the suffix stripped, or None if absent."""
        tagged = {n: a for n, a in self.entries.items() if n.endswith(FISHER_SUFFIX)}
        if not tagged:
            return None
        return FisherDiag({n[: -len(FISHER_SUFFIX)]: a for n, a in tagged.items()})


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", VERSION)
    blob += struct.pack("<I", len(checkpoint.entries))
    for name, arr in checkpoint.entries.items():
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<I", arr.ndim)
        for dim in arr.shape:
            blob += struct.pack("<Q", dim)
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    meta = json.dumps(checkpoint.metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob += struct.pack("<I", len(meta))
    blob += meta
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(blob))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int, what: str) -> bytes:
        if self.off + n > len(self.raw):
            raise CheckpointCorruptionError(
                f"truncated file: needed {n} bytes for {what} at byte offset {self.off}, "
                f"only {len(self.raw) - self.off} remain"
            )
        out = self.raw[self.off : self.off + n]
        self.off += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    reader = _Reader(raw)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported format version {version}")
    count = reader.u32("entry count")
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        name_len = reader.u32(f"entry {i} name length")
        try:
            name = reader.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointCorruptionError(f"entry {i} name is not valid UTF-8") from exc
        rank = reader.u32(f"entry {name!r} rank")
        if rank > 32:
            raise CheckpointCorruptionError(f"entry {name!r} has implausible rank {rank}")
        shape = tuple(reader.u64(f"entry {name!r} dim {d}") for d in range(rank))
        size = 1
        for dim in shape:
            size *= dim
        payload = reader.take(8 * size, f"entry {name!r} payload")
        if name in entries:
            raise CheckpointCorruptionError(f"duplicate entry name {name!r}")
        entries[name] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    metadata: dict = {}
    if reader.off < len(raw):
        meta_len = reader.u32("metadata length")
        meta_raw = reader.take(meta_len, "metadata")
        try:
            metadata = json.loads(meta_raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointCorruptionError(f"metadata block is not valid JSON: {exc}") from exc
    if reader.off != len(raw):
        raise CheckpointCorruptionError(
            f"{len(raw) - reader.off} unexpected trailing bytes at byte offset {reader.off}"
        )
    return Checkpoint(entries=ParamSet(entries), metadata=metadata)


# ---------------------------------------------------------------------------
# Model <-> checkpoint bridging


def checkpoint_for_model(
    model: ClassifierModel,
    params: ParamSet | None = None,
    fisher: FisherDiag | None = None,
    **metadata,
) -> Checkpoint:
    """Bundle parameters (and optionally their Fisher) with enough metadata
    to rebuild the classifier structure later."""
    params = model.params if params is None else params
    entries = dict(params.items())
    if fisher is not None:
        params.require_aligned(fisher, context="params/Fisher")
        for name, arr in fisher.items():
            entries[name + FISHER_SUFFIX] = arr
    meta = {
        "model": {
            "input_dim": model.config.input_dim,
            "hidden_dims": list(model.config.hidden_dims),
            "activation": model.config.activation,
            "seed": model.config.seed,
        },
        "head": [[row.class_id, row.task_id] for row in model.head],
    }
    meta.update(metadata)
    return Checkpoint(entries=ParamSet(entries), metadata=meta)


def model_from_checkpoint(ckpt: Checkpoint) -> ClassifierModel:
    meta = ckpt.metadata
    if "model" not in meta or "head" not in meta:
        raise InputError("checkpoint lacks model metadata; cannot rebuild the classifier")
    mc = meta["model"]
    config = MlpConfig(
        input_dim=int(mc["input_dim"]),
        hidden_dims=tuple(int(h) for h in mc["hidden_dims"]),
        activation=str(mc["activation"]),
        seed=int(mc["seed"]),
    )
    head = tuple(HeadRow(class_id=int(c), task_id=int(t)) for c, t in meta["head"])
    return ClassifierModel(config=config, params=ckpt.params(), head=head)
