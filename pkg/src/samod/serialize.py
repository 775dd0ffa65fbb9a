"""Flat binary tensor format ("MATN") and directory checkpoints.

A MATN file is: magic ``MATN``, version u32, rank u32, extents u32[rank],
then the float64 payload, all little-endian. Checkpoints are directories
holding one MATN file per parameter/buffer plus a manifest that records
names in construction order along with the run's config hash and seed.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"MATN"
VERSION = 1

MANIFEST_NAME = "manifest.txt"


class FormatError(ValueError):
    """Malformed MATN file or checkpoint manifest."""


def write_tensor(path: str, array: np.ndarray):
    arr = np.ascontiguousarray(array, dtype=np.float64)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor(path: str) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        version, rank = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        extents = struct.unpack(f"<{rank}I", fh.read(4 * rank))
        count = 1
        for n in extents:
            count *= n
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise FormatError(f"{path}: truncated payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes")
    return np.frombuffer(payload, dtype="<f8").reshape(extents).astype(np.float64)


# ----------------------------------------------------------------------
# checkpoints


def save_checkpoint(dirpath: str, named_arrays, *, config_hash: str, seed: int, kinds=None):
    """Write arrays as numbered MATN files plus a manifest.

    ``named_arrays`` is an ordered iterable of (name, array); ``kinds``
    optionally maps names to a single-letter kind tag (P parameter,
    B buffer) recorded in the manifest.
    """
    os.makedirs(dirpath, exist_ok=True)
    lines = ["# samod checkpoint", f"config_hash: {config_hash}", f"seed: {seed}"]
    for i, (name, arr) in enumerate(named_arrays):
        fname = f"{i:04d}.matn"
        write_tensor(os.path.join(dirpath, fname), arr)
        kind = kinds.get(name, "P") if kinds else "P"
        shape = "x".join(str(n) for n in np.asarray(arr).shape) or "scalar"
        lines.append(f"{i}\t{kind}\t{name}\t{fname}\t{shape}")
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(dirpath: str):
    """Return (meta dict, ordered list of (name, kind, array))."""
    manifest = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise FormatError(f"{dirpath}: missing {MANIFEST_NAME}")
    meta = {}
    entries = []
    with open(manifest) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if "\t" not in line:
                key, _, value = line.partition(":")
                meta[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise FormatError(f"{manifest}: bad entry {line!r}")
            _, kind, name, fname, _ = parts
            entries.append((name, kind, read_tensor(os.path.join(dirpath, fname))))
    return meta, entries


def restore_model(model, dirpath: str):
    """Copy checkpoint arrays into a model's parameters and buffers by name."""
    meta, entries = load_checkpoint(dirpath)
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    for name, kind, arr in entries:
        if kind == "P":
            if name not in params:
                raise FormatError(f"checkpoint parameter {name!r} not in model")
            if params[name].data.shape != arr.shape:
                raise FormatError(
                    f"checkpoint parameter {name!r} has shape {arr.shape}, "
                    f"model expects {params[name].data.shape}"
                )
            params[name].data[...] = arr
        else:
            if name not in buffers:
                raise FormatError(f"checkpoint buffer {name!r} not in model")
            buffers[name][...] = arr
    return meta


def checkpoint_arrays(model):
    """Ordered (name, array) pairs plus kind map for checkpointing a model."""
    named = []
    kinds = {}
    for name, p in model.named_parameters():
        named.append((name, p.data))
        kinds[name] = "P"
    for name, b in model.named_buffers():
        named.append((name, b))
        kinds[name] = "B"
    return named, kinds
