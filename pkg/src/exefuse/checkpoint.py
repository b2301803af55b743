"""Binary checkpoints: a text header followed by little-endian float64 blocks.

Layout::

    EXEFUSE-CKPT
    version = 1
    kind = <embeddings|model>
    <key> = <value>            (scalars and config)
    block <name> <dim> <dim> ...
    end
    <raw float64 data, blocks in header order>
"""

from __future__ import annotations

import os
from typing import Mapping

import numpy as np

MAGIC = "EXEFUSE-CKPT"
VERSION = 1


def save_checkpoint(path, kind: str, meta: Mapping[str, object], blocks: Mapping[str, np.ndarray]) -> None:
    lines = [MAGIC, f"version = {VERSION}", f"kind = {kind}"]
    for k, v in meta.items():
        if "\n" in str(v):
            raise ValueError(f"checkpoint meta {k!r} contains a newline")
        lines.append(f"{k} = {v}")
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        lines.append("block " + " ".join([name] + [str(s) for s in arr.shape]))
    lines.append("end")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in blocks.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    os.replace(tmp, path)


def load_checkpoint(path, kind: str | None = None):
    """Return ``(meta, blocks)``; raises ``ValueError`` on a foreign or truncated file."""
    with open(path, "rb") as fh:
        first = fh.readline().decode("utf-8").rstrip("\n")
        if first != MAGIC:
            raise ValueError(f"{path}: not an exefuse checkpoint")
        meta: dict[str, str] = {}
        shapes: list[tuple[str, tuple[int, ...]]] = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            line = line.decode("utf-8").rstrip("\n")
            if line == "end":
                break
            if line.startswith("block "):
                parts = line.split()
                shapes.append((parts[1], tuple(int(s) for s in parts[2:])))
            else:
                k, v = line.split(" = ", 1)
                meta[k] = v
        if int(meta.get("version", -1)) != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        if kind is not None and meta.get("kind") != kind:
            raise ValueError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')}")
        blocks = {}
        for name, shape in shapes:
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated block {name}")
            blocks[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
    return meta, blocks
