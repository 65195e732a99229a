"""Parameter checkpoints: JSON manifest plus one little-endian raw payload."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np


def save_checkpoint(g, path):
    """Write ``path.json`` and ``path.bin`` holding every parameter and buffer."""
    path = Path(path)
    entries, chunks, offset = [], [], 0
    for kind, arrays in (("param", g.params), ("buffer", g.buffers)):
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                            "dtype": data.dtype.str, "offset": offset, "nbytes": data.nbytes})
            chunks.append(data.tobytes())
            offset += data.nbytes
    with open(path.with_suffix(".bin"), "wb") as fh:
        for c in chunks:
            fh.write(c)
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump({"entries": entries, "total_bytes": offset}, fh, indent=1)


def load_checkpoint(g, path):
    """Restore arrays saved by :func:`save_checkpoint` into a graph of the same architecture."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    blob = path.with_suffix(".bin").read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise ValueError("checkpoint payload length mismatch")
    seen = set()
    for e in manifest["entries"]:
        target = g.params if e["kind"] == "param" else g.buffers
        if e["name"] not in target:
            raise KeyError(f"checkpoint entry {e['name']!r} not in graph")
        arr = np.frombuffer(blob, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                            offset=e["offset"]).reshape(e["shape"])
        if arr.shape != target[e["name"]].shape:
            raise ValueError(f"shape mismatch for {e['name']!r}")
        target[e["name"]] = arr.astype(target[e["name"]].dtype.newbyteorder("="))
        seen.add(e["name"])
    missing = (set(g.params) | set(g.buffers)) - seen
    if missing:
        raise KeyError(f"checkpoint lacks {sorted(missing)[:5]}")
    return g
