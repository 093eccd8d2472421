"""Model weights as QTNS arrays plus a JSON manifest."""

import json
from pathlib import Path

import numpy as np

from ..core import tensor_read, tensor_write

__all__ = ["save_weights", "load_weights"]


def save_weights(directory, params, meta: dict | None = None, prefix: str = "param") -> Path:
    """Write ``params`` (list of float arrays) into ``directory``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, p in enumerate(params):
        name = f"{prefix}_{i:03d}.qtns"
        tensor_write(directory / name, np.asarray(p, dtype=np.float64))
        entries.append({"file": name, "shape": list(np.shape(p))})
    manifest = {"layers": entries, "meta": meta or {}}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_weights(directory):
    """Inverse of :func:`save_weights`: returns ``(params, meta)``."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params = []
    for entry in manifest["layers"]:
        arr = tensor_read(directory / entry["file"])
        if list(arr.shape) != entry["shape"]:
            raise ValueError(f"{entry['file']}: shape {arr.shape} does not match manifest {entry['shape']}")
        params.append(arr)
    return params, manifest["meta"]
