"""Checkpoint files: a JSON manifest plus a raw little-endian float64 blob."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..clustering import ClusterAssignment
from .network import CausalMixerNet, ModelConfig

MANIFEST = "manifest.json"
BLOB = "tensors.f64"
FORMAT_VERSION = 1


def save_checkpoint(net: CausalMixerNet, directory, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``tensors.f64`` into ``directory``.

    ``extra`` is stored verbatim in the manifest (channel names,
    normalization statistics, preprocessing settings).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = []
    offset = 0
    chunks = []
    tensors = [("param", k, v) for k, v in net.params.items()] + [("state", k, v) for k, v in net.state.items()]
    for group, name, arr in tensors:
        data = np.ascontiguousarray(arr, dtype="<f8")
        index.append({"group": group, "name": name, "shape": list(arr.shape), "offset": offset, "count": int(data.size)})
        offset += data.size
        chunks.append(data.ravel())
    blob = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    (directory / BLOB).write_bytes(blob.astype("<f8").tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "architecture": {
            "n_channels": net.n_channels,
            "embedding_dims": [int(v) for v in net.dims],
        },
        "config": net.config.to_dict(),
        "cluster_assignment": net.assignment.to_dict(),
        "tensors": index,
        "blob": BLOB,
        "extra": extra or {},
    }
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return directory


def load_checkpoint(directory):
    """Return ``(net, extra)`` from a checkpoint directory; bit-exact round trip."""
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST).read_text())
    config = ModelConfig(**manifest["config"])
    assignment = ClusterAssignment.from_dict(manifest["cluster_assignment"])
    net = CausalMixerNet(manifest["architecture"]["n_channels"], assignment, config, init=False)
    blob = np.frombuffer((directory / manifest["blob"]).read_bytes(), dtype="<f8")
    for entry in manifest["tensors"]:
        lo = entry["offset"]
        arr = blob[lo : lo + entry["count"]].astype(np.float64).reshape(entry["shape"])
        target = net.params if entry["group"] == "param" else net.state
        target[entry["name"]] = arr
    expected = set(net.param_shapes())
    if set(net.params) != expected:
        raise ValueError(f"checkpoint parameters do not match the architecture: {sorted(expected ^ set(net.params))}")
    return net, manifest["extra"]
