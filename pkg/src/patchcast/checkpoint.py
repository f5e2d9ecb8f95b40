"""Checkpoint file format.

Layout (single file):

    bytes 0..8   little-endian uint64 header length H
    bytes 8..8+H UTF-8 JSON manifest
    remainder    concatenated raw little-endian float32 tensor payloads

The manifest holds the model config, free-form metadata, and a tensor table
``[{name, shape, offset}]`` with byte offsets into the payload. Round trips
are bit-exact for float32 tensors.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch

from .decoder import ModelConfig, Weights

FORMAT_VERSION = 1


def save_checkpoint(
    path,
    weights: Weights,
    meta: dict | None = None,
    extra_tensors: dict[str, torch.Tensor] | None = None,
) -> None:
    tensors = dict(weights.tensors)
    if extra_tensors:
        tensors.update(extra_tensors)
    entries = []
    offset = 0
    payloads = []
    for name in sorted(tensors):
        arr = tensors[name].detach().cpu().numpy().astype("<f4", copy=False)
        payloads.append(arr.tobytes())
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": weights.config.to_dict(),
        "meta": meta or {},
        "tensors": entries,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[Weights, dict, dict[str, torch.Tensor]]:
    """Returns (weights, meta, extra_tensors). Tensors not named in the model
    parameter table (e.g. optimizer state) land in extra_tensors."""
    with open(path, "rb") as fh:
        (header_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(header_len).decode("utf-8"))
        payload = fh.read()
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version in {path}")
    config = ModelConfig.from_dict(manifest["config"])

    from .decoder import parameter_shapes

    model_names = set(parameter_shapes(config))
    tensors: dict[str, torch.Tensor] = {}
    extra: dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            payload, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape)
        tensor = torch.from_numpy(arr.copy())
        if entry["name"] in model_names:
            tensors[entry["name"]] = tensor
        else:
            extra[entry["name"]] = tensor
    missing = model_names - set(tensors)
    if missing:
        raise ValueError(f"checkpoint missing tensors: {sorted(missing)[:5]}")
    return Weights(config=config, tensors=tensors), manifest["meta"], extra
