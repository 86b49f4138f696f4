"""Checkpoint files: JSON header plus raw little-endian float blobs.

Layout: 8 bytes of little-endian header length, a UTF-8 JSON header, then
the tensor blobs back to back. The header carries the model config and a
manifest of {name, shape, offset, dtype}; offsets are relative to the
start of the blob section. Tensors are float32 in the default precision
and float64 in oracle mode (the dtype field records which), so a
save/load round-trip is bit-exact in either mode.

Training checkpoints reuse the same container with optimizer moments
stored as extra tensors ("opt.m.<param>", "opt.v.<param>") and loop
counters in the header's "extra" object. Loading validates everything
before constructing state, so a corrupted file never yields partial state.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError
from .model import EncoderModel, ModelConfig, param_shapes
from .tensor import Tensor

_LEN_FORMAT = "<Q"
_DTYPE_TAGS = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


def _dtype_tag(dtype) -> str:
    dt = np.dtype(dtype)
    if dt == np.float32:
        return "<f4"
    if dt == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported tensor dtype {dt}")


def save_arrays(path, config: ModelConfig, arrays: dict[str, np.ndarray],
                extra: dict | None = None) -> None:
    manifest = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        tag = _dtype_tag(arr.dtype)
        blob = np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes()
        manifest.append({"name": name, "shape": list(arr.shape),
                         "offset": offset, "dtype": tag})
        blobs.append(blob)
        offset += len(blob)
    header = {"config": config.to_dict(), "manifest": manifest,
              "extra": extra or {}}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack(_LEN_FORMAT, len(header_bytes)))
        fh.write(header_bytes)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    prefix = struct.calcsize(_LEN_FORMAT)
    if len(raw) < prefix:
        raise CheckpointError(f"{path}: truncated before header length")
    (header_len,) = struct.unpack_from(_LEN_FORMAT, raw)
    if len(raw) < prefix + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[prefix:prefix + header_len].decode("utf-8"))
        config = ModelConfig.from_dict(header["config"])
        manifest = header["manifest"]
        extra = header.get("extra", {})
    except Exception as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc

    blob = raw[prefix + header_len:]
    arrays: dict[str, np.ndarray] = {}
    try:
        for entry in manifest:
            dtype = _DTYPE_TAGS[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start = int(entry["offset"])
            end = start + count * dtype.itemsize
            if end > len(blob):
                raise CheckpointError(f"{path}: blob for {entry['name']} is truncated")
            arrays[entry["name"]] = np.frombuffer(
                blob[start:end], dtype=dtype).reshape(shape).copy()
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"{path}: malformed manifest: {exc}") from exc
    return config, arrays, extra


def save_model(path, model: EncoderModel, extra: dict | None = None) -> None:
    arrays = {name: p.data for name, p in model.params.items()}
    save_arrays(path, model.config, arrays, extra)


def load_model(path) -> EncoderModel:
    config, arrays, _ = load_arrays(path)
    return model_from_arrays(config, arrays)


def model_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> EncoderModel:
    expected = param_shapes(config)
    params = {}
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        arr = arrays[name]
        if arr.shape != shape:
            raise CheckpointError(f"{name}: stored shape {arr.shape} != expected {shape}")
        params[name] = Tensor(arr, requires_grad=True, dtype=arr.dtype)
    return EncoderModel(config, params)
