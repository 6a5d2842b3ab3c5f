"""Model file format.

Layout (all integers little-endian)::

    8 bytes   magic  b"CXRMODEL"
    uint32    format version (currently 1)
    uint32    header length in bytes
    header    UTF-8 JSON: {"graph": ..., "tensors": [...], "meta": {...}}
    payload   float32 little-endian values of every tensor, in header order

Each tensor entry records ``name``, ``shape``, ``trainable``, ``buffer`` and
``offset`` (in values, not bytes) into the payload. ``meta`` carries
free-form run information such as the preprocessing spec and class names.
The JSON is written with sorted keys so identical models give identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .graph import ModelGraph, ParamStore, check_params

MAGIC = b"CXRMODEL"
FORMAT_VERSION = 1


class ModelFileError(ValueError):
    pass


def dumps(model, params, meta=None):
    check_params(model, params)
    tensors, chunks, offset = [], [], 0
    for name in params.names():
        value = np.ascontiguousarray(params[name], dtype="<f4")
        tensors.append({"name": name, "shape": list(value.shape),
                        "trainable": bool(params.trainable.get(name, False)),
                        "buffer": name in params.buffers, "offset": offset})
        chunks.append(value.tobytes())
        offset += value.size
    header = json.dumps({"graph": model.to_dict(), "tensors": tensors, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + b"".join(chunks)


def loads(data):
    """Inverse of :func:`dumps`; returns ``(model, params, meta)``."""
    if data[:8] != MAGIC:
        raise ModelFileError("not a model file (bad magic)")
    version, hlen = struct.unpack("<II", data[8:16])
    if version != FORMAT_VERSION:
        raise ModelFileError(f"unsupported model format version {version}")
    header = json.loads(data[16:16 + hlen].decode("utf-8"))
    payload = np.frombuffer(data, dtype="<f4", offset=16 + hlen)
    model = ModelGraph.from_dict(header["graph"])
    params = ParamStore()
    for t in header["tensors"]:
        size = int(np.prod(t["shape"]))
        values = payload[t["offset"]:t["offset"] + size]
        if values.size != size:
            raise ModelFileError(f"payload truncated at tensor {t['name']!r}")
        params.values[t["name"]] = values.reshape(t["shape"]).astype(np.float32)
        params.trainable[t["name"]] = t["trainable"]
        if t["buffer"]:
            params.buffers.add(t["name"])
    check_params(model, params)
    return model, params, header.get("meta", {})


def save_model(path, model, params, meta=None):
    with open(path, "wb") as f:
        f.write(dumps(model, params, meta))


def load_model(path):
    with open(path, "rb") as f:
        return loads(f.read())
