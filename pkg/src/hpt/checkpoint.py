"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"HPTC" | u32 version (1) | u64 header length | UTF-8 JSON header | tensor blobs

The header holds the model config, the embodiment registry (spec, stem
options, normalisation stats) and a tensor table
``name -> {dtype, shape, offset, length}`` whose entries appear in registry
order; blobs are the raw little-endian tensor bytes in that same order,
offsets relative to the start of the blob section.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .data.dataset import NormStats
from .errors import BadMagicError, ShapeMismatchError, TruncatedFileError, VersionMismatchError
from .model import EmbodimentSpec, HptModel, ModelConfig

MAGIC = b"HPTC"
VERSION = 1
_DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
_NAMES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def to_bytes(model: HptModel) -> bytes:
    table = {}
    blobs = []
    offset = 0
    for name, t in model.registry.items():
        raw = np.ascontiguousarray(t.data, dtype=_DTYPES[_NAMES[t.data.dtype]]).tobytes()
        table[name] = {"dtype": _NAMES[t.data.dtype], "shape": list(t.shape),
                       "offset": offset, "length": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    embodiments = []
    for eid, spec in model.specs.items():
        stats = model.stats.get(eid)
        embodiments.append({
            "spec": spec.to_dict(),
            "stem_mlp_layers": model.stems[eid].mlp_layers,
            "stats": None if stats is None else stats.to_dict(),
        })
    header = {
        "config": model.config.to_dict(),
        "embodiments": embodiments,
        "frozen": [n for n in model.registry if not model.registry.is_trainable(n)],
        "tensors": table,
    }
    hbytes = _canonical_json(header)
    return MAGIC + struct.pack("<IQ", VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def save_checkpoint(model: HptModel, path) -> Path:
    path = Path(path)
    data = to_bytes(model)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    return path


def from_bytes(buf: bytes, source: str = "<bytes>") -> HptModel:
    if len(buf) < 4 and MAGIC.startswith(bytes(buf)):
        raise TruncatedFileError(f"{source}: file ends inside the magic number")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"{source}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    if len(buf) < 16:
        raise TruncatedFileError(f"{source}: file ends inside the fixed preamble")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != VERSION:
        raise VersionMismatchError(f"{source}: checkpoint version {version}, supported {VERSION}")
    if len(buf) < 16 + hlen:
        raise TruncatedFileError(f"{source}: header needs {hlen} bytes, only {len(buf) - 16} present")
    try:
        header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ShapeMismatchError(f"{source}: unreadable header ({e})") from None
    payload = memoryview(buf)[16 + hlen:]

    model = HptModel.skeleton(ModelConfig.from_dict(header["config"]))
    for emb in header["embodiments"]:
        spec = EmbodimentSpec.from_dict(emb["spec"])
        model.register_embodiment(spec, None, stem_mlp_layers=emb["stem_mlp_layers"])
        if emb.get("stats") is not None:
            model.stats[spec.id] = NormStats.from_dict(emb["stats"])

    table = header["tensors"]
    expected = list(model.registry)
    if list(table) != expected:
        missing = sorted(set(expected) - set(table))
        extra = sorted(set(table) - set(expected))
        raise ShapeMismatchError(f"{source}: tensor table disagrees with config "
                                 f"(missing {missing[:3]}, unexpected {extra[:3]})")
    end = 0
    for name, entry in table.items():
        t = model.registry[name]
        dt = _DTYPES.get(entry["dtype"])
        shape = tuple(entry["shape"])
        if dt is None or shape != t.shape or entry["length"] != int(np.prod(shape)) * dt.itemsize:
            raise ShapeMismatchError(f"{source}: tensor {name!r} header {entry} disagrees with "
                                     f"expected shape {t.shape}")
        if entry["offset"] != end:
            raise ShapeMismatchError(f"{source}: tensor {name!r} offset {entry['offset']} != {end}")
        end += entry["length"]
        if end > len(payload):
            raise TruncatedFileError(f"{source}: tensor {name!r} extends past end of file")
    if end != len(payload):
        raise ShapeMismatchError(f"{source}: {len(payload) - end} trailing bytes after tensor data")

    for name, entry in table.items():
        dt = _DTYPES[entry["dtype"]]
        arr = np.frombuffer(payload, dtype=dt, count=int(np.prod(entry["shape"])), offset=entry["offset"])
        model.registry[name].data = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="), copy=True)
    for name in header.get("frozen", []):
        model.registry.freeze(name)
    return model


def load_checkpoint(path) -> HptModel:
    path = Path(path)
    with open(path, "rb") as f:
        buf = f.read()
    return from_bytes(buf, str(path))


def tensor_digest(model: HptModel, prefix: str = "") -> str:
    """SHA-256 over the serialised bytes of every tensor under ``prefix``."""
    h = hashlib.sha256()
    for name, t in model.registry.items(prefix):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()
