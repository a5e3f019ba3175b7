"""TCKP1 checkpoint files.

Layout (little-endian)::

    b"TCKP1" | u32 version | u64 header length | header (UTF-8 JSON) | tensor bytes

The JSON header holds the resolved config, step, RNG state, loss history,
free-form metadata and an index of ``name -> (dtype, shape, offset, nbytes)``
into the tensor block.  Keys are sorted so identical content gives identical
bytes.
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, IncompatibleError

MAGIC = b"TCKP1"
VERSION = 1
_HEAD = struct.Struct("<5sIQ")
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


@dataclass
class Checkpoint:
    config: dict
    step: int
    tensors: dict  # "encoder/<name>", "head/<name>", "adam_m/...", "adam_v/..."
    rng_state: list = None
    loss_history: list = field(default_factory=list)  # [step, loss, lr]
    meta: dict = field(default_factory=dict)

    def group(self, prefix):
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def encode_checkpoint(ckpt):
    index = {}
    blobs = []
    offset = 0
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        code = "<f8" if arr.dtype == np.float64 else "<f4"
        raw = np.ascontiguousarray(arr, dtype=code).tobytes()
        index[name] = {"dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config": ckpt.config,
        "step": int(ckpt.step),
        "rng_state": [str(v) for v in ckpt.rng_state] if ckpt.rng_state is not None else None,
        "loss_history": ckpt.loss_history,
        "meta": ckpt.meta,
        "tensors": index,
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEAD.pack(MAGIC, VERSION, len(hb)) + hb + b"".join(blobs)


def decode_checkpoint(buf, source="<bytes>"):
    if len(buf) < _HEAD.size:
        raise FormatError(f"{source}: truncated checkpoint header")
    magic, version, hlen = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise IncompatibleError(f"{source}: checkpoint version {version} is not supported (expected {VERSION})")
    start = _HEAD.size
    if len(buf) < start + hlen:
        raise FormatError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(bytes(buf[start : start + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{source}: corrupt checkpoint header ({exc})") from exc
    body = start + hlen
    tensors = {}
    total = 0
    for name, info in header["tensors"].items():
        lo = body + info["offset"]
        hi = lo + info["nbytes"]
        if hi > len(buf):
            raise FormatError(f"{source}: tensor {name!r} is truncated")
        dtype = _DTYPES[info["dtype"]]
        arr = np.frombuffer(bytes(buf[lo:hi]), dtype=info["dtype"]).astype(dtype)
        tensors[name] = arr.reshape(info["shape"])
        total += info["nbytes"]
    if len(buf) != body + total:
        raise FormatError(f"{source}: expected {body + total} bytes, found {len(buf)}")
    rng_state = header.get("rng_state")
    return Checkpoint(
        config=header["config"],
        step=header["step"],
        tensors=tensors,
        rng_state=[int(v) for v in rng_state] if rng_state is not None else None,
        loss_history=header.get("loss_history", []),
        meta=header.get("meta", {}),
    )


def save_checkpoint(path, ckpt):
    """Write atomically: temp file in the same directory, then rename."""
    path = os.fspath(path)
    data = encode_checkpoint(ckpt)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tckp-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read(), source=os.fspath(path))
