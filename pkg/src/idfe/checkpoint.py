"""``IDFC`` checkpoint files: named float32 tensors, little-endian.

Layout: magic ``b"IDFC"``, version (u32), then records until end of file:
name length (u32), UTF-8 name, rank (u32), one u32 per extent, payload.
Batch-norm buffers are stored alongside parameters; their names end in
``running_mean`` / ``running_var``.
"""

import struct

import numpy as np

from .errors import FormatError
from .model import ModelParams

MAGIC = b"IDFC"
VERSION = 1
_U32 = struct.Struct("<I")
BUFFER_SUFFIXES = ("running_mean", "running_var")


def encode_tensors(tensors):
    """Serialize ``{name: array}`` in sorted name order."""
    parts = [MAGIC, _U32.pack(VERSION)]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        parts += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        parts += [_U32.pack(n) for n in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_tensors(blob):
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(blob[:4])!r}, expected {MAGIC!r}", 0)
    pos = 4

    def u32():
        nonlocal pos
        if pos + 4 > len(blob):
            raise FormatError("truncated record header", pos)
        (v,) = _U32.unpack_from(blob, pos)
        pos += 4
        return v

    version = u32()
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    out = {}
    while pos < len(blob):
        start = pos
        n = u32()
        if pos + n > len(blob):
            raise FormatError("truncated tensor name", pos)
        try:
            name = bytes(blob[pos:pos + n]).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not valid UTF-8", pos) from None
        pos += n
        shape = tuple(u32() for _ in range(u32()))
        size = 4 * int(np.prod(shape, dtype=np.int64))
        if pos + size > len(blob):
            raise FormatError(f"truncated payload for {name!r}", pos)
        if name in out:
            raise FormatError(f"duplicate tensor {name!r}", start)
        out[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=pos).reshape(shape).astype(np.float32)
        pos += size
    return out


def save_checkpoint(path, params: ModelParams):
    with open(path, "wb") as fh:
        fh.write(encode_tensors({**params.tensors, **params.buffers}))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        tensors = decode_tensors(fh.read())
    buffers = {k: v for k, v in tensors.items() if k.endswith(BUFFER_SUFFIXES)}
    params = {k: v for k, v in tensors.items() if k not in buffers}
    return ModelParams(params, buffers)
