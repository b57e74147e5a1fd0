"""Binary checkpoint format.

Layout (little-endian)::

    b"IFR1" | u32 version | u32 n | n bytes UTF-8 JSON config
    u32 count | count x (u32 name_len | name | u32 ndim | ndim x u32 | float32 data)
"""

import json
import struct

import numpy as np
import torch

MAGIC = b"IFR1"
VERSION = 1


class UnsupportedFormatError(ValueError):
    pass


def write_checkpoint(path, config: dict, state: dict):
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            key = name.encode("utf-8")
            fh.write(struct.pack("<I", len(key)))
            fh.write(key)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_checkpoint(path):
    """Return ``(config_dict, {name: float32 tensor})``."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise UnsupportedFormatError(f"{path}: not an IFR checkpoint (bad magic {data[:4]!r})")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise UnsupportedFormatError(
                f"{path}: checkpoint format version {version} unsupported (expected {VERSION})")
        pos = 12
        config = json.loads(data[pos:pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        state = {}
        for _ in range(count):
            (klen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + klen].decode("utf-8")
            pos += klen
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            state[name] = torch.from_numpy(arr.astype(np.float32))
    except (struct.error, ValueError) as exc:
        if isinstance(exc, UnsupportedFormatError):
            raise
        raise UnsupportedFormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return config, state
