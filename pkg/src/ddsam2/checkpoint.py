"""Binary checkpoint: magic, version, JSON config echo, then named float64 records.

Layout (little-endian)::

    b"DDSAM2CK" | u32 version | u32 n | n bytes of UTF-8 JSON config
    u32 record count
    per record: u32 name length | name | u32 rank | u32 dims[rank] | f64 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ParseError
from .model import EncoderConfig, ModelState

MAGIC = b"DDSAM2CK"
VERSION = 1


def dumps(state):
    meta = {"encoder": state.config.to_dict(),
            "trainable": [n for n in state.params if state.trainable.get(n, False)]}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(state.params))]
    for name, t in state.params.items():
        raw = name.encode("utf-8")
        dims = t.data.shape
        parts.append(struct.pack(f"<I{len(raw)}sI{len(dims)}I", len(raw), raw, len(dims), *dims))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def save(state, path):
    Path(path).write_bytes(dumps(state))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.path, self.pos = raw, path, 0

    def take(self, n, what):
        if self.pos + n > len(self.raw):
            raise ParseError(self.path, self.pos, f"truncated while reading {what}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def loads(raw, path="<bytes>"):
    r = _Reader(raw, path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise ParseError(path, 0, "not a DDSAM2 checkpoint (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise ParseError(path, len(MAGIC), f"unsupported checkpoint version {version} (expected {VERSION})")
    n = r.u32("config length")
    try:
        meta = json.loads(r.take(n, "config").decode("utf-8"))
        cfg = EncoderConfig.from_dict(meta["encoder"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ParseError(path, r.pos - n, f"bad config block: {exc}") from None
    params = {}
    for _ in range(r.u32("record count")):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32("rank")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(8 * count, f"data of {name}"), dtype="<f8").astype(np.float64)
        params[name] = T.Tensor(data.reshape(dims))
    if r.pos != len(raw):
        raise ParseError(path, r.pos, "trailing bytes after last record")
    trainable = set(meta.get("trainable", []))
    return ModelState(cfg, params, {n: n in trainable for n in params})


def load(path):
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ParseError(path, 0, f"cannot read checkpoint ({exc.strerror})") from None
    return loads(raw, path)
