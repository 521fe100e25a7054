"""Binary checkpoint container with integrity checking.

Layout: magic ``OVU1`` | format version u32 | CRC32 of payload | payload.
The payload is a u32 record count, then per-parameter records
[name length u32, name UTF-8, dtype tag u8, rank u8, dims u32 x rank,
raw little-endian values], then one metadata record in the same framing
(name ``__meta__``, dtype tag 2, payload = UTF-8 JSON). All integers are
little-endian.
"""

from __future__ import annotations

import json
import struct
import zlib

import numpy as np

from .errors import IntegrityError, StructureError

MAGIC = b"OVU1"
VERSION = 1
DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
META_TAG = 2
META_NAME = "__meta__"


def _pack_record(name: str, tag: int, dims, raw: bytes) -> bytes:
    nb = name.encode("utf-8")
    head = struct.pack("<I", len(nb)) + nb + struct.pack("<BB", tag, len(dims))
    head += b"".join(struct.pack("<I", d) for d in dims)
    return head + raw


def save_checkpoint(model, meta: dict, path):
    """Serialize every named parameter plus a JSON metadata record."""
    records = []
    for name, p in model.named_parameters():
        arr = np.ascontiguousarray(p.data)
        tag = DTYPE_TAGS[arr.dtype]
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        records.append(_pack_record(name, tag, arr.shape, raw))
    meta_raw = json.dumps(meta, sort_keys=True).encode("utf-8")
    records.append(_pack_record(META_NAME, META_TAG, (len(meta_raw),), meta_raw))
    payload = struct.pack("<I", len(records) - 1) + b"".join(records)
    blob = MAGIC + struct.pack("<I", VERSION) + struct.pack("<I", zlib.crc32(payload)) + payload
    with open(path, "wb") as fh:
        fh.write(blob)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise IntegrityError("checkpoint truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]


def read_checkpoint(path):
    """Return (state: {name: array}, meta: dict); verifies CRC before parsing."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise IntegrityError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, crc = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    payload = blob[12:]
    actual = zlib.crc32(payload)
    if actual != crc:
        raise IntegrityError(f"checksum mismatch: header {crc:#010x}, payload {actual:#010x}")
    r = _Reader(payload)
    count = r.u32()
    state = {}
    meta = None
    for _ in range(count + 1):
        name = r.take(r.u32()).decode("utf-8")
        tag = r.u8()
        rank = r.u8()
        dims = tuple(r.u32() for _ in range(rank))
        if tag == META_TAG:
            meta = json.loads(r.take(dims[0]).decode("utf-8"))
            continue
        if tag not in TAG_DTYPES:
            raise IntegrityError(f"unknown dtype tag {tag} for record {name!r}")
        n = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(n * TAG_DTYPES[tag].itemsize), dtype=TAG_DTYPES[tag])
        state[name] = arr.reshape(dims).astype(TAG_DTYPES[tag].newbyteorder("=")).copy()
    if meta is None:
        raise IntegrityError("checkpoint carries no metadata record")
    return state, meta


def load_checkpoint(path, model):
    """Restore parameters into a model by name; strict one-to-one match."""
    state, meta = read_checkpoint(path)
    own = dict(model.named_parameters())
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise StructureError(f"parameter names disagree: missing {missing}, extra {extra}")
    for name, p in own.items():
        arr = state[name]
        if arr.shape != p.data.shape:
            raise StructureError(f"{name}: shape {arr.shape} vs model {p.data.shape}")
        p.data = arr.astype(p.data.dtype)
    return meta
