"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"MACL"  u32 version
    u32 n, n bytes           config text (UTF-8, key = value lines)
    u32 count                parameter table
      u16 n, n bytes name    u8 rank    rank x u32 dims    float32 data
    u8 has_optimizer
      f64 beta1  f64 beta2  f64 eps  u64 step
      u32 count  then per tensor: float32 m, float32 v (shapes follow the parameter table)
    u32 n, n bytes           JSON metadata (epoch, history, RNG state)
    u32 crc32                of every preceding byte
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .optim import AdamState

MAGIC = b"MACL"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    adam: AdamState | None = None
    meta: dict = field(default_factory=dict)


def _f32(a: np.ndarray) -> bytes:
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


def encode(ckpt: Checkpoint) -> bytes:
    out = bytearray(MAGIC)
    out += struct.pack("<I", VERSION)
    text = ckpt.config_text.encode("utf-8")
    out += struct.pack("<I", len(text)) + text
    out += struct.pack("<I", len(ckpt.params))
    shapes = []
    for name, arr in ckpt.params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        shapes.append(arr.shape)
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += _f32(arr)
    if ckpt.adam is None:
        out += b"\x00"
    else:
        st = ckpt.adam
        out += b"\x01" + struct.pack("<dddQ", st.beta1, st.beta2, st.eps, st.step)
        out += struct.pack("<I", len(st.m))
        if st.m and [m.shape for m in st.m] != shapes:
            raise ValueError("optimizer moments do not mirror the parameter table")
        for m, v in zip(st.m, st.v):
            out += _f32(m) + _f32(v)
    meta = json.dumps(ckpt.meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(meta)) + meta
    out += struct.pack("<I", zlib.crc32(out))
    return bytes(out)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"truncated while reading {what}", self.pos)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack("<" + fmt, self.take(struct.calcsize("<" + fmt), what))

    def floats(self, shape, what: str) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        return np.frombuffer(self.take(4 * n, what), dtype="<f4").astype(np.float32).reshape(shape)


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic, not a checkpoint", 0)
    (version,) = r.unpack("I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 4)
    (n,) = r.unpack("I", "config length")
    start = r.pos
    try:
        config_text = r.take(n, "config text").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("config text is not UTF-8", start) from None
    (count,) = r.unpack("I", "parameter count")
    params = {}
    for _ in range(count):
        (ln,) = r.unpack("H", "name length")
        name = r.take(ln, "parameter name").decode("utf-8", errors="replace")
        (rank,) = r.unpack("B", "rank")
        dims = r.unpack(f"{rank}I", "dims")
        params[name] = r.floats(dims, f"parameter {name}")
    (has_opt,) = r.unpack("B", "optimizer flag")
    adam = None
    if has_opt:
        b1, b2, eps, step = r.unpack("dddQ", "optimizer header")
        (k,) = r.unpack("I", "moment count")
        if k not in (0, len(params)):
            raise FormatError(f"{k} moment pairs for {len(params)} parameters", r.pos - 4)
        shapes = [a.shape for a in params.values()][:k]
        m, v = [], []
        for shape in shapes:
            m.append(r.floats(shape, "first moment"))
            v.append(r.floats(shape, "second moment"))
        adam = AdamState(beta1=b1, beta2=b2, eps=eps, step=step, m=m, v=v)
    (n,) = r.unpack("I", "metadata length")
    start = r.pos
    try:
        meta = json.loads(r.take(n, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise FormatError("metadata is not valid JSON", start) from None
    body_end = r.pos
    (crc,) = r.unpack("I", "checksum")
    if crc != zlib.crc32(data[:body_end]):
        raise FormatError("checksum mismatch", body_end)
    if r.pos != len(data):
        raise FormatError("trailing bytes after checksum", r.pos)
    return Checkpoint(config_text, params, adam, meta)


def save(path: str | Path, ckpt: Checkpoint) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(encode(ckpt))
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return decode(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}", exc.offset) from None
