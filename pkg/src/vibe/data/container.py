"""Binary container for named float tensors plus a key=value manifest.

Layout (all integers little-endian)::

    b"VIBE"                     magic
    u32  version                currently 1
    u32  entry count
    per entry:
        u32  name length, UTF-8 name bytes
        u8   dtype code (0 = float32, 1 = float64)
        u8   rank
        u64  extent, repeated rank times
        raw row-major little-endian values
    u64  manifest length, UTF-8 manifest bytes ("key=value" lines)

Reads validate the whole file before any tensor is handed back.
"""

from __future__ import annotations

import os
import struct
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import FormatError, TruncatedError

MAGIC = b"VIBE"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class Container:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    manifest: dict[str, str] = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]


def format_manifest(manifest: Mapping[str, object]) -> str:
    """Render a manifest as sorted ``key=value`` lines."""
    lines = []
    for key in sorted(manifest):
        value = str(manifest[key])
        if not key or "=" in key or "\n" in key or "\n" in value:
            raise FormatError(f"manifest entry {key!r} cannot be encoded as a key=value line")
        lines.append(f"{key}={value}\n")
    return "".join(lines)


def parse_manifest(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"manifest line {lineno} has no '=': {line!r}")
        out[key] = value
    return out


def encode(tensors: Mapping[str, np.ndarray], manifest: Mapping[str, object] = ()) -> bytes:
    """Serialise tensors (in the given order) and manifest to bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, array in tensors.items():
        arr = np.asarray(array)
        native = arr.dtype.newbyteorder("=") if arr.dtype.kind == "f" else arr.dtype
        if native not in _CODES:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255 or any(s < 1 for s in arr.shape):
            raise FormatError(f"{name}: shape {arr.shape} must have positive extents")
        raw_name = name.encode("utf-8")
        if not raw_name:
            raise FormatError("tensor names must be non-empty")
        code = _CODES[native]
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    text = format_manifest(dict(manifest)).encode("utf-8")
    parts.append(struct.pack("<Q", len(text)))
    parts.append(text)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if n < 0 or end > len(self.buf):
            raise TruncatedError(f"container truncated while reading {what} "
                                 f"(need {n} bytes at offset {self.pos}, have {len(self.buf) - self.pos})")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> Container:
    """Parse bytes produced by :func:`encode`; nothing is returned unless all of it parses."""
    r = _Reader(bytes(buf))
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a VIBE container (bad magic)")
    version, count = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported container version {version}")
    tensors: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(f"entry {i}: name is not valid UTF-8") from None
        code, rank = r.unpack("<BB", f"entry {name!r} header")
        if code not in _DTYPES:
            raise FormatError(f"entry {name!r}: unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q", f"entry {name!r} extents")
        if any(s < 1 for s in shape):
            raise FormatError(f"entry {name!r}: non-positive extent in {shape}")
        if name in tensors:
            raise FormatError(f"duplicate entry name {name!r}")
        dtype = _DTYPES[code]
        nbytes = dtype.itemsize
        for s in shape:
            nbytes *= s
        raw = r.take(nbytes, f"entry {name!r} payload")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
        tensors[name] = arr.astype(dtype.newbyteorder("="), copy=True)
    (text_len,) = r.unpack("<Q", "manifest length")
    try:
        text = r.take(text_len, "manifest").decode("utf-8")
    except UnicodeDecodeError:
        raise FormatError("manifest is not valid UTF-8") from None
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} unexpected trailing bytes")
    return Container(tensors, parse_manifest(text))


class PathLock:
    """Exclusive advisory lock held by creating ``<path>.lock``."""

    def __init__(self, path: str, timeout: float = 30.0):
        self.lock_path = os.fspath(path) + ".lock"
        self.timeout = timeout
        self.fd = None

    def __enter__(self):
        deadline = time.monotonic() + self.timeout
        while True:
            try:
                self.fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
                return self
            except FileExistsError:
                if time.monotonic() > deadline:
                    raise TimeoutError(f"could not lock {self.lock_path}") from None
                time.sleep(0.01)

    def __exit__(self, *exc):
        os.close(self.fd)
        os.unlink(self.lock_path)


def write_container(path, tensors: Mapping[str, np.ndarray], manifest: Mapping[str, object] = ()) -> None:
    """Write atomically: encode, write a temporary sibling, then rename over ``path``."""
    data = encode(tensors, manifest)
    path = os.fspath(path)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with PathLock(path):
        tmp = path + ".tmp"
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)


def read_container(path) -> Container:
    with open(path, "rb") as fh:
        data = fh.read()
    return decode(data)
