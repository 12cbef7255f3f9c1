"""Named parameter collections and the ``CVWT`` weights file format.

File layout (all integers little-endian)::

    b"CVWT"  u16 version
    u32 header length, header bytes (UTF-8 ``key=value`` lines)
    u32 entry count
    per entry: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 data
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from .autodiff import DTYPE, Tensor

MAGIC = b"CVWT"
VERSION = 1


class FormatError(ValueError):
    """A weights, index or feature file could not be decoded."""


class ParamStore:
    """Ordered map from layer-qualified names to parameter tensors."""

    def __init__(self, rng_seed: int = 0, entries: Optional[Mapping[str, Tensor]] = None):
        self.rng_seed = int(rng_seed)
        self._entries: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, t in (entries or {}).items():
            self.add(name, t)

    def add(self, name: str, value) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = value if isinstance(value, Tensor) else Tensor(np.asarray(value, dtype=DTYPE))
        t.requires_grad = True
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def names(self) -> list[str]:
        return list(self._entries)

    def num_values(self) -> int:
        return sum(t.size for t in self._entries.values())

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def copy(self) -> "ParamStore":
        return ParamStore(self.rng_seed, {k: Tensor(v.data.copy()) for k, v in self._entries.items()})

    def subset(self, prefix: str, strip: bool = True) -> "ParamStore":
        out = ParamStore(self.rng_seed)
        for k, v in self._entries.items():
            if k.startswith(prefix):
                out._entries[k[len(prefix):] if strip else k] = v
        return out

    def astype(self, dtype) -> "ParamStore":
        return ParamStore(self.rng_seed, {k: Tensor(v.data.astype(dtype)) for k, v in self._entries.items()})

    def equal(self, other: "ParamStore") -> bool:
        """Bitwise equality of names, shapes and data."""
        if self.names() != other.names():
            return False
        return all(
            self[k].data.dtype == other[k].data.dtype and self[k].data.tobytes() == other[k].data.tobytes()
            for k in self
        )


def to_bytes(store: ParamStore, header: str = "") -> bytes:
    hdr = header.encode("utf-8")
    parts = [MAGIC, struct.pack("<H", VERSION), struct.pack("<I", len(hdr)), hdr, struct.pack("<I", len(store))]
    for name, t in store.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(t.data, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    return b"".join(parts)


def from_bytes(buf: bytes) -> tuple[ParamStore, str]:
    """Decode a weights blob. Returns the store and the raw header text."""
    if buf[:4] != MAGIC:
        raise FormatError("not a CVWT weights file (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported CVWT version {version}")
    off = 6
    try:
        (hlen,) = struct.unpack_from("<I", buf, off)
        header = buf[off + 4 : off + 4 + hlen].decode("utf-8")
        off += 4 + hlen
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        entries = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2 : off + 2 + nlen].decode("utf-8")
            off += 2 + nlen
            (rank,) = struct.unpack_from("<B", buf, off)
            dims = struct.unpack_from(f"<{rank}I", buf, off + 1)
            off += 1 + 4 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if off + nbytes > len(buf):
                raise FormatError(f"truncated data for entry {name!r}")
            data = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=off).reshape(dims)
            entries[name] = Tensor(data.astype(DTYPE))
            off += nbytes
    except struct.error as exc:
        raise FormatError(f"truncated CVWT file: {exc}") from exc
    seed = int(parse_header(header).get("rng_seed", 0))
    return ParamStore(seed, entries), header


def parse_header(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip():
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def save(path, store: ParamStore, header: str = "") -> None:
    Path(path).write_bytes(to_bytes(store, header))


def load(path) -> tuple[ParamStore, str]:
    return from_bytes(Path(path).read_bytes())
