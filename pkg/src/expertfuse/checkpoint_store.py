"""Single-file ``.xfus`` tensor archive with an embedded JSON manifest.

Layout (all integers little-endian)::

    magic        4 bytes  b"XFUS"
    version      u32
    tensor_count u32
    manifest_len u32, then manifest_len bytes of canonical UTF-8 JSON
    index        tensor_count records:
                   name_len u32, name bytes (UTF-8, no NUL)
                   dtype u8 (0=f32, 1=f64), rank u8, extents u64 * rank
                   offset u64 (absolute), length u64
    zero padding up to the next multiple of 64
    data         raw tensor bytes in index order, contiguous

Files are a pure function of (map, manifest): no timestamps, sorted names.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .tensor_core import DTYPES, NamedTensorMap, fnv1a64

MAGIC = b"XFUS"
FORMAT_VERSION = 1
ALIGN = 64
ROLES = ("base", "dsa_expert", "rl_expert", "merged")
DOMAINS = ("AM", "CAH", "BS", "CSI")
_CODE_TO_DTYPE = {code: dt for dt, code in DTYPES.items()}


class ArchiveError(Exception):
    kind = "ArchiveError"


class BadMagic(ArchiveError):
    kind = "BadMagic"


class UnsupportedVersion(ArchiveError):
    kind = "UnsupportedVersion"


class OverlappingExtents(ArchiveError):
    kind = "OverlappingExtents"


class Truncated(ArchiveError):
    kind = "Truncated"


class CorruptIndex(ArchiveError):
    kind = "CorruptIndex"


class EmptyCheckpoint(ArchiveError):
    kind = "EmptyCheckpoint"


class InvalidName(ArchiveError):
    kind = "InvalidName"


def config_digest(config) -> int:
    """64-bit FNV-1a digest of a JSON-serialisable config."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return fnv1a64(blob.encode("utf-8"))


@dataclass(frozen=True)
class Manifest:
    role: str
    domain: str | None = None
    base_fingerprint: int = 0
    training_config_digest: int = 0
    extra: dict = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")
        if self.domain is not None and self.domain not in DOMAINS:
            raise ValueError(f"unknown domain {self.domain!r}")
        if self.role == "base" and self.domain is not None:
            raise ValueError("base manifests carry no domain")
        if self.role == "dsa_expert" and self.domain is None:
            raise ValueError("dsa_expert manifests require a domain")

    def to_json(self) -> str:
        d = asdict(self)
        d["base_fingerprint"] = f"{self.base_fingerprint:016x}"
        d["training_config_digest"] = f"{self.training_config_digest:016x}"
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> Manifest:
        d = json.loads(text)
        d["base_fingerprint"] = int(d["base_fingerprint"], 16)
        d["training_config_digest"] = int(d["training_config_digest"], 16)
        return cls(**d)


def encode_archive(tensors: NamedTensorMap, manifest: Manifest) -> bytes:
    if len(tensors) == 0:
        raise EmptyCheckpoint("empty checkpoint")
    if not isinstance(tensors, NamedTensorMap):
        tensors = NamedTensorMap(tensors)
    manifest_bytes = manifest.to_json().encode("utf-8")
    records = []
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if b"\x00" in raw or not raw:
            raise InvalidName(f"invalid tensor name {name!r}")
        records.append((raw, arr))

    head = bytearray(MAGIC)
    head += struct.pack("<III", FORMAT_VERSION, len(records), len(manifest_bytes))
    head += manifest_bytes
    index_size = sum(4 + len(raw) + 2 + 8 * arr.ndim + 16 for raw, arr in records)
    data_start = -(-(len(head) + index_size) // ALIGN) * ALIGN

    offset = data_start
    blobs = []
    for raw, arr in records:
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        head += struct.pack("<I", len(raw)) + raw
        head += struct.pack("<BB", DTYPES[arr.dtype], arr.ndim)
        head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        head += struct.pack("<QQ", offset, len(blob))
        offset += len(blob)
        blobs.append(blob)
    head += b"\x00" * (data_start - len(head))
    return bytes(head) + b"".join(blobs)


def decode_archive(buf: bytes) -> tuple[NamedTensorMap, Manifest]:
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise Truncated(f"archive truncated at byte {pos} (needed {n} more)")
        out = buf[pos : pos + n]
        pos += n
        return out

    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(buf[:4])!r}")
    pos = 4
    version, count, mlen = struct.unpack("<III", take(12))
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"unsupported archive version {version}")
    try:
        manifest = Manifest.from_json(take(mlen).decode("utf-8"))
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptIndex(f"bad manifest: {exc}") from exc

    index = []
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in _CODE_TO_DTYPE:
            raise CorruptIndex(f"unknown dtype code {code} for {name!r}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        offset, length = struct.unpack("<QQ", take(16))
        dtype = _CODE_TO_DTYPE[code]
        if length != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
            raise CorruptIndex(f"length of {name!r} does not match its shape")
        index.append((name, dtype, shape, offset, length))

    data_start = -(-pos // ALIGN) * ALIGN
    cursor = data_start
    for name, _, _, offset, length in index:
        if offset < cursor:
            raise OverlappingExtents(f"tensor {name!r} overlaps preceding data")
        cursor = offset + length
    if cursor > len(buf):
        raise Truncated(f"archive truncated: data ends at {cursor}, file has {len(buf)} bytes")

    entries = {}
    for name, dtype, shape, offset, length in index:
        arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<"), count=length // dtype.itemsize, offset=offset)
        entries[name] = arr.astype(dtype).reshape(shape)
    return NamedTensorMap(entries), manifest


def write_archive(tensors: NamedTensorMap, manifest: Manifest, path: str | os.PathLike) -> None:
    payload = encode_archive(tensors, manifest)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def read_archive(path: str | os.PathLike) -> tuple[NamedTensorMap, Manifest]:
    with open(path, "rb") as fh:
        return decode_archive(fh.read())
