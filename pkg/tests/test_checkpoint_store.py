import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays, array_shapes

from expertfuse.checkpoint_store import (
    ALIGN,
    BadMagic,
    CorruptIndex,
    EmptyCheckpoint,
    InvalidName,
    Manifest,
    OverlappingExtents,
    Truncated,
    UnsupportedVersion,
    decode_archive,
    encode_archive,
    read_archive,
    write_archive,
)
from expertfuse.tensor_core import NamedTensorMap

MAN = Manifest("dsa_expert", "AM", 0x1234, 0xBEEF, {"note": "x"})

any_float = st.floats(allow_nan=True, allow_infinity=True, allow_subnormal=True)
tensor = st.one_of(
    arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=3), elements=any_float),
    arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=3), elements=st.floats(width=32)),
)
names = st.text(st.characters(blacklist_characters="\x00", blacklist_categories=("Cs",)), min_size=1, max_size=8)


@settings(max_examples=60, deadline=None)
@given(st.dictionaries(names, tensor, min_size=1, max_size=5))
def test_roundtrip_bitwise(entries):
    m = NamedTensorMap(entries)
    back, man = decode_archive(encode_archive(m, MAN))
    assert man == MAN
    assert list(back) == list(m)
    for k in m:
        assert back[k].dtype == m[k].dtype and back[k].shape == m[k].shape
        assert back[k].tobytes() == m[k].tobytes()
    assert back.fingerprint == m.fingerprint


def test_special_values_survive(tmp_path):
    x = np.array([-0.0, 5e-324, -2.2250738585072014e-308 / 4, np.inf, -np.inf, 1.0])
    m = NamedTensorMap({"x": x, "s": np.array(np.float32(-0.0)), "f": np.array([1e-45], np.float32)})
    p = tmp_path / "a.xfus"
    write_archive(m, MAN, p)
    back, _ = read_archive(p)
    assert back["x"].tobytes() == x.tobytes()
    assert np.signbit(back["s"]) and back["f"].tobytes() == m["f"].tobytes()


def test_byte_identical_writes(tmp_path):
    m = NamedTensorMap({"a": np.arange(6.0).reshape(2, 3), "b": np.ones(3, np.float32)})
    write_archive(m, MAN, tmp_path / "1.xfus")
    write_archive(m, MAN, tmp_path / "2.xfus")
    assert (tmp_path / "1.xfus").read_bytes() == (tmp_path / "2.xfus").read_bytes()


def test_header_layout():
    m = NamedTensorMap({"w": np.arange(3.0)})
    buf = encode_archive(m, Manifest("base"))
    assert buf[:4] == b"XFUS"
    version, count, mlen = struct.unpack("<III", buf[4:16])
    assert (version, count) == (1, 1)
    data = buf[-24:]
    assert np.frombuffer(data, "<f8").tolist() == [0.0, 1.0, 2.0]
    assert (len(buf) - 24) % ALIGN == 0


def test_empty_and_nul_name():
    with pytest.raises(EmptyCheckpoint, match="empty checkpoint"):
        encode_archive(NamedTensorMap({}), MAN)
    with pytest.raises(InvalidName):
        encode_archive(NamedTensorMap({"a\x00b": np.zeros(1)}), MAN)


def _sample():
    return encode_archive(NamedTensorMap({"a": np.arange(4.0), "b": np.ones(2)}), MAN)


def test_bad_magic():
    buf = bytearray(_sample())
    buf[0:4] = b"NOPE"
    with pytest.raises(BadMagic) as ei:
        decode_archive(bytes(buf))
    assert ei.value.kind == "BadMagic"


def test_unsupported_version():
    buf = bytearray(_sample())
    buf[4:8] = struct.pack("<I", 99)
    with pytest.raises(UnsupportedVersion):
        decode_archive(bytes(buf))


def test_truncated():
    with pytest.raises(Truncated) as ei:
        decode_archive(_sample()[:-8])
    assert ei.value.kind == "Truncated"
    with pytest.raises(Truncated):
        decode_archive(_sample()[:20])


def _index_offsets(buf):
    _, count, mlen = struct.unpack("<III", buf[4:16])
    pos = 16 + mlen
    offs = []
    for _ in range(count):
        (n,) = struct.unpack("<I", buf[pos : pos + 4])
        pos += 4 + n
        rank = buf[pos + 1]
        pos += 2 + 8 * rank
        offs.append(pos)
        pos += 16
    return offs


def test_overlapping_extents():
    buf = bytearray(_sample())
    first, second = _index_offsets(buf)
    off0 = struct.unpack("<Q", buf[first : first + 8])[0]
    buf[second : second + 8] = struct.pack("<Q", off0 + 8)
    with pytest.raises(OverlappingExtents):
        decode_archive(bytes(buf))


def test_corrupt_dtype_code():
    buf = bytearray(_sample())
    first = _index_offsets(buf)[0]
    buf[first - 8 - 2] = 9  # dtype byte of the rank-1 tensor "a"
    with pytest.raises(CorruptIndex):
        decode_archive(bytes(buf))


def test_error_kinds_distinct():
    kinds = {c.kind for c in (BadMagic, UnsupportedVersion, OverlappingExtents, Truncated, CorruptIndex)}
    assert len(kinds) == 5


def test_manifest_invariants():
    with pytest.raises(ValueError):
        Manifest("dsa_expert")
    with pytest.raises(ValueError):
        Manifest("base", domain="AM")
    with pytest.raises(ValueError):
        Manifest("teacher")
    assert Manifest.from_json(MAN.to_json()) == MAN
