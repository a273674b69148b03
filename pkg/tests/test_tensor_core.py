import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from expertfuse.tensor_core import (
    DTypeMismatchError,
    KeyMismatchError,
    NamedTensorMap,
    NonFiniteError,
    SeededRng,
    ShapeMismatchError,
    TensorError,
    elementwise,
    fnv1a64,
    magnitude_threshold,
    map_combine,
    zeros_like_map,
)

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_fnv_reference_vectors():
    # published FNV-1a 64 test vectors
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def _slow_fnv(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) % 2**64
    return h


@given(st.binary(max_size=200))
def test_fnv_matches_plain_python(data):
    assert fnv1a64(data) == _slow_fnv(data)


def test_sub_self_is_zero():
    a = np.array([[1.5, -2.0], [0.0, 3.25]])
    assert np.array_equal(elementwise("sub", a, a), np.zeros((2, 2)))


def test_scale_by_one_is_identity():
    a = np.array([1e-300, -7.0, 0.1])
    assert elementwise("scale", a, 1.0).tobytes() == a.tobytes()


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeMismatchError) as ei:
        elementwise("add", np.zeros((2, 3)), np.zeros((3, 2)))
    assert "(2, 3)" in str(ei.value) and "(3, 2)" in str(ei.value)


def test_dtype_mismatch():
    with pytest.raises(DTypeMismatchError):
        elementwise("add", np.zeros(2, np.float32), np.zeros(2, np.float64))


def test_overflow_raises_instead_of_inf():
    with pytest.raises(NonFiniteError):
        elementwise("mul", np.array([1e200]), np.array([1e200]))
    with pytest.raises(NonFiniteError):
        elementwise("add", np.array([np.nan]), np.array([1.0]))


@given(arrays(np.float64, st.integers(1, 20), elements=finite), arrays(np.float64, st.integers(1, 20), elements=finite))
def test_add_commutes_bitwise(a, b):
    n = min(a.size, b.size)
    a, b = a[:n], b[:n]
    assert elementwise("add", a, b).tobytes() == elementwise("add", b, a).tobytes()


def test_map_is_sorted_readonly_and_fingerprinted():
    m = NamedTensorMap({"b": np.ones(2), "a": np.zeros(3)})
    assert list(m) == ["a", "b"]
    with pytest.raises(ValueError):
        m["a"][0] = 5.0
    m2 = NamedTensorMap([("a", np.zeros(3)), ("b", np.ones(2))])
    assert m.fingerprint == m2.fingerprint and m == m2
    assert m.replace(a=np.zeros(3) + 1e-300).fingerprint != m.fingerprint


def test_fingerprint_sees_negative_zero_and_dtype():
    a = NamedTensorMap({"x": np.array([0.0])})
    b = NamedTensorMap({"x": np.array([-0.0])})
    c = NamedTensorMap({"x": np.array([0.0], dtype=np.float32)})
    assert len({a.fingerprint, b.fingerprint, c.fingerprint}) == 3


def test_duplicate_and_unknown_names():
    with pytest.raises(TensorError):
        NamedTensorMap([("a", np.zeros(1)), ("a", np.ones(1))])
    with pytest.raises(KeyMismatchError):
        NamedTensorMap({"a": np.zeros(1)}).updated({"zz": np.zeros(1)})


def test_map_combine_key_mismatch():
    with pytest.raises(KeyMismatchError):
        map_combine("add", {"a": np.zeros(1)}, {"b": np.zeros(1)})
    m = NamedTensorMap({"w": np.arange(4.0)})
    assert np.array_equal(map_combine("sub", m, m)["w"], zeros_like_map(m)["w"])


@pytest.mark.parametrize("f", [0.0, 0.01, 0.2, 0.5, 0.99, 1.0])
def test_magnitude_threshold_keeps_ceil_count(f):
    x = np.random.default_rng(5).normal(size=97)
    thr = magnitude_threshold(x, f)
    kept = np.count_nonzero(np.abs(x) >= thr)
    assert kept == math.ceil(f * x.size - 1e-12)


def test_magnitude_threshold_ties_survive():
    x = np.array([1.0, -1.0, 1.0, 0.5])
    assert np.count_nonzero(np.abs(x) >= magnitude_threshold(x, 0.25)) == 3


def test_seeded_rng_streams():
    a, b = SeededRng(7), SeededRng(7)
    assert np.array_equal(a.normal(size=5), b.normal(size=5))
    assert SeededRng(7).spawn(3).seed == 7 ^ 3
    assert not np.array_equal(SeededRng(7).random(4), SeededRng(7).spawn(1).random(4))
