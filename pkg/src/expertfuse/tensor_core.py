"""Dense tensors, named parameter maps and a seeded random source.

Tensors are plain numpy arrays restricted to float32/float64. A
:class:`NamedTensorMap` is an immutable, name-sorted mapping of such arrays
with a cached FNV-1a content fingerprint.
"""

from __future__ import annotations

import math
import struct
from collections.abc import Callable, Iterable, Iterator, Mapping

import numpy as np

DTYPES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


class TensorError(ValueError):
    """Base class for tensor contract violations."""


class ShapeMismatchError(TensorError):
    def __init__(self, a_shape, b_shape, what: str = "tensor"):
        self.shapes = (tuple(a_shape), tuple(b_shape))
        super().__init__(f"{what} shape mismatch: {tuple(a_shape)} vs {tuple(b_shape)}")


class DTypeMismatchError(TensorError):
    pass


class KeyMismatchError(TensorError):
    def __init__(self, missing: Iterable[str]):
        self.names = sorted(missing)
        super().__init__(f"key sets differ: {self.names}")


class NonFiniteError(TensorError, ArithmeticError):
    pass


def as_tensor(data, dtype=np.float64) -> np.ndarray:
    """Return a C-contiguous, read-only copy of ``data`` with a supported dtype."""
    arr = np.array(data, dtype=dtype, copy=True, order="C")
    if arr.dtype not in DTYPES:
        raise TensorError(f"unsupported dtype {arr.dtype}")
    arr.setflags(write=False)
    return arr


def check_finite(arr: np.ndarray, what: str = "result") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values in {what}")
    return arr


def elementwise(op: str, a: np.ndarray, b) -> np.ndarray:
    """Apply ``add``, ``sub``, ``mul`` (tensor-tensor) or ``scale`` (tensor-scalar).

    The result keeps ``a``'s shape and dtype. Non-finite results raise
    :class:`NonFiniteError` instead of propagating.
    """
    a = np.asarray(a)
    with np.errstate(over="ignore", invalid="ignore"):
        out = _apply(op, a, b)
    check_finite(out, f"elementwise {op}")
    out.setflags(write=False)
    return out


def _apply(op: str, a: np.ndarray, b) -> np.ndarray:
    if op == "scale":
        if np.ndim(b) != 0:
            raise TensorError("scale expects a scalar operand")
        out = (a * a.dtype.type(b)).astype(a.dtype, copy=False)
    else:
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ShapeMismatchError(a.shape, b.shape)
        if a.dtype != b.dtype:
            raise DTypeMismatchError(f"dtype mismatch: {a.dtype} vs {b.dtype}")
        if op == "add":
            out = a + b
        elif op == "sub":
            out = a - b
        elif op == "mul":
            out = a * b
        else:
            raise TensorError(f"unknown elementwise op {op!r}")
    return out


def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def _fnv1a64_array(buf: np.ndarray, h: int) -> int:
    # vectorizing FNV is impossible (serial dependency); chunk to keep memory flat
    view = memoryview(np.ascontiguousarray(buf).view(np.uint8).reshape(-1))
    return fnv1a64(bytes(view), h)


try:  # pragma: no cover - optional acceleration, identical results
    import numba

    @numba.njit(cache=True)
    def _fnv_kernel(data, h):
        for i in range(data.shape[0]):
            h ^= np.uint64(data[i])
            h *= np.uint64(FNV_PRIME)
        return h

    def _fnv1a64_array(buf: np.ndarray, h: int) -> int:  # noqa: F811
        data = np.ascontiguousarray(buf).view(np.uint8).reshape(-1)
        return int(_fnv_kernel(data, np.uint64(h)))

    def fnv1a64(data: bytes, h: int = FNV_OFFSET) -> int:  # noqa: F811
        return int(_fnv_kernel(np.frombuffer(data, dtype=np.uint8), np.uint64(h)))

except ImportError:  # pragma: no cover
    pass


class NamedTensorMap(Mapping):
    """Immutable mapping from parameter name to tensor, iterated in sorted order."""

    __slots__ = ("_entries", "_fingerprint")

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        built: dict[str, np.ndarray] = {}
        for name, value in items:
            if not isinstance(name, str):
                raise TensorError(f"parameter names must be str, got {type(name).__name__}")
            if name in built:
                raise TensorError(f"duplicate parameter name {name!r}")
            arr = np.asarray(value)
            if arr.dtype not in DTYPES:
                arr = arr.astype(np.float64)
            if arr.flags.writeable or not arr.flags.c_contiguous:
                arr = np.array(arr, copy=True, order="C")
                arr.setflags(write=False)
            built[name] = arr
        self._entries = {k: built[k] for k in sorted(built)}
        self._fingerprint: int | None = None

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"NamedTensorMap({len(self)} tensors, fingerprint={self.fingerprint:016x})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, NamedTensorMap):
            return NotImplemented
        return self.fingerprint == other.fingerprint and list(self) == list(other)

    def __hash__(self) -> int:
        return self.fingerprint

    @property
    def fingerprint(self) -> int:
        """FNV-1a 64 over names, dtype codes, shapes and raw little-endian bytes."""
        if self._fingerprint is None:
            h = FNV_OFFSET
            for name, arr in self._entries.items():
                h = fnv1a64(name.encode("utf-8") + b"\x00", h)
                header = struct.pack("<BB", DTYPES[arr.dtype], arr.ndim)
                header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
                h = fnv1a64(header, h)
                h = _fnv1a64_array(arr.astype(arr.dtype.newbyteorder("<"), copy=False), h)
            self._fingerprint = h
        return self._fingerprint

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._entries.items()}

    def replace(self, **updates: np.ndarray) -> NamedTensorMap:
        merged = dict(self._entries)
        merged.update(updates)
        return NamedTensorMap(merged)

    def updated(self, updates: Mapping[str, np.ndarray]) -> NamedTensorMap:
        merged = dict(self._entries)
        for k, v in updates.items():
            if k not in merged:
                raise KeyMismatchError([k])
            merged[k] = v
        return NamedTensorMap(merged)

    def subset(self, names: Iterable[str]) -> NamedTensorMap:
        return NamedTensorMap({k: self._entries[k] for k in names})

    def to_dict(self) -> dict[str, np.ndarray]:
        return dict(self._entries)


def check_same_keys(a: Mapping, b: Mapping) -> None:
    if set(a) != set(b):
        raise KeyMismatchError(set(a) ^ set(b))
    for k in a:
        if np.shape(a[k]) != np.shape(b[k]):
            raise ShapeMismatchError(np.shape(a[k]), np.shape(b[k]), what=f"{k!r}")


def map_combine(
    f: Callable[[np.ndarray, np.ndarray], np.ndarray] | str,
    a: Mapping[str, np.ndarray],
    b: Mapping[str, np.ndarray],
) -> NamedTensorMap:
    """Apply a binary tensor function name by name; ``f`` may be an op name."""
    check_same_keys(a, b)
    fn = (lambda x, y: elementwise(f, x, y)) if isinstance(f, str) else f
    return NamedTensorMap({k: fn(a[k], b[k]) for k in sorted(a)})


def zeros_like_map(m: Mapping[str, np.ndarray]) -> NamedTensorMap:
    return NamedTensorMap({k: np.zeros_like(v) for k, v in m.items()})


def magnitude_threshold(t: np.ndarray, keep_fraction: float) -> float:
    """Smallest magnitude kept when retaining the top ``ceil(f*N)`` entries by |value|.

    Returns ``inf`` for ``keep_fraction == 0`` (keep nothing). Callers keep every
    element with ``|x| >= threshold``, so ties at the threshold all survive.
    """
    mags = np.abs(np.asarray(t, dtype=np.float64)).reshape(-1)
    if mags.size == 0:
        raise TensorError("magnitude_threshold of an empty tensor")
    if not 0.0 <= keep_fraction <= 1.0:
        raise TensorError(f"keep_fraction must lie in [0, 1], got {keep_fraction}")
    k = math.ceil(keep_fraction * mags.size - 1e-12)
    if k <= 0:
        return math.inf
    k = min(k, mags.size)
    # k-th largest == (N-k)-th smallest
    return float(np.partition(mags, mags.size - k)[mags.size - k])


class SeededRng:
    """Counter-based Philox4x64 stream; identical seeds give identical streams.

    Philox is keyed by the seed and advanced by a counter, so its output does
    not depend on platform word size or threading.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self._gen = np.random.Generator(np.random.Philox(key=self.seed))

    def spawn(self, index: int) -> SeededRng:
        return SeededRng(self.seed ^ (int(index) & _MASK64))

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, a, size=None, replace=True, p=None):
        return self._gen.choice(a, size=size, replace=replace, p=p)

    def permutation(self, x):
        return self._gen.permutation(x)

    def uint64(self) -> int:
        return int(self._gen.integers(0, 2**63)) * 2 + int(self._gen.integers(0, 2))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen
